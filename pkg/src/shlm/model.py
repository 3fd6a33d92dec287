"""Decoder-only toy transformer with maskable heads and FFN neurons.

The model is a pre-norm byte-level decoder: learned token + position
embeddings, N blocks of (multi-head causal attention, two-layer ReLU
FFN), a final layernorm, and a tied readout. Every attention head and
every FFN hidden neuron can be zeroed independently through a
``MaskSet``, and a forward pass can capture the activations and
gradients that the saliency criteria consume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import (
    EmptyStreamError,
    MaskShapeMismatchError,
    SequenceTooLongError,
)

CAPTURE_NONE = "none"
CAPTURE_ACTIVATIONS = "activations"
CAPTURE_GRADS = "grads"
_CAPTURE_MODES = (CAPTURE_NONE, CAPTURE_ACTIVATIONS, CAPTURE_GRADS)

_NEG_ATTN = -1e9  # additive score for future positions


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    embed_dim: int = 128
    num_heads: int = 8
    head_dim: int = 16
    ffn_dim: int = 512
    vocab_size: int = 256
    max_seq_len: int = 128
    activation: str = "relu"
    positional: str = "learned"

    def __post_init__(self):
        for name in ("num_layers", "embed_dim", "num_heads", "head_dim",
                     "ffn_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.max_seq_len < 2:
            raise ValueError("ModelConfig.max_seq_len must be >= 2")
        if self.embed_dim != self.num_heads * self.head_dim:
            raise ValueError(
                f"embed_dim {self.embed_dim} != num_heads {self.num_heads}"
                f" * head_dim {self.head_dim}"
            )
        if self.activation != "relu":
            raise ValueError("only relu FFNs are supported")
        if self.positional != "learned":
            raise ValueError("only learned position embeddings are supported")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class UnitKind(str, Enum):
    HEAD = "head"
    NEURON = "neuron"


@dataclass(frozen=True, order=True)
class UnitId:
    layer: int
    kind: UnitKind
    index: int


def num_units(cfg: ModelConfig) -> int:
    return cfg.num_layers * (cfg.num_heads + cfg.ffn_dim)


def num_head_units(cfg: ModelConfig) -> int:
    return cfg.num_layers * cfg.num_heads


def unit_index(cfg: ModelConfig, uid: UnitId) -> int:
    """Canonical flat position: all heads layer-major, then all neurons."""
    if uid.kind == UnitKind.HEAD:
        if not (0 <= uid.layer < cfg.num_layers and 0 <= uid.index < cfg.num_heads):
            raise ValueError(f"unit out of range: {uid}")
        return uid.layer * cfg.num_heads + uid.index
    if not (0 <= uid.layer < cfg.num_layers and 0 <= uid.index < cfg.ffn_dim):
        raise ValueError(f"unit out of range: {uid}")
    return num_head_units(cfg) + uid.layer * cfg.ffn_dim + uid.index


def unit_at(cfg: ModelConfig, flat: int) -> UnitId:
    heads = num_head_units(cfg)
    if not (0 <= flat < num_units(cfg)):
        raise ValueError(f"flat unit index {flat} out of range")
    if flat < heads:
        return UnitId(flat // cfg.num_heads, UnitKind.HEAD, flat % cfg.num_heads)
    flat -= heads
    return UnitId(flat // cfg.ffn_dim, UnitKind.NEURON, flat % cfg.ffn_dim)


def all_units(cfg: ModelConfig) -> list[UnitId]:
    return [unit_at(cfg, i) for i in range(num_units(cfg))]


class MaskSet:
    """Boolean keep-masks per layer: heads (N, H) and neurons (N, F)."""

    def __init__(self, heads: np.ndarray, neurons: np.ndarray):
        self.heads = np.asarray(heads, dtype=bool).copy()
        self.neurons = np.asarray(neurons, dtype=bool).copy()
        if self.heads.ndim != 2 or self.neurons.ndim != 2:
            raise MaskShapeMismatchError("mask arrays must be 2-D (layer, unit)")
        if self.heads.shape[0] != self.neurons.shape[0]:
            raise MaskShapeMismatchError(
                f"layer counts differ: heads {self.heads.shape} vs neurons {self.neurons.shape}"
            )

    @classmethod
    def ones(cls, cfg: ModelConfig) -> "MaskSet":
        return cls(
            np.ones((cfg.num_layers, cfg.num_heads), dtype=bool),
            np.ones((cfg.num_layers, cfg.ffn_dim), dtype=bool),
        )

    def validate_for(self, cfg: ModelConfig) -> None:
        want_h = (cfg.num_layers, cfg.num_heads)
        want_n = (cfg.num_layers, cfg.ffn_dim)
        if self.heads.shape != want_h or self.neurons.shape != want_n:
            raise MaskShapeMismatchError(
                f"mask shapes {self.heads.shape}/{self.neurons.shape} do not match"
                f" model {want_h}/{want_n}"
            )

    @property
    def all_ones(self) -> bool:
        return bool(self.heads.all() and self.neurons.all())

    def without(self, units) -> "MaskSet":
        out = MaskSet(self.heads, self.neurons)
        for uid in units:
            if uid.kind == UnitKind.HEAD:
                out.heads[uid.layer, uid.index] = False
            else:
                out.neurons[uid.layer, uid.index] = False
        return out

    def intersect(self, other: "MaskSet") -> "MaskSet":
        if self.heads.shape != other.heads.shape or self.neurons.shape != other.neurons.shape:
            raise MaskShapeMismatchError("cannot intersect masks of different shapes")
        return MaskSet(self.heads & other.heads, self.neurons & other.neurons)

    def surviving_units(self) -> list[UnitId]:
        out = []
        n_layers, n_heads = self.heads.shape
        for l in range(n_layers):
            for h in range(n_heads):
                if self.heads[l, h]:
                    out.append(UnitId(l, UnitKind.HEAD, h))
        for l in range(n_layers):
            for k in range(self.neurons.shape[1]):
                if self.neurons[l, k]:
                    out.append(UnitId(l, UnitKind.NEURON, k))
        return out

    def __eq__(self, other):
        return (
            isinstance(other, MaskSet)
            and np.array_equal(self.heads, other.heads)
            and np.array_equal(self.neurons, other.neurons)
        )

    def __repr__(self):
        return (
            f"MaskSet(heads {int(self.heads.sum())}/{self.heads.size},"
            f" neurons {int(self.neurons.sum())}/{self.neurons.size})"
        )


@dataclass
class ForwardResult:
    """Values (and optionally gradients) captured by one forward pass."""

    cfg: ModelConfig
    logits: np.ndarray
    loss: float | None
    n_predicted: int
    loss_tensor: "T.Tensor | None" = None
    embed: np.ndarray | None = None
    head_acts: list[np.ndarray] | None = None      # per layer (H, T, d_h), pre-mask
    neuron_acts: list[np.ndarray] | None = None    # per layer (T, F), post-ReLU pre-mask
    attn_outs: list[np.ndarray] | None = None      # per layer (T, E), pre-residual
    layer_outs: list[np.ndarray] | None = None     # per layer (T, E), post-block
    head_grads: list[np.ndarray] | None = None
    neuron_grads: list[np.ndarray] | None = None
    up_weights: list[np.ndarray] | None = None     # per layer (E, F)
    up_grads: list[np.ndarray] | None = None
    head_offset_grads: list[np.ndarray] | None = None


def _normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


class TransformerModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32,
                 params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, T.Tensor] = {}
        if params is None:
            params = self._init_params(seed)
        for name, arr in params.items():
            self.params[name] = T.Tensor(np.asarray(arr, dtype=self.dtype),
                                         requires_grad=True)

    def _init_params(self, seed: int) -> dict[str, np.ndarray]:
        cfg = self.cfg
        rng = np.random.default_rng(seed)
        std = 0.02
        resid_std = std / math.sqrt(2.0 * cfg.num_layers)
        p: dict[str, np.ndarray] = {}
        p["tok_emb"] = _normal(rng, (cfg.vocab_size, cfg.embed_dim), std, self.dtype)
        p["pos_emb"] = _normal(rng, (cfg.max_seq_len, cfg.embed_dim), std, self.dtype)
        for i in range(cfg.num_layers):
            pre = f"h{i}."
            p[pre + "ln1_g"] = np.ones(cfg.embed_dim, dtype=self.dtype)
            p[pre + "ln1_b"] = np.zeros(cfg.embed_dim, dtype=self.dtype)
            p[pre + "wq"] = _normal(rng, (cfg.embed_dim, cfg.embed_dim), std, self.dtype)
            p[pre + "wk"] = _normal(rng, (cfg.embed_dim, cfg.embed_dim), std, self.dtype)
            p[pre + "wv"] = _normal(rng, (cfg.embed_dim, cfg.embed_dim), std, self.dtype)
            p[pre + "wo"] = _normal(rng, (cfg.embed_dim, cfg.embed_dim), resid_std, self.dtype)
            p[pre + "ln2_g"] = np.ones(cfg.embed_dim, dtype=self.dtype)
            p[pre + "ln2_b"] = np.zeros(cfg.embed_dim, dtype=self.dtype)
            p[pre + "w_up"] = _normal(rng, (cfg.embed_dim, cfg.ffn_dim), std, self.dtype)
            p[pre + "w_down"] = _normal(rng, (cfg.ffn_dim, cfg.embed_dim), resid_std, self.dtype)
        p["lnf_g"] = np.ones(cfg.embed_dim, dtype=self.dtype)
        p["lnf_b"] = np.zeros(cfg.embed_dim, dtype=self.dtype)
        return p

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    @staticmethod
    def expected_param_count(cfg: ModelConfig) -> int:
        e, f = cfg.embed_dim, cfg.ffn_dim
        per_layer = 4 * e + 4 * e * e + 2 * e * f
        return (cfg.vocab_size * e + cfg.max_seq_len * e
                + cfg.num_layers * per_layer + 2 * e)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def to_dtype(self, dtype) -> "TransformerModel":
        return TransformerModel(self.cfg, dtype=dtype, params=self.state_arrays())

    def clone(self) -> "TransformerModel":
        return TransformerModel(self.cfg, dtype=self.dtype, params=self.state_arrays())

    # -- forward ------------------------------------------------------------

    def forward(self, tokens, mask: MaskSet | None = None, capture: str = CAPTURE_NONE,
                loss_from: int = 1, head_offsets=None, up_offsets=None,
                head_scales: np.ndarray | None = None,
                neuron_scales: np.ndarray | None = None) -> ForwardResult:
        """Run one sequence. ``loss_from`` is the first predicted position;
        the loss averages next-token NLL over positions loss_from..T-1.
        ``head_scales``/``neuron_scales`` multiply unit activations with
        float factors (masking is the 0/1 special case). ``head_offsets``
        and ``up_offsets`` are taped per-layer additive perturbations used
        by curvature probes.
        """
        cfg = self.cfg
        if capture not in _CAPTURE_MODES:
            raise ValueError(f"unknown capture mode {capture!r}")
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size == 0:
            raise EmptyStreamError("forward: need a non-empty 1-D token sequence")
        t_len = int(tokens.size)
        if t_len > cfg.max_seq_len:
            raise SequenceTooLongError(
                f"sequence length {t_len} exceeds max_seq_len {cfg.max_seq_len}"
            )
        if mask is not None:
            mask.validate_for(cfg)

        n_heads, d_head, e_dim = cfg.num_heads, cfg.head_dim, cfg.embed_dim
        p = self.params
        want_acts = capture in (CAPTURE_ACTIVATIONS, CAPTURE_GRADS)
        want_grads = capture == CAPTURE_GRADS
        if want_grads:
            self.zero_grads()

        head_factors = self._unit_factors(mask, head_scales, "head")
        neuron_factors = self._unit_factors(mask, neuron_scales, "neuron")

        x = T.add(T.embedding_lookup(p["tok_emb"], tokens),
                  T.slice_rows(p["pos_emb"], 0, t_len))
        embed_t = x
        causal = T.constant(
            np.triu(np.full((t_len, t_len), _NEG_ATTN, dtype=self.dtype), k=1)
        )

        head_act_ts, neuron_act_ts, attn_out_ts, layer_out_ts = [], [], [], []
        for i in range(cfg.num_layers):
            pre = f"h{i}."
            h1 = T.layernorm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
            q = T.transpose(T.reshape(T.matmul(h1, p[pre + "wq"]),
                                      (t_len, n_heads, d_head)), (1, 0, 2))
            k = T.transpose(T.reshape(T.matmul(h1, p[pre + "wk"]),
                                      (t_len, n_heads, d_head)), (1, 0, 2))
            v = T.transpose(T.reshape(T.matmul(h1, p[pre + "wv"]),
                                      (t_len, n_heads, d_head)), (1, 0, 2))
            scores = T.add(T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))),
                                   1.0 / math.sqrt(d_head)), causal)
            probs = T.softmax_rows(scores)
            att = T.matmul(probs, v)                      # (H, T, d_h)
            if head_offsets is not None:
                att = T.add(att, head_offsets[i])
            head_act_ts.append(att)
            if head_factors is not None:
                att = T.mul(att, T.constant(
                    head_factors[i].reshape(n_heads, 1, 1).astype(self.dtype)))
            merged = T.reshape(T.transpose(att, (1, 0, 2)), (t_len, e_dim))
            attn_out = T.matmul(merged, p[pre + "wo"])
            attn_out_ts.append(attn_out)
            x = T.add(x, attn_out)

            h2 = T.layernorm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
            w_up = p[pre + "w_up"]
            if up_offsets is not None:
                w_up = T.add(w_up, up_offsets[i])
            hidden = T.relu(T.matmul(h2, w_up))           # (T, F)
            neuron_act_ts.append(hidden)
            if neuron_factors is not None:
                hidden = T.mul(hidden, T.constant(
                    neuron_factors[i].astype(self.dtype)))
            x = T.add(x, T.matmul(hidden, p[pre + "w_down"]))
            layer_out_ts.append(x)

        hf = T.layernorm(x, p["lnf_g"], p["lnf_b"])
        logits = T.matmul(hf, T.transpose(p["tok_emb"], (1, 0)))

        loss_t = None
        n_pred = 0
        if t_len >= 2 and 1 <= loss_from <= t_len - 1:
            n_pred = t_len - loss_from
            loss_t = T.cross_entropy(
                T.slice_rows(logits, loss_from - 1, t_len - 1), tokens[loss_from:]
            )

        result = ForwardResult(
            cfg=cfg,
            logits=logits.data,
            loss=float(loss_t.data) if loss_t is not None else None,
            n_predicted=n_pred,
            loss_tensor=loss_t,
        )
        if want_acts:
            result.embed = embed_t.data.copy()
            result.head_acts = [t.data.copy() for t in head_act_ts]
            result.neuron_acts = [t.data.copy() for t in neuron_act_ts]
            result.attn_outs = [t.data.copy() for t in attn_out_ts]
            result.layer_outs = [t.data.copy() for t in layer_out_ts]
            result.up_weights = [p[f"h{i}.w_up"].data.copy()
                                 for i in range(cfg.num_layers)]
        if want_grads:
            if loss_t is None:
                raise EmptyStreamError(
                    "forward: gradient capture needs at least 2 tokens past loss_from"
                )
            T.backward(loss_t)
            result.head_grads = [self._grad_of(t) for t in head_act_ts]
            result.neuron_grads = [self._grad_of(t) for t in neuron_act_ts]
            result.up_grads = [self._grad_of(p[f"h{i}.w_up"])
                               for i in range(cfg.num_layers)]
            if head_offsets is not None:
                result.head_offset_grads = [self._grad_of(t) for t in head_offsets]
        return result

    def _unit_factors(self, mask: MaskSet | None, scales: np.ndarray | None,
                      kind: str) -> np.ndarray | None:
        cfg = self.cfg
        width = cfg.num_heads if kind == "head" else cfg.ffn_dim
        base = None
        if mask is not None:
            arr = mask.heads if kind == "head" else mask.neurons
            base = arr.astype(np.float64)
        if scales is not None:
            scales = np.asarray(scales, dtype=np.float64)
            if scales.shape != (cfg.num_layers, width):
                raise MaskShapeMismatchError(
                    f"{kind} scales shape {scales.shape} !="
                    f" ({cfg.num_layers}, {width})"
                )
            base = scales if base is None else base * scales
        return base

    @staticmethod
    def _grad_of(t: T.Tensor) -> np.ndarray:
        if t.grad is None:
            return np.zeros_like(t.data)
        return t.grad.copy()

    # -- evaluation ---------------------------------------------------------

    def stream_nll(self, tokens, mask: MaskSet | None = None,
                   window: int | None = None) -> tuple[float, int]:
        """Total float64 next-token NLL and prediction count over
        non-overlapping windows of the stream. A trailing partial window
        is evaluated when it still has something to predict.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        window = self.cfg.max_seq_len if window is None else int(window)
        if window < 2:
            raise ValueError("stream_nll: window must be >= 2")
        total, count = 0.0, 0
        for start in range(0, len(tokens), window):
            chunk = tokens[start:start + window]
            if len(chunk) < 2:
                break
            res = self.forward(chunk, mask=mask)
            total += _nll_from_logits(res.logits, chunk[1:])
            count += len(chunk) - 1
        if count == 0:
            raise EmptyStreamError("stream_nll: nothing to predict in the stream")
        return total, count


def _nll_from_logits(logits: np.ndarray, targets: np.ndarray) -> float:
    """float64 sum of next-token NLL; row i of logits predicts targets[i]."""
    z = np.asarray(logits[: len(targets)], dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))).reshape(-1)
    picked = z[np.arange(len(targets)), targets]
    return float((lse - picked).sum())


class _Replicas:
    """Per-worker model clones for deterministic parallel capture."""

    def __init__(self, model: TransformerModel, workers: int):
        self.workers = max(1, int(workers))
        self.models = [model] + [model.clone() for _ in range(self.workers - 1)]

    def run(self, jobs, fn):
        """Apply fn(model, job) across jobs, results in job order.

        Jobs are striped across worker threads and each thread drives its
        own model replica serially, so per-job numerics cannot race.
        """
        jobs = list(jobs)
        if self.workers == 1 or len(jobs) <= 1:
            return [fn(self.models[0], job) for job in jobs]
        from concurrent.futures import ThreadPoolExecutor

        results: list = [None] * len(jobs)

        def drive(worker_idx: int):
            out = []
            for idx in range(worker_idx, len(jobs), self.workers):
                out.append((idx, fn(self.models[worker_idx], jobs[idx])))
            return out

        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            for chunk in pool.map(drive, range(self.workers)):
                for idx, value in chunk:
                    results[idx] = value
        return results
