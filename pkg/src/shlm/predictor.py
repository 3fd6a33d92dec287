"""Sparsity predictors: small regressors mapping early activations to
criterion scores, so inference can build masks without running backprop.

Three wirings are supported:
  shadow  - one MLP fed by layer 0's attention output at the last
            position, scoring every later layer (layer 0 stays dense)
  fullseq - a tiny transformer encoder pools the whole embedded input,
            then an MLP scores every layer including layer 0
  dejavu  - per-host MLPs at alternating layers, each fed that layer's
            last-token output and scoring the next ``stride`` layers
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import read_container, write_container
from .criteria import AGGREGATE_ONLY, CriterionKind, ScoreVector
from .errors import (ConfigMismatchError, ContextualUnsupportedError,
                     DatasetTooSmallError, EmptyHeldoutError,
                     EmptyPromptError, FeatureShapeMismatchError)
from .model import (CAPTURE_ACTIVATIONS, MaskSet, ModelConfig,
                    TransformerModel, num_head_units, num_units)
from .pruning import PruneSpec, build_mask
from .train import AdamW, cosine_lr

TOPOLOGIES = ("shadow", "fullseq", "dejavu")
NORMALIZATIONS = ("minmax", "zscore", "none")

# analytical predictor-cost model; dims straight from the OPT family
MODEL_PRESETS = {
    "opt-1.3b": dict(num_layers=24, embed_dim=2048, num_heads=32,
                     ffn_dim=8192, max_seq_len=2048),
    "opt-13b": dict(num_layers=40, embed_dim=5120, num_heads=40,
                    ffn_dim=20480, max_seq_len=2048),
    "opt-30b": dict(num_layers=48, embed_dim=7168, num_heads=56,
                    ffn_dim=28672, max_seq_len=2048),
    "opt-66b": dict(num_layers=64, embed_dim=9216, num_heads=72,
                    ffn_dim=36864, max_seq_len=2048),
    "opt-175b": dict(num_layers=96, embed_dim=12288, num_heads=96,
                     ffn_dim=49152, max_seq_len=2048),
}


# ---------------------------------------------------------------------------
# cost model


@dataclass(frozen=True)
class FlopsReport:
    topology: str
    flops: int
    dejavu_flops: int
    reduction_vs_dejavu: float


def _dims(spec) -> tuple[int, int, int, int, int]:
    """Accept a preset name, a ModelConfig, or a plain mapping."""
    if isinstance(spec, str):
        spec = MODEL_PRESETS[spec]
    if isinstance(spec, ModelConfig):
        return (spec.num_layers, spec.embed_dim, spec.num_heads,
                spec.ffn_dim, spec.max_seq_len)
    return (int(spec["num_layers"]), int(spec["embed_dim"]),
            int(spec["num_heads"]), int(spec["ffn_dim"]),
            int(spec.get("max_seq_len", 2048)))


def predictor_flops(spec, topology: str = "shadow", p1: int = 2048) -> FlopsReport:
    """Per-token predictor cost versus the per-layer (dejavu) wiring.

    Integer arithmetic throughout so the closed-form gap
    dejavu - shadow = (N-1)*E*p1 holds exactly.
    """
    if topology not in TOPOLOGIES:
        raise ValueError(f"unknown topology {topology!r}")
    n, e, h, f, seq = _dims(spec)
    p1 = int(p1)
    dejavu = n * (e * p1 + p1 * (h + f))
    shadow = e * p1 + p1 * n * (h + f)
    if topology == "dejavu":
        flops = dejavu
    elif topology == "shadow":
        flops = shadow
    else:
        # fullseq = shadow plus one encoder pass over the whole sequence
        flops = shadow + 2 * (2 * e * e + e * seq * seq)
    reduction = (dejavu - flops) / dejavu
    return FlopsReport(topology=topology, flops=flops, dejavu_flops=dejavu,
                       reduction_vs_dejavu=reduction)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class PredictorConfig:
    """Training hyperparameters. Defaults are the published regressor
    recipe; hidden_dim=None resolves to min(2048, 4*E) so toy models get
    a proportionate head instead of a 2048-wide one."""

    topology: str = "shadow"
    hidden_layers: int = 1
    hidden_dim: int | None = None
    activation: str = "relu"
    epochs: int = 100
    batch: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    normalization: str = "minmax"
    dejavu_stride: int = 2

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"topology must be one of {TOPOLOGIES}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        if self.activation != "relu":
            raise ValueError("only relu hidden activations are supported")
        if self.hidden_layers < 1 or self.epochs < 1 or self.batch < 1:
            raise ValueError("hidden_layers, epochs and batch must be >= 1")
        if self.dejavu_stride < 1:
            raise ValueError("dejavu_stride must be >= 1")

    def resolved_hidden(self, embed_dim: int) -> int:
        if self.hidden_dim is not None:
            return self.hidden_dim
        return min(2048, 4 * embed_dim)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "topology", "hidden_layers", "hidden_dim", "activation",
            "epochs", "batch", "lr", "weight_decay", "normalization",
            "dejavu_stride")}

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorConfig":
        return cls(**d)


def dejavu_hosts(cfg: ModelConfig, stride: int) -> list[int]:
    return list(range(0, cfg.num_layers, stride))


def dejavu_window(cfg: ModelConfig, host: int, stride: int) -> list[int]:
    """Layers whose masks the host at ``host`` predicts."""
    return [l for l in range(host + 1, host + stride + 1) if l < cfg.num_layers]


def covered_layers(cfg: ModelConfig, topology: str) -> list[int]:
    if topology == "fullseq":
        return list(range(cfg.num_layers))
    return list(range(1, cfg.num_layers))


def covered_units(cfg: ModelConfig, topology: str) -> np.ndarray:
    """Canonical-order bool mask of units the topology can score."""
    layers = set(covered_layers(cfg, topology))
    cov = np.zeros(num_units(cfg), dtype=bool)
    heads = cov[: num_head_units(cfg)].reshape(cfg.num_layers, cfg.num_heads)
    neurons = cov[num_head_units(cfg):].reshape(cfg.num_layers, cfg.ffn_dim)
    for l in layers:
        heads[l, :] = True
        neurons[l, :] = True
    return cov


def _layer_slices(cfg: ModelConfig, layer: int) -> tuple[slice, slice]:
    """(head slice, neuron slice) into the canonical flat unit order."""
    hb = num_head_units(cfg)
    return (slice(layer * cfg.num_heads, (layer + 1) * cfg.num_heads),
            slice(hb + layer * cfg.ffn_dim, hb + (layer + 1) * cfg.ffn_dim))


def _window_slices(cfg: ModelConfig, layers: list[int]) -> list[slice]:
    return [s for l in layers for s in _layer_slices(cfg, l)]


# ---------------------------------------------------------------------------
# features


def extract_features(model: TransformerModel, prompt, topology: str,
                     stride: int = 2):
    """Predictor input for one prompt, taken from a dense forward pass.

    shadow: layer-0 attention output at the last position, shape (E,).
    dejavu: stacked post-host-layer last-token states, (n_hosts, E).
    fullseq: the embedded token sequence, (T, E).
    """
    if topology not in TOPOLOGIES:
        raise ValueError(f"unknown topology {topology!r}")
    tokens = prompt[0] if isinstance(prompt, tuple) else prompt
    tokens = np.asarray(tokens, dtype=np.int64)
    if isinstance(prompt, tuple):
        tokens = np.concatenate(
            [tokens, np.asarray(prompt[1], dtype=np.int64)])
    if tokens.size == 0:
        raise EmptyPromptError("cannot extract features from an empty prompt")
    res = model.forward(tokens, capture=CAPTURE_ACTIVATIONS)
    if topology == "shadow":
        return res.attn_outs[0][-1].astype(np.float32)
    if topology == "fullseq":
        return res.embed.astype(np.float32)
    hosts = dejavu_hosts(model.cfg, stride)
    return np.stack([res.layer_outs[h][-1] for h in hosts]).astype(np.float32)


def _check_feature(feature: np.ndarray, expected: tuple, topology: str):
    feature = np.asarray(feature, dtype=np.float32)
    ok = (feature.ndim == len(expected)
          and all(exp is None or dim == exp
                  for dim, exp in zip(feature.shape, expected)))
    if not ok:
        raise FeatureShapeMismatchError(
            f"{topology} feature has shape {feature.shape}, "
            f"expected {expected} (None = any)")
    return feature


# ---------------------------------------------------------------------------
# target normalization


def _normalize_slice(raw: np.ndarray, scheme: str) -> tuple[np.ndarray, tuple]:
    """Map one layer's scores to training targets; params invert the map."""
    raw = np.asarray(raw, dtype=np.float64)
    if scheme == "none":
        return raw.copy(), (0.0, 1.0)
    if scheme == "minmax":
        lo, hi = float(raw.min()), float(raw.max())
        span = hi - lo
        if span <= 0.0:
            return np.full(raw.shape, 0.5), (lo, 0.0)
        return (raw - lo) / span, (lo, span)
    mean = float(raw.mean())
    std = float(raw.std())
    if std <= 0.0:
        return np.zeros(raw.shape), (mean, 0.0)
    return (raw - mean) / std, (mean, std)


def _denormalize_slice(norm: np.ndarray, scheme: str, params: tuple) -> np.ndarray:
    a, b = params
    if scheme == "none":
        return np.asarray(norm, dtype=np.float64).copy()
    # degenerate slices store b=0 and collapse back to the constant a
    return np.asarray(norm, dtype=np.float64) * b + a


def normalize_scores(cfg: ModelConfig, scores: ScoreVector,
                     scheme: str) -> tuple[np.ndarray, dict]:
    """Per-layer, per-kind normalization over covered units only."""
    out = np.zeros(num_units(cfg), dtype=np.float64)
    params: dict[tuple[int, str], tuple] = {}
    for layer in range(cfg.num_layers):
        for kind, sl in zip(("head", "neuron"), _layer_slices(cfg, layer)):
            covered = scores.covered[sl]
            if not covered.any():
                continue
            vals, p = _normalize_slice(
                scores.values[sl][covered].astype(np.float64), scheme)
            seg = out[sl]
            seg[covered] = vals
            params[(layer, kind)] = p
    return out, params


def denormalize_scores(cfg: ModelConfig, normalized: np.ndarray,
                       covered: np.ndarray, scheme: str,
                       params: dict) -> np.ndarray:
    out = np.zeros(num_units(cfg), dtype=np.float64)
    for (layer, kind), p in params.items():
        sl = _layer_slices(cfg, layer)[0 if kind == "head" else 1]
        cov = covered[sl]
        seg = out[sl]
        seg[cov] = _denormalize_slice(normalized[sl][cov], scheme, p)
    return out


# ---------------------------------------------------------------------------
# dataset


@dataclass
class CriteriaDataset:
    """Per-example (feature, normalized target) pairs plus everything
    needed to recover raw scores and redo the train/held-out split."""

    model_config: ModelConfig
    topology: str
    criterion: str
    normalization: str
    stride: int
    features: list
    targets: np.ndarray            # (n, num_units) f64, normalized
    covered: np.ndarray            # canonical bool mask, shared
    norm_params: list[dict]        # per example {(layer, kind): (a, b)}
    shots: int | None = None
    train_idx: np.ndarray = field(default=None)
    heldout_idx: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.features)
        if self.train_idx is None:
            n_train = min(max(1, (9 * n) // 10), n - 1) if n > 1 else 0
            self.train_idx = np.arange(n_train)
            self.heldout_idx = np.arange(n_train, n)

    def __len__(self) -> int:
        return len(self.features)

    def raw_scores(self, i: int) -> np.ndarray:
        return denormalize_scores(self.model_config, self.targets[i],
                                  self.covered, self.normalization,
                                  self.norm_params[i])


def build_dataset(model: TransformerModel, prompts, criterion,
                  topology: str = "shadow", normalization: str = "minmax",
                  shots: int | None = None, stride: int = 2,
                  loss_on: str = "all", workers: int = 1,
                  grasp_eps: float = 1e-4) -> CriteriaDataset:
    """Score each prompt with a contextual criterion and pair those
    targets with predictor features from the same dense forward."""
    from .criteria import collect_criteria

    kind = CriterionKind(criterion)
    if kind in AGGREGATE_ONLY:
        raise ContextualUnsupportedError(
            f"criterion '{kind.value}' has no per-example form; "
            "predictors need contextual targets")
    if topology not in TOPOLOGIES:
        raise ValueError(f"unknown topology {topology!r}")
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
    for p in prompts:
        length = (len(p[0]) + len(p[1])) if isinstance(p, tuple) else len(p)
        if length == 0:
            raise EmptyPromptError("dataset prompts must be non-empty")

    per_example = collect_criteria(model, prompts, kind, aggregate=False,
                                   loss_on=loss_on, workers=workers,
                                   grasp_eps=grasp_eps)
    topo_cov = covered_units(model.cfg, topology)
    features, targets, all_params = [], [], []
    covered = None
    for prompt, sv in zip(prompts, per_example):
        cov = sv.covered & topo_cov
        if covered is None:
            covered = cov
        masked = ScoreVector(sv.values, sv.criterion, sv.example_id, cov)
        norm, params = normalize_scores(model.cfg, masked, normalization)
        features.append(extract_features(model, prompt, topology, stride))
        targets.append(norm)
        all_params.append(params)
    return CriteriaDataset(
        model_config=model.cfg, topology=topology, criterion=kind.value,
        normalization=normalization, stride=stride, features=features,
        targets=np.asarray(targets, dtype=np.float64), covered=covered,
        norm_params=all_params, shots=shots)


# ---------------------------------------------------------------------------
# the regressors


@dataclass
class Predictor:
    """Immutable after training; safe for concurrent predict calls."""

    config: PredictorConfig
    model_config: ModelConfig
    criterion: str
    params: dict[str, np.ndarray]
    covered: np.ndarray

    @property
    def topology(self) -> str:
        return self.config.topology


def _init_mlp(rng: np.random.Generator, prefix: str, in_dim: int,
              hidden: int, layers: int, out_dim: int) -> dict[str, np.ndarray]:
    params = {}
    dims = [in_dim] + [hidden] * layers + [out_dim]
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        params[f"{prefix}w{i}"] = rng.normal(
            0.0, math.sqrt(2.0 / a), size=(a, b)).astype(np.float32)
        params[f"{prefix}b{i}"] = np.zeros(b, dtype=np.float32)
    return params


def _init_encoder(rng: np.random.Generator, e: int) -> dict[str, np.ndarray]:
    """1-layer 2-head full-attention block of width E, mean-pooled."""
    params = {}
    for name in ("enc.wq", "enc.wk", "enc.wv", "enc.wo"):
        params[name] = rng.normal(0.0, 0.02, size=(e, e)).astype(np.float32)
    params["enc.ln_g"] = np.ones(e, dtype=np.float32)
    params["enc.ln_b"] = np.zeros(e, dtype=np.float32)
    return params


def _mlp_forward(p: dict, prefix: str, x: T.Tensor, layers: int) -> T.Tensor:
    h = x
    for i in range(layers + 1):
        h = T.add(T.matmul(h, p[f"{prefix}w{i}"]), p[f"{prefix}b{i}"])
        if i < layers:
            h = T.relu(h)
    return h


def _cols(m: T.Tensor, start: int, stop: int) -> T.Tensor:
    return T.transpose(T.slice_rows(T.transpose(m, (1, 0)), start, stop),
                       (1, 0))


def _encode_sequence(p: dict, seq: T.Tensor, e: int) -> T.Tensor:
    """(T, E) -> (E,): normed 2-head full self-attention with residual,
    mean-pooled over positions. Concatenation+projection is expressed as
    a sum of per-head projections through row blocks of wo."""
    dh = e // 2
    x = T.layernorm(seq, p["enc.ln_g"], p["enc.ln_b"])
    q = T.matmul(x, p["enc.wq"])
    k = T.matmul(x, p["enc.wk"])
    v = T.matmul(x, p["enc.wv"])
    out = seq
    for h in range(2):
        qs = _cols(q, h * dh, (h + 1) * dh)
        ks = _cols(k, h * dh, (h + 1) * dh)
        vs = _cols(v, h * dh, (h + 1) * dh)
        att = T.softmax_rows(T.scale(
            T.matmul(qs, T.transpose(ks, (1, 0))), 1.0 / math.sqrt(dh)))
        proj = T.matmul(T.matmul(att, vs),
                        T.slice_rows(p["enc.wo"], h * dh, (h + 1) * dh))
        out = T.add(out, proj)
    return T.mean_rows(out)


class _Net:
    """Taped view over a predictor's parameter arrays."""

    def __init__(self, arrays: dict[str, np.ndarray], trainable: bool):
        self.tensors = {n: T.Tensor(a.copy(), requires_grad=trainable)
                        for n, a in arrays.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}


def _forward_batch(net: _Net, cfg: PredictorConfig, mcfg: ModelConfig,
                   features, prefix: str = "") -> T.Tensor:
    """Predictions for a list of features -> (batch, out_dim) Tensor."""
    p = net.tensors
    if cfg.topology == "fullseq":
        pooled = [_encode_sequence(p, T.constant(f), mcfg.embed_dim)
                  for f in features]
        x = T.stack_rows(pooled)
        return _mlp_forward(p, prefix, x, cfg.hidden_layers)
    x = T.constant(np.stack([np.asarray(f, dtype=np.float32)
                             for f in features]))
    return _mlp_forward(p, prefix, x, cfg.hidden_layers)


# ---------------------------------------------------------------------------
# training


@dataclass
class PredictorTrainingLog:
    train_mse: list[float]
    heldout_mse: list[float]
    settings: dict
    per_host: dict | None = None

    @property
    def final_heldout_mse(self) -> float:
        return self.heldout_mse[-1]


def _mse_loss(pred: T.Tensor, target: np.ndarray) -> T.Tensor:
    diff = T.sub(pred, T.constant(target.astype(np.float32)))
    return T.scale(T.tsum(T.square(diff)), 1.0 / target.size)


def _train_single_net(arrays: dict, cfg: PredictorConfig, mcfg: ModelConfig,
                      features, targets: np.ndarray, train_idx, heldout_idx,
                      rng: np.random.Generator, prefix: str = ""):
    """Shared epoch loop; mutates nothing outside its own net copy."""
    net = _Net(arrays, trainable=True)
    opt = AdamW(list(net.tensors.values()), lr=cfg.lr,
                weight_decay=cfg.weight_decay)
    train_curve, heldout_curve = [], []
    for epoch in range(cfg.epochs):
        opt.lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        order = train_idx[rng.permutation(len(train_idx))]
        se_sum, n_seen = 0.0, 0
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            pred = _forward_batch(net, cfg, mcfg,
                                  [features[i] for i in idx], prefix)
            loss = _mse_loss(pred, targets[idx])
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            se_sum += float(loss.data) * targets[idx].size
            n_seen += targets[idx].size
        train_curve.append(se_sum / n_seen)
        heldout_curve.append(_eval_mse(net, cfg, mcfg, features,
                                       targets, heldout_idx, prefix))
    return net.arrays(), train_curve, heldout_curve


def _eval_mse(net: _Net, cfg: PredictorConfig, mcfg: ModelConfig,
              features, targets: np.ndarray, idx, prefix: str = "") -> float:
    if len(idx) == 0:
        return float("nan")
    pred = _forward_batch(net, cfg, mcfg, [features[i] for i in idx], prefix)
    err = pred.data.astype(np.float64) - targets[idx]
    for t in net.tensors.values():
        t.zero_grad()
    return float(np.mean(err * err))


def train_predictor(dataset: CriteriaDataset, config: PredictorConfig,
                    seed: int = 0) -> tuple[Predictor, PredictorTrainingLog]:
    """Fit the regressor(s) to the dataset's normalized targets.

    Deterministic under (dataset, config, seed). Requires enough training
    examples for at least two optimizer batches per epoch.
    """
    if config.topology != dataset.topology:
        raise ValueError(
            f"config topology {config.topology!r} != dataset "
            f"topology {dataset.topology!r}")
    mcfg = dataset.model_config
    n_train = len(dataset.train_idx)
    if math.ceil(n_train / config.batch) < 2:
        raise DatasetTooSmallError(
            f"{n_train} training examples fill fewer than 2 batches "
            f"of {config.batch}")
    hidden = config.resolved_hidden(mcfg.embed_dim)
    covered = dataset.covered
    rng = np.random.default_rng(seed)

    if config.topology == "dejavu":
        if config.dejavu_stride != dataset.stride:
            raise ValueError(
                f"config stride {config.dejavu_stride} != dataset "
                f"stride {dataset.stride}")
        hosts = dejavu_hosts(mcfg, dataset.stride)
        params: dict[str, np.ndarray] = {}
        per_host: dict[int, dict] = {}
        feats = np.stack([np.asarray(f, dtype=np.float32)
                          for f in dataset.features])
        for hi, h in enumerate(hosts):
            win = np.zeros_like(covered)
            for sl in _window_slices(mcfg, dejavu_window(mcfg, h, dataset.stride)):
                win[sl] = True
            idx_cols = np.where(covered & win)[0]
            if idx_cols.size == 0:
                continue
            sub_rng = np.random.default_rng([seed, h])
            arrays = _init_mlp(rng, f"host{h}.", mcfg.embed_dim, hidden,
                               config.hidden_layers, idx_cols.size)
            trained, tr, he = _train_single_net(
                arrays, config, mcfg, feats[:, hi, :],
                dataset.targets[:, idx_cols].astype(np.float32),
                dataset.train_idx, dataset.heldout_idx, sub_rng,
                prefix=f"host{h}.")
            params.update(trained)
            per_host[h] = {"train_mse": tr, "heldout_mse": he}
        curves = list(per_host.values())
        log = PredictorTrainingLog(
            train_mse=list(np.mean([c["train_mse"] for c in curves], axis=0)),
            heldout_mse=list(np.mean([c["heldout_mse"] for c in curves], axis=0)),
            settings={"seed": seed, "hidden": hidden, **config.to_dict()},
            per_host=per_host)
        pred = Predictor(config=config, model_config=mcfg,
                         criterion=dataset.criterion, params=params,
                         covered=covered.copy())
        return pred, log

    out_dim = int(covered.sum())
    arrays = _init_mlp(rng, "", mcfg.embed_dim, hidden,
                       config.hidden_layers, out_dim)
    if config.topology == "fullseq":
        arrays = {**_init_encoder(rng, mcfg.embed_dim), **arrays}
    trained, tr, he = _train_single_net(
        arrays, config, mcfg, dataset.features,
        dataset.targets[:, covered].astype(np.float32),
        dataset.train_idx, dataset.heldout_idx, rng)
    log = PredictorTrainingLog(
        train_mse=tr, heldout_mse=he,
        settings={"seed": seed, "hidden": hidden, **config.to_dict()})
    pred = Predictor(config=config, model_config=mcfg,
                     criterion=dataset.criterion, params=params_dict(trained),
                     covered=covered.copy())
    return pred, log


def params_dict(arrays: dict) -> dict[str, np.ndarray]:
    return {n: np.asarray(a, dtype=np.float32) for n, a in arrays.items()}


# ---------------------------------------------------------------------------
# prediction


def _run_net(predictor: Predictor, feature: np.ndarray,
             prefix: str = "") -> np.ndarray:
    net = _Net(predictor.params if not prefix else
               {n: a for n, a in predictor.params.items()
                if n.startswith(prefix)}, trainable=False)
    batch = [feature]
    out = _forward_batch(net, predictor.config, predictor.model_config,
                         batch, prefix)
    return out.data[0].astype(np.float64)


def predict_scores(predictor: Predictor, feature, host: int | None = None) -> ScoreVector:
    """Scores for one feature. shadow/fullseq cover all their layers at
    once; dejavu covers one host's window when ``host`` is given, or
    unions every host when fed the stacked (n_hosts, E) feature."""
    mcfg = predictor.model_config
    e = mcfg.embed_dim
    cfg = predictor.config
    values = np.zeros(num_units(mcfg), dtype=np.float64)
    if cfg.topology in ("shadow", "fullseq"):
        if cfg.topology == "shadow":
            feature = _check_feature(feature, (e,), "shadow")
        else:
            feature = _check_feature(feature, (None, e), "fullseq")
            if feature.shape[0] == 0:
                raise FeatureShapeMismatchError("fullseq feature has no positions")
        out = _run_net(predictor, feature)
        values[predictor.covered] = out
        return ScoreVector(values, predictor.criterion,
                           covered=predictor.covered.copy())

    hosts = dejavu_hosts(mcfg, cfg.dejavu_stride)
    if host is not None:
        if host not in hosts:
            raise FeatureShapeMismatchError(f"layer {host} hosts no predictor")
        feature = _check_feature(feature, (e,), "dejavu")
        pairs = [(host, feature)]
    else:
        feature = _check_feature(feature, (len(hosts), e), "dejavu")
        pairs = list(zip(hosts, feature))
    covered = np.zeros_like(predictor.covered)
    for h, feat in pairs:
        win = np.zeros_like(predictor.covered)
        for sl in _window_slices(mcfg, dejavu_window(mcfg, h, cfg.dejavu_stride)):
            win[sl] = True
        idx_cols = np.where(predictor.covered & win)[0]
        if idx_cols.size == 0:
            continue
        out = _run_net(predictor, feat, prefix=f"host{h}.")
        values[idx_cols] = out
        covered[idx_cols] = True
    return ScoreVector(values, predictor.criterion, covered=covered)


# ---------------------------------------------------------------------------
# fidelity


@dataclass
class FidelityReport:
    spearman_global: float
    spearman_per_layer: dict[int, float]
    mse: float
    degenerate_count: int
    per_example_global: list[float]
    n_examples: int

    @property
    def spearman_local(self) -> float:
        """Mean of the per-layer correlations."""
        vals = list(self.spearman_per_layer.values())
        return float(np.mean(vals)) if vals else float("nan")


def _safe_spearman(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    from .analytics import spearman
    from .errors import DegenerateError
    if a.size < 2:
        return 0.0, True
    try:
        return spearman(a, b), False
    except DegenerateError:
        return 0.0, True


def predictor_fidelity(predictor, dataset: CriteriaDataset,
                       split: str = "heldout") -> FidelityReport:
    """Rank agreement between predictions and stored targets.

    ``predictor`` is a trained Predictor or any callable
    ``(feature, example_index) -> ScoreVector | flat array``. Spearman is
    computed per example and averaged; degenerate (constant) comparisons
    contribute 0 and are tallied separately.
    """
    idx = {"heldout": dataset.heldout_idx, "train": dataset.train_idx,
           "all": np.arange(len(dataset))}[split]
    if len(idx) == 0:
        raise EmptyHeldoutError(f"dataset has no '{split}' examples")
    mcfg = dataset.model_config
    covered = dataset.covered
    layer_rhos: dict[int, list[float]] = {
        l: [] for l in range(mcfg.num_layers)
        if any(covered[s].any() for s in _layer_slices(mcfg, l))}
    globals_, sq_errs = [], []
    degenerate = 0
    for i in idx:
        if isinstance(predictor, Predictor):
            sv = predict_scores(predictor, dataset.features[i])
            pred_vals = sv.values.astype(np.float64)
        else:
            out = predictor(dataset.features[i], int(i))
            pred_vals = (out.values if isinstance(out, ScoreVector)
                         else np.asarray(out)).astype(np.float64)
        target = dataset.targets[i]
        p, t = pred_vals[covered], target[covered]
        rho, bad = _safe_spearman(p, t)
        globals_.append(rho)
        degenerate += bad
        sq_errs.append(float(np.mean((p - t) ** 2)))
        for l in layer_rhos:
            sel = np.zeros_like(covered)
            for s in _layer_slices(mcfg, l):
                sel[s] = True
            sel &= covered
            rho_l, bad_l = _safe_spearman(pred_vals[sel], target[sel])
            layer_rhos[l].append(rho_l)
            degenerate += bad_l
    return FidelityReport(
        spearman_global=float(np.mean(globals_)),
        spearman_per_layer={l: float(np.mean(v)) for l, v in layer_rhos.items()},
        mse=float(np.mean(sq_errs)),
        degenerate_count=degenerate,
        per_example_global=globals_,
        n_examples=len(idx))


# ---------------------------------------------------------------------------
# masks at inference


def contextual_mask_source(predictor: Predictor):
    """Adapter for sweeps: (model, window_tokens, spec) -> MaskSet built
    from predicted scores for that window."""

    def source(model: TransformerModel, window_tokens, spec: PruneSpec) -> MaskSet:
        feat = extract_features(model, np.asarray(window_tokens),
                                predictor.topology,
                                predictor.config.dejavu_stride)
        sv = predict_scores(predictor, feat)
        return build_mask(model.cfg, sv, spec)

    return source


# ---------------------------------------------------------------------------
# persistence


def save_predictor(predictor: Predictor, path) -> None:
    config = {"kind": "predictor",
              "criterion": predictor.criterion,
              "predictor_config": predictor.config.to_dict(),
              "model_config": predictor.model_config.to_dict()}
    tensors = dict(predictor.params)
    tensors["covered"] = predictor.covered.astype(np.float32)
    write_container(path, config, tensors)


def load_predictor(path) -> Predictor:
    config, tensors = read_container(path)
    if config.get("kind") != "predictor":
        raise ConfigMismatchError(
            f"{path}: container holds {config.get('kind')!r}, not a predictor")
    cfg = PredictorConfig.from_dict(config["predictor_config"])
    mcfg = ModelConfig.from_dict(config["model_config"])
    covered_arr = tensors.pop("covered", None)
    if covered_arr is None or covered_arr.size != num_units(mcfg):
        raise ConfigMismatchError(f"{path}: missing or mis-sized covered mask")
    return Predictor(config=cfg, model_config=mcfg,
                     criterion=config["criterion"],
                     params={n: a.astype(np.float32) for n, a in tensors.items()},
                     covered=covered_arr.astype(bool))
