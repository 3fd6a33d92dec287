"""Desk-scale laboratory for contextual sparsity in small decoder-only LMs.

Everything runs on plain numpy: a tape-based reverse-mode autodiff core,
a byte-level toy transformer with maskable attention heads and FFN
neurons, a family of unit saliency criteria, mask construction and
brute-force ablation, learned sparsity predictors, and the analytics
used to compare all of the above.
"""

__version__ = "0.1.0"
