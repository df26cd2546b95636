"""seqguard: log-sequence anomaly detection at desk scale.

Template mining over raw system logs, block-level sessionization,
windowed datasets, a small causal-decoder classifier trained with
Focal Loss on a hand-rolled autodiff kernel, rank-based evaluation
metrics, and a zero-shot judge comparison harness, wired into one
reproducible CLI pipeline.
"""

__version__ = "0.1.0"
