"""Shared fixtures and corpus generators for the test suite."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from seqguard.model import ModelConfig, ModelParams
from seqguard.sessions import LabeledWindow

FIXTURES = Path(__file__).parent / "fixtures"

SAMPLE_LOG = FIXTURES / "hdfs_sample.log"
SAMPLE_LABELS = FIXTURES / "anomaly_label.csv"
GOLDEN_TEMPLATES = FIXTURES / "golden_templates.csv"


@pytest.fixture
def sample_log() -> Path:
    return SAMPLE_LOG


@pytest.fixture
def sample_labels() -> Path:
    return SAMPLE_LABELS


def tiny_config(**overrides) -> ModelConfig:
    base = dict(vocab_size=12, d_model=8, n_heads=2, n_layers=1, d_ff=16, max_seq_len=8)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(seed: int = 1, **overrides) -> ModelParams:
    return ModelParams(tiny_config(**overrides), seed=seed)


def sentinel_pool(
    seed: int,
    n: int,
    anomaly_rate: float = 0.03,
    window_length: int = 8,
    vocab_size: int = 10,
    sentinel: int = 9,
) -> list[LabeledWindow]:
    """Separable event-id windows: anomalies contain the sentinel id."""
    rng = np.random.default_rng(seed)
    windows = []
    for i in range(n):
        label = int(rng.random() < anomaly_rate)
        ids = rng.integers(3, sentinel, size=window_length)
        if label:
            hits = int(rng.integers(1, 3))
            for pos in rng.choice(window_length, size=hits, replace=False):
                ids[pos] = sentinel
        windows.append(LabeledWindow(f"s{i}#0", [int(v) for v in ids], label, 0))
    return windows


# Content template builders for the synthetic raw corpus. The block token
# itself and bare dotted addresses mask to <*>; words survive.
def _line_receiving(rng, blk):
    return f"Receiving block {blk} src 10.0.0.{rng.integers(1, 250)} dest 10.0.0.{rng.integers(1, 250)}"


def _line_responder(rng, blk):
    return f"PacketResponder {rng.integers(0, 3)} for block {blk} terminating"


def _line_verify(rng, blk):
    return f"Verification succeeded for {blk}"


def _line_delete(rng, blk):
    return f"Deleting block {blk} file /data/current/{blk}"


def _line_served(rng, blk):
    return f"Served block {blk} to 10.0.0.{rng.integers(1, 250)}"


def _line_corrupt(rng, blk):
    return f"Corrupt replica detected for block {blk}"


_FILLERS = (_line_responder, _line_served, _line_verify)


def write_corpus(
    log_path: Path,
    labels_path: Path,
    n_sessions: int,
    n_anomalous: int,
    seed: int = 0,
    max_len: int = 8,
) -> dict:
    """Write a synthetic HDFS-style log plus its block label table.

    Every session is at most ``max_len`` lines so one window per session
    covers it. Anomalous sessions carry one or two corrupt-replica lines,
    never in the first two positions: at the raw-token level the sentinel
    sits beyond the first dozen tokens of the session.
    """
    rng = np.random.default_rng(seed)
    anomalous = set(rng.choice(n_sessions, size=n_anomalous, replace=False).tolist())

    sessions = []
    labels = []
    for i in range(n_sessions):
        blk = f"blk_{1000 + i}"
        body_len = int(rng.integers(5, max_len + 1))
        lines = [_line_receiving(rng, blk), _line_responder(rng, blk)]
        while len(lines) < body_len - 1:
            lines.append(_FILLERS[rng.integers(0, len(_FILLERS))](rng, blk))
        lines.append(_line_delete(rng, blk))
        if i in anomalous:
            hits = int(rng.integers(1, 3))
            for _ in range(hits):
                pos = int(rng.integers(2, len(lines)))
                lines.insert(pos, _line_corrupt(rng, blk))
            lines = lines[:max_len]
            labels.append((blk, "Anomaly"))
        else:
            labels.append((blk, "Normal"))
        sessions.append(lines)

    # Interleave a bounded set of concurrent sessions round-robin so block
    # grouping is exercised, while per-session line order is preserved.
    out_lines = []
    active: list[list[str]] = []
    next_session = 0
    while active or next_session < len(sessions):
        while len(active) < 4 and next_session < len(sessions):
            active.append(sessions[next_session])
            next_session += 1
        pick = int(rng.integers(0, len(active)))
        out_lines.append(active[pick].pop(0))
        if not active[pick]:
            active.pop(pick)

    with open(log_path, "w", encoding="utf-8") as handle:
        for k, content in enumerate(out_lines):
            handle.write(f"081109 203615 {140 + k % 9} INFO dfs.DataNode$DataXceiver: {content}\n")
    with open(labels_path, "w", encoding="utf-8") as handle:
        handle.write("BlockId,Label\n")
        for blk, tag in labels:
            handle.write(f"{blk},{tag}\n")
    return {"lines": len(out_lines), "sessions": n_sessions, "anomalous": n_anomalous}
