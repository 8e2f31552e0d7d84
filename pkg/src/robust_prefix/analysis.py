"""Gradient-times-attention token importance and trigger-distraction metrics.

Importance rows and columns are indexed over ``x`` (the stream without the
leading [CLS]); row ``i`` is the step whose input is ``x[i]``. A prepended
trigger therefore occupies columns 0..trigger_len-1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import autodiff as ad
from .data import SampleFrame
from .model import MicroLM, PrefixParameters, RobustPrefix, batch_frames, total_prefix

log = logging.getLogger(__name__)


class AnalysisError(ValueError):
    pass


@dataclass
class ImportanceMatrix:
    I: np.ndarray  # (n, n) lower-triangular, rows are probability vectors
    raw: np.ndarray  # head-averaged I' before min-subtraction


def _stream(frame: SampleFrame) -> torch.Tensor:
    tok, _ = batch_frames([frame])
    return tok


def _decision(logits: torch.Tensor, tokens: torch.Tensor, o: int, label_ids: Sequence[int]) -> torch.Tensor:
    """Sum of next-token probabilities before ``o`` plus the max label-set probability at ``o``."""
    logp = torch.log_softmax(logits[0, :o], dim=-1)
    nxt = tokens[0, 1 : o + 1]
    d = logp.gather(1, nxt[:, None]).exp().sum()
    lab = ad.softmax(logits[0, o, list(label_ids)])
    return d + lab.max()


def decision_function(
    frame: SampleFrame,
    model: MicroLM,
    prefix: PrefixParameters | torch.Tensor,
    label_ids: Sequence[int],
    robust: RobustPrefix | None = None,
) -> float:
    with torch.no_grad():
        tok = _stream(frame)
        logits = model.run(tok, total_prefix(prefix, robust)).logits
        return float(_decision(logits, tok, frame.o, label_ids))


def normalize_rows(raw: np.ndarray) -> np.ndarray:
    """Per row: subtract the minimum over visible entries, then scale to sum 1."""
    n = raw.shape[0]
    out = np.zeros_like(raw, dtype=np.float64)
    for i in range(n):
        row = raw[i, : i + 1].astype(np.float64)
        shifted = row - row.min()
        s = shifted.sum()
        out[i, : i + 1] = shifted / s if s > 0 else 1.0 / (i + 1)
    return out


def importance_matrix(
    frame: SampleFrame,
    model: MicroLM,
    prefix: PrefixParameters | torch.Tensor,
    label_ids: Sequence[int],
    robust: RobustPrefix | None = None,
) -> ImportanceMatrix:
    """Head-averaged ``(dd/da) * a`` over final-layer attention, x-indexed and row-normalized."""
    tok = _stream(frame)
    states = total_prefix(prefix, robust).detach().clone().requires_grad_(True)
    out = model.run(tok, states)
    attn = out.attn  # (1, H, T, P+T)
    d = _decision(out.logits, tok, frame.o, label_ids)
    (g,) = torch.autograd.grad(d, [attn])
    T = tok.shape[1]
    imp = (g * attn)[0, :, :, attn.shape[-1] - T :].mean(0).detach().double().numpy()  # (T, T)
    raw = np.tril(imp[1:, 1:])
    return ImportanceMatrix(normalize_rows(raw), raw)


def rankings(I: np.ndarray) -> np.ndarray:
    """0-based increasing-order ranks per row; the most important visible token at row i gets i."""
    n = I.shape[0]
    K = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        order = np.argsort(I[i, : i + 1], kind="stable")
        K[i, order] = np.arange(i + 1)
    return K


def degree_of_distraction(K: np.ndarray, o: int, trigger_len: int = 3) -> float | None:
    """Mean over steps ``trigger_len..o`` of the best trigger rank (1-based) over ``i+1``, in percent.

    ``o`` is the x-index of [ANS]. Returns None (and logs) when ``o <= trigger_len``.
    """
    if o <= trigger_len:
        log.info("skipping sample with o=%d <= trigger length %d", o, trigger_len)
        return None
    vals = [(K[i, :trigger_len].max() + 1) / (i + 1) for i in range(trigger_len, o + 1)]
    return float(np.mean(vals) * 100.0)


def recognition_of_essential(I_clean: np.ndarray, I_attacked: np.ndarray, o: int, trigger_len: int = 3) -> float:
    """Share of clean steps ``0..o-trigger_len`` whose top token matches the shifted attacked top token.

    ``o`` is the x-index of [ANS] in the attacked frame. Ties pick the lowest index.
    """
    n = o - trigger_len + 1
    if n < 1 or I_clean.shape[0] < n or I_attacked.shape[0] < o + 1:
        raise AnalysisError(f"matrices too small for o={o}, trigger_len={trigger_len}")
    hits = [
        int(np.argmax(I_clean[i, : i + 1])) == int(np.argmax(I_attacked[i + trigger_len, : i + trigger_len + 1])) - trigger_len
        for i in range(n)
    ]
    return float(np.mean(hits))


def bootstrap_test(a: Sequence[float], b: Sequence[float], resamples: int = 10000, seed: int = 0) -> float:
    """Two-sided bootstrap p-value for a difference in means.

    Both samples are recentred on the pooled mean (the null) and resampled
    independently; p is the share of null differences at least as extreme as
    the observed one.
    """
    if resamples < 100:
        raise AnalysisError(f"resamples must be >= 100, got {resamples}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise AnalysisError("bootstrap samples must be non-empty")
    obs = a.mean() - b.mean()
    pooled = np.concatenate([a, b]).mean()
    a0, b0 = a - a.mean() + pooled, b - b.mean() + pooled
    rng = np.random.default_rng(seed)
    ia = rng.integers(0, a.size, size=(resamples, a.size))
    ib = rng.integers(0, b.size, size=(resamples, b.size))
    diffs = a0[ia].mean(1) - b0[ib].mean(1)
    extreme = np.abs(diffs) >= abs(obs) - 1e-12
    return float((extreme.sum() + 1) / (resamples + 1))


@dataclass
class DistractionSummary:
    cdod: float
    croe: float
    dod: list[float]
    roe: list[float]


def corpus_metrics(
    model: MicroLM,
    clean: Sequence[SampleFrame],
    attacked: Sequence[SampleFrame],
    baseline_prefix: PrefixParameters | torch.Tensor,
    prefix: PrefixParameters | torch.Tensor,
    label_ids: Sequence[int],
    robust: Sequence[RobustPrefix | None] | None = None,
    trigger_len: int = 3,
) -> DistractionSummary:
    """cDoD and cRoE over attacked frames; clean importance always comes from the baseline prefix."""
    dod, roe = [], []
    for k, (c, a) in enumerate(zip(clean, attacked)):
        r = robust[k] if robust is not None else None
        Ia = importance_matrix(a, model, prefix, label_ids, r)
        o = a.o - 1
        v = degree_of_distraction(rankings(Ia.I), o, trigger_len)
        if v is None:
            continue
        Ic = importance_matrix(c, model, baseline_prefix, label_ids)
        dod.append(v)
        roe.append(recognition_of_essential(Ic.I, Ia.I, o, trigger_len))
    if not dod:
        raise AnalysisError("no attacked sample long enough for the distraction metrics")
    return DistractionSummary(float(np.mean(dod)), float(np.mean(roe)), dod, roe)


_SHADES = " .:-=+*#%@"


def heat_text(M: np.ndarray, labels: Sequence[str] | None = None) -> str:
    """Plain-text heat rendering, one character per cell scaled by row maximum."""
    lines = []
    n = M.shape[0]
    width = max((len(s) for s in labels), default=0) if labels else 0
    for i in range(n):
        row = M[i]
        top = row.max() if row.max() > 0 else 1.0
        cells = "".join(_SHADES[min(int(v / top * (len(_SHADES) - 1) + 0.5), len(_SHADES) - 1)] for v in row)
        name = f"{labels[i]:>{width}} " if labels else ""
        lines.append(f"{name}|{cells}|")
    return "\n".join(lines)


def save_grid_csv(M: np.ndarray, path: str | Path, labels: Sequence[str] | None = None) -> None:
    path = Path(path)
    with path.open("w") as fh:
        if labels:
            fh.write("," + ",".join(labels) + "\n")
        for i, row in enumerate(M):
            head = f"{labels[i]}," if labels else ""
            fh.write(head + ",".join(f"{v:.8g}" for v in row) + "\n")
