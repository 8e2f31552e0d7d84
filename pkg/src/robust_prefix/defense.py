"""Canonical-manifold defense: collect, project, tune a per-batch additive prefix.

1. Stack output-position activations of correctly classified training samples.
2. Build a rank-``p`` PCA projector per layer from the column-centered stack.
3. For each test batch, tune a zero-initialized additive prefix so the batch's
   output-position activations move onto those subspaces.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import SampleFrame
from .model import (
    MicroLM,
    PrefixParameters,
    RobustPrefix,
    argmax_label,
    batch_frames,
    gather_output,
    label_logits,
    lm_forward,
    predict_label,
    total_prefix,
)

log = logging.getLogger(__name__)


class RankError(ValueError):
    pass


class DefenseConfigError(ValueError):
    pass


@dataclass
class ActivationMatrix:
    layer: int
    rows: np.ndarray  # (|S|, d), float64
    source: str = "clean"


@dataclass
class ProjectionSet:
    layers: list[int]
    projectors: list[np.ndarray]  # each (d, d)
    means: list[np.ndarray]  # each (d,)
    rank: list[int]
    n_correct: int = 0

    def index(self, layer: int) -> int:
        return self.layers.index(layer)


@dataclass
class DefenseConfig:
    n_layers: int = 3
    layer_end: str = "bottom"  # bottom | top
    normalization: str = "none"  # dynamic | static | none
    steps: int = 10
    lr: float = 1e-2
    batch_mode: str = "fixed"  # fixed | adaptive
    batch_size: int = 4
    token_budget: int = 256

    def validate(self, num_layers: int) -> None:
        if not 0 <= self.n_layers <= num_layers:
            raise DefenseConfigError(f"n_layers must be in 0..{num_layers}, got {self.n_layers}")
        if self.layer_end not in ("bottom", "top"):
            raise DefenseConfigError(f"layer_end must be bottom|top, got {self.layer_end!r}")
        if self.normalization not in ("dynamic", "static", "none"):
            raise DefenseConfigError(f"normalization must be dynamic|static|none, got {self.normalization!r}")
        if self.steps < 0 or self.lr <= 0:
            raise DefenseConfigError("steps must be >= 0 and lr > 0")
        if self.batch_mode not in ("fixed", "adaptive"):
            raise DefenseConfigError(f"batch_mode must be fixed|adaptive, got {self.batch_mode!r}")
        if self.batch_mode == "fixed" and self.batch_size < 1:
            raise DefenseConfigError("fixed batch size must be >= 1")
        if self.batch_mode == "fixed" and self.batch_size == 1 and self.normalization == "dynamic":
            raise DefenseConfigError(
                "dynamic normalization needs more than one sample per batch; use 'static' or 'none' at batch size 1"
            )

    def layers(self, num_layers: int) -> list[int]:
        """Block indices whose outputs enter the loss; also the trainable prefix slices."""
        if self.layer_end == "bottom":
            return list(range(self.n_layers))
        return list(range(num_layers - self.n_layers, num_layers))


# ---------------------------------------------------------------- steps 1 and 2


@torch.no_grad()
def collect_correct_activations(
    model: MicroLM,
    prefix: PrefixParameters,
    dataset: Sequence[SampleFrame],
    layers: Iterable[int],
    label_ids: Sequence[int],
    min_rows: int = 1,
    batch_size: int = 256,
) -> tuple[list[ActivationMatrix], int]:
    """Output-position activations of the correctly classified samples only."""
    layers = list(layers)
    rows: dict[int, list[np.ndarray]] = {j: [] for j in layers}
    n_correct = 0
    for s in range(0, len(dataset), batch_size):
        chunk = list(dataset[s : s + batch_size])
        logits, rec = lm_forward(model, chunk, prefix)
        preds = argmax_label(label_logits(logits, rec.o, label_ids), label_ids)
        ok = torch.tensor([p == f.label for p, f in zip(preds, chunk)])
        n_correct += int(ok.sum())
        for j in layers:
            rows[j].append(rec.at_output[ok, j + 1, :].double().numpy())
    if n_correct < max(min_rows, 1):
        raise RankError(
            f"only {n_correct} correctly classified samples; need at least {max(min_rows, 1)} (choose a smaller rank p)"
        )
    sources = {f.source for f in dataset}
    src = "augmented" if len(sources) > 1 else next(iter(sources), "clean")
    return [ActivationMatrix(j, np.concatenate(rows[j], axis=0), src) for j in layers], n_correct


def center_columns(H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = H.mean(axis=0)
    return H - mu, mu


def default_rank(singular_values: np.ndarray, d: int, energy: float = 0.95) -> int:
    """Smallest p capturing ``energy`` of the squared spectrum, capped at d-1."""
    sq = np.asarray(singular_values, dtype=np.float64) ** 2
    total = sq.sum()
    if total <= 0:
        return 1
    p = int(np.searchsorted(np.cumsum(sq) / total, energy - 1e-12) + 1)
    return max(1, min(p, d - 1))


def principal_directions(Hc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Right singular vectors (rows, descending) with a fixed sign convention."""
    _, s, vt = np.linalg.svd(Hc, full_matrices=True)
    idx = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(vt.shape[0]), idx])
    signs[signs == 0] = 1.0
    return vt * signs[:, None], s


def pca_projection(Hc: np.ndarray, p: int) -> np.ndarray:
    """Orthogonal projector onto the top-``p`` right singular vectors of ``Hc``."""
    n, d = Hc.shape
    if not 1 <= p <= d:
        raise RankError(f"rank p={p} outside 1..{d}")
    if p == d:
        return np.eye(d)
    if n < p:
        raise RankError(f"{n} rows cannot support rank p={p}")
    vt, _ = principal_directions(Hc)
    vp = vt[:p]
    Q = vp.T @ vp
    return 0.5 * (Q + Q.T)


def build_projection_set(mats: Sequence[ActivationMatrix], rank: int | None = None, energy: float = 0.95,
                         n_correct: int = 0) -> ProjectionSet:
    layers, projs, means, ranks = [], [], [], []
    for m in mats:
        Hc, mu = center_columns(m.rows)
        d = Hc.shape[1]
        if rank is None:
            _, s = principal_directions(Hc)
            p = default_rank(s, d, energy)
        else:
            p = rank
        if p < d and Hc.shape[0] < p:
            raise RankError(f"layer {m.layer}: {Hc.shape[0]} correct samples < rank p={p}; choose a smaller p")
        layers.append(m.layer)
        projs.append(pca_projection(Hc, p))
        means.append(mu)
        ranks.append(p)
    return ProjectionSet(layers, projs, means, ranks, n_correct)


def build_manifolds(model, prefix, dataset, layers, label_ids, rank=None, energy=0.95) -> ProjectionSet:
    mats, n = collect_correct_activations(model, prefix, dataset, layers, label_ids, min_rows=rank or 1)
    return build_projection_set(mats, rank, energy, n)


# ---------------------------------------------------------------- step 3


def _torch_proj(proj: ProjectionSet, layer: int, dtype=torch.float32):
    i = proj.index(layer)
    Q = torch.as_tensor(proj.projectors[i], dtype=dtype)
    d = Q.shape[0]
    resid = torch.zeros(d, d, dtype=dtype) if proj.rank[i] >= d else torch.eye(d, dtype=dtype) - Q
    return resid, torch.as_tensor(proj.means[i], dtype=dtype)


def manifold_loss(
    acts: Sequence[torch.Tensor],
    layers: Sequence[int],
    proj: ProjectionSet,
    normalization: str = "none",
) -> torch.Tensor:
    """Sum over layers of the Frobenius norm of the normalized batch's residual off the manifold.

    ``acts[k]`` is the (B, d) output-position activation for ``layers[k]``.
    """
    loss = torch.zeros((), dtype=acts[0].dtype if len(acts) else torch.float32)
    for H, j in zip(acts, layers):
        resid, mu = _torch_proj(proj, j, H.dtype)
        if normalization == "dynamic":
            if H.shape[0] < 2:
                raise DefenseConfigError(
                    "dynamic normalization is undefined for a single-sample batch; use 'static' or 'none'"
                )
            H = H - H.mean(dim=0, keepdim=True)
        elif normalization == "static":
            H = H - mu
        elif normalization != "none":
            raise DefenseConfigError(f"unknown normalization {normalization!r}")
        loss = loss + torch.linalg.matrix_norm(H @ resid)
    return loss


def robust_objective(
    model: MicroLM,
    tok: torch.Tensor,
    o: torch.Tensor,
    states: torch.Tensor,
    layers: Sequence[int],
    proj: ProjectionSet,
    normalization: str,
) -> torch.Tensor:
    """Manifold loss of the block outputs at ``o`` for the given total prefix states."""
    out = model.run(tok, states, upto=max(layers) + 1, logits=False)
    acts = gather_output(out.hidden, o)
    return manifold_loss([acts[:, j + 1] for j in layers], layers, proj, normalization)


@dataclass
class TuneResult:
    robust: RobustPrefix
    predictions: list[int]
    losses: list[float]
    fell_back: bool = False


def tune_robust_prefix(
    model: MicroLM,
    frames: Sequence[SampleFrame],
    prefix: PrefixParameters,
    proj: ProjectionSet,
    cfg: DefenseConfig,
    label_ids: Sequence[int],
) -> TuneResult:
    """Adam-tune a zero-initialized additive prefix on one batch, then predict with it."""
    L = model.cfg.num_layers
    layers = cfg.layers(L)
    robust = RobustPrefix.zeros(model.cfg, layers)
    base = prefix.states()
    tok, o = batch_frames(frames)
    losses: list[float] = []
    fell_back = False
    if layers and cfg.steps > 0:
        if cfg.normalization == "dynamic" and len(frames) < 2:
            raise DefenseConfigError("dynamic normalization needs a batch of at least 2; use 'static' or 'none'")
        delta = robust.delta.clone().requires_grad_(True)
        opt = torch.optim.Adam([delta], lr=cfg.lr)
        mask = robust.mask()
        for step in range(cfg.steps + 1):
            loss = robust_objective(model, tok, o, base + delta * mask, layers, proj, cfg.normalization)
            if not torch.isfinite(loss):
                log.warning("non-finite manifold loss at step %d; using a zero robust prefix", step)
                delta = torch.zeros_like(robust.delta)
                fell_back = True
                break
            value = float(loss.detach())
            losses.append(value)
            if step == cfg.steps or value == 0.0 or not loss.requires_grad:
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
        robust.delta = (delta.detach() * mask).clone()
    preds = predict_label(model, frames, prefix, robust, label_ids)
    return TuneResult(robust, preds, losses, fell_back)


def make_batches(frames: Sequence[SampleFrame], cfg: DefenseConfig) -> list[list[int]]:
    """Index batches: fixed-size chunks in order, or token-budget packing in order."""
    n = len(frames)
    if cfg.batch_mode == "fixed":
        return [list(range(s, min(s + cfg.batch_size, n))) for s in range(0, n, cfg.batch_size)]
    batches: list[list[int]] = []
    cur: list[int] = []
    longest = 0
    for i, f in enumerate(frames):
        ln = len(f.tokens)
        if cur and max(longest, ln) * (len(cur) + 1) > cfg.token_budget:
            batches.append(cur)
            cur, longest = [], 0
        cur.append(i)
        longest = max(longest, ln)
    if cur:
        batches.append(cur)
    return batches


@dataclass
class DefendedEval:
    predictions: list[int]
    baseline: list[int]
    losses: list[list[float]] = field(default_factory=list)
    robust: list[RobustPrefix] = field(default_factory=list)  # per sample, shared within a batch

    def accuracy(self, frames) -> float:
        return _acc(self.predictions, frames)

    def baseline_accuracy(self, frames) -> float:
        return _acc(self.baseline, frames)


def _acc(preds, frames) -> float:
    return sum(p == f.label for p, f in zip(preds, frames)) / max(len(frames), 1)


def defend_dataset(
    model: MicroLM,
    frames: Sequence[SampleFrame],
    prefix: PrefixParameters,
    proj: ProjectionSet,
    cfg: DefenseConfig,
    label_ids: Sequence[int],
) -> DefendedEval:
    """Run the per-batch tuning over a dataset; undefended predictions use the same batches."""
    cfg.validate(model.cfg.num_layers)
    preds = [0] * len(frames)
    base = [0] * len(frames)
    all_losses = []
    robust: list[RobustPrefix | None] = [None] * len(frames)
    for idx in make_batches(frames, cfg):
        chunk = [frames[i] for i in idx]
        res = tune_robust_prefix(model, chunk, prefix, proj, cfg, label_ids)
        b = predict_label(model, chunk, prefix, None, label_ids)
        for k, i in enumerate(idx):
            preds[i] = res.predictions[k]
            base[i] = b[k]
            robust[i] = res.robust
        all_losses.append(res.losses)
    return DefendedEval(preds, base, all_losses, robust)
