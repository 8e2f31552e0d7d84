"""LM pretraining and prefix-tuning (standard, PGD-adversarial, KL, augmented).

LM parameters are frozen throughout prefix-tuning; only the prefix core and
its reparameterization MLP receive updates.
"""

from __future__ import annotations

import copy
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from . import autodiff as ad
from .data import SampleFrame
from .model import MicroLM, PrefixParameters, batch_frames, label_logits, argmax_label, predict_label

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 5e-5
    batch_size: int = 32
    seed: int = 0
    milestones: list[int] = field(default_factory=list)
    weight_decay: float = 0.0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        bad = [m for m in self.milestones if not 1 <= m <= self.epochs]
        if bad:
            raise ValueError(f"milestones {bad} outside [1, {self.epochs}]")


@dataclass
class AdvConfig:
    epsilon: float = 5.0
    alpha: float = 1.25
    iters: int = 10
    level: str = "word"  # word | sentence
    kl_beta: float | None = None

    def validate(self) -> None:
        if self.level not in ("word", "sentence"):
            raise ValueError(f"level must be 'word' or 'sentence', got {self.level!r}")
        if self.epsilon < 0 or self.alpha < 0 or self.iters < 0:
            raise ValueError("epsilon, alpha and iters must be non-negative")
        if self.kl_beta is not None and self.kl_beta < 0:
            raise ValueError("kl_beta must be non-negative")
        if self.iters and self.alpha * self.iters < self.epsilon:
            warnings.warn(
                f"alpha*iters = {self.alpha * self.iters} < epsilon = {self.epsilon}; the ball is not reachable",
                stacklevel=2,
            )


KL_PRESETS = {"kl1": 1.0, "kl4": 4.0}


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    dev_acc: float
    wall_clock_s: float


@dataclass
class TrainResult:
    prefix: PrefixParameters
    curve: list[EpochStats]
    milestones: dict[int, dict] = field(default_factory=dict)
    ball_log: list[float] = field(default_factory=list)  # max ||r|| - eps per PGD iteration

    def curve_csv(self) -> str:
        rows = ["epoch,train_loss,dev_acc,wall_clock_s"]
        rows += [f"{s.epoch},{s.train_loss:.6f},{s.dev_acc:.6f},{s.wall_clock_s:.4f}" for s in self.curve]
        return "\n".join(rows) + "\n"


# ---------------------------------------------------------------- LM pretraining


def pretrain_lm(
    model: MicroLM,
    corpus: Sequence[Sequence[int]],
    epochs: int = 3,
    lr: float = 3e-3,
    batch_size: int = 64,
    seed: int = 0,
    pad_id: int = 0,
) -> list[float]:
    """Plain next-token training of the LM itself (no prefix)."""
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.01)
    model.train()
    n = len(corpus)
    total_steps = epochs * math.ceil(n / batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=total_steps, pct_start=0.1)
    losses = []
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen).tolist()
        tot, cnt = 0.0, 0
        for s in range(0, n, batch_size):
            seqs = [corpus[i] for i in perm[s : s + batch_size]]
            T = max(len(q) for q in seqs)
            tok = torch.full((len(seqs), T), pad_id, dtype=torch.long)
            for i, q in enumerate(seqs):
                tok[i, : len(q)] = torch.tensor(q)
            logits = model.run(tok).logits
            tgt = tok[:, 1:].clone()
            tgt[tgt == pad_id] = -100
            loss = F.cross_entropy(logits[:, :-1].reshape(-1, logits.shape[-1]), tgt.reshape(-1), ignore_index=-100)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            opt.step()
            sched.step()
            tot += loss.item()
            cnt += 1
        losses.append(tot / cnt)
    model.eval()
    return losses


# ---------------------------------------------------------------- helpers


def context_mask(frames: Sequence[SampleFrame], T: int) -> torch.Tensor:
    """(B, T) float mask over context tokens; padding/question/[ANS] excluded."""
    m = torch.zeros(len(frames), T)
    for i, f in enumerate(frames):
        m[i, 1 : 1 + len(f.context)] = 1.0
    return m


def label_loss(model: MicroLM, frames, states, input_embeds=None, reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy of the label token at ``o`` over the full vocabulary."""
    tok, o = batch_frames(frames)
    logits = model.run(tok, states, input_embeds=input_embeds).logits
    idx = torch.arange(len(frames))
    y = torch.tensor([f.label for f in frames])
    return ad.cross_entropy(logits[idx, o], y, reduction=reduction)


def accuracy(model: MicroLM, frames, prefix, label_ids, robust=None) -> float:
    if not frames:
        return 0.0
    preds = predict_label(model, frames, prefix, robust, label_ids)
    return sum(p == f.label for p, f in zip(preds, frames)) / len(frames)


def _check_finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()} at {where}")


# ---------------------------------------------------------------- PGD


def project_ball(r: torch.Tensor, mask: torch.Tensor, epsilon: float, level: str) -> torch.Tensor:
    """Project ``r`` (B, T, d) into per-token (word) or flattened (sentence) L2 balls."""
    r = r * mask.unsqueeze(-1)
    if level == "word":
        n = ad.l2_norm(r, dim=-1).unsqueeze(-1)
    else:
        n = ad.l2_norm(r, dim=(1, 2)).view(-1, 1, 1)
    scale = torch.where(n > epsilon, epsilon / n.clamp_min(1e-30), torch.ones_like(n))
    return r * scale


def ball_excess(r: torch.Tensor, epsilon: float, level: str) -> float:
    n = ad.l2_norm(r, dim=-1) if level == "word" else ad.l2_norm(r, dim=(1, 2))
    return float((n - epsilon).max())


def pgd_ball(
    objective: Callable[[torch.Tensor], torch.Tensor],
    shape: tuple[int, ...],
    mask: torch.Tensor,
    adv: AdvConfig,
    log_excess: list[float] | None = None,
) -> torch.Tensor:
    """Normalized-gradient ascent on ``objective(r)`` inside the L2 ball(s).

    ``r`` starts at zero. A token (word) or sample (sentence) whose gradient
    norm is zero skips that step.
    """
    r = torch.zeros(shape)
    if adv.iters == 0 or adv.epsilon == 0:
        return r
    m3 = mask.unsqueeze(-1)
    for _ in range(adv.iters):
        r = r.detach().requires_grad_(True)
        (g,) = ad.backward(objective(r), [r])
        g = g * m3
        if adv.level == "word":
            gn = ad.l2_norm(g, dim=-1).unsqueeze(-1)
        else:
            gn = ad.l2_norm(g, dim=(1, 2)).view(-1, 1, 1)
        step = torch.where(gn > 0, g / gn.clamp_min(1e-30), torch.zeros_like(g))
        r = project_ball(r.detach() + adv.alpha * step, mask, adv.epsilon, adv.level)
        if log_excess is not None:
            log_excess.append(ball_excess(r, adv.epsilon, adv.level))
    return r.detach()


def pgd_inner_max(
    model: MicroLM,
    frames: Sequence[SampleFrame],
    prefix_states: torch.Tensor,
    adv: AdvConfig,
    log_excess: list[float] | None = None,
    objective: str = "ce",
) -> torch.Tensor:
    """Perturbation of the context embeddings maximizing the label loss (or KL)."""
    tok, o = batch_frames(frames)
    emb = model.embed(tok).detach()
    mask = context_mask(frames, tok.shape[1])
    states = prefix_states.detach()
    if objective == "kl":
        with torch.no_grad():
            clean = torch.log_softmax(model.run(tok, states).logits[torch.arange(len(frames)), o], -1)

        def obj(r):
            logits = model.run(tok, states, input_embeds=emb + r).logits[torch.arange(len(frames)), o]
            return F.kl_div(torch.log_softmax(logits, -1), clean, log_target=True, reduction="sum")

    else:

        def obj(r):
            return label_loss(model, frames, states, input_embeds=emb + r, reduction="sum")

    return pgd_ball(obj, tuple(emb.shape), mask, adv, log_excess)


def kl_divergence(logp: torch.Tensor, logq: torch.Tensor) -> torch.Tensor:
    """Row-wise KL(p || q) from log-probabilities, summed over rows."""
    return (logp.exp() * (logp - logq)).sum()


def kl_adversarial_step(model: MicroLM, frames, prefix: PrefixParameters, adv: AdvConfig) -> torch.Tensor:
    """Clean label loss + beta * KL(clean || perturbed) with the KL maximized by PGD."""
    beta = adv.kl_beta or 0.0
    states = prefix.states(grad=True)
    clean_loss = label_loss(model, frames, states)
    if beta == 0.0:
        return clean_loss
    r = pgd_inner_max(model, frames, states, adv, objective="kl")
    tok, o = batch_frames(frames)
    idx = torch.arange(len(frames))
    emb = model.embed(tok)
    lp = torch.log_softmax(model.run(tok, states, input_embeds=emb).logits[idx, o], -1)
    lq = torch.log_softmax(model.run(tok, states, input_embeds=emb + r).logits[idx, o], -1)
    kl = kl_divergence(lp, lq) / len(frames)
    if not torch.isfinite(kl):
        raise TrainingError(f"non-finite KL term {kl.item()}")
    return clean_loss + beta * kl


# ---------------------------------------------------------------- training loops


def _train_loop(
    model: MicroLM,
    prefix: PrefixParameters,
    train: Sequence[SampleFrame],
    dev: Sequence[SampleFrame],
    cfg: TrainConfig,
    label_ids: Sequence[int],
    batch_loss: Callable[[Sequence[SampleFrame]], torch.Tensor],
    epoch_data: Callable[[int], Sequence[SampleFrame]] | None = None,
    on_milestone: Callable[[int, PrefixParameters], None] | None = None,
) -> TrainResult:
    cfg.validate()
    model.freeze()
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(prefix.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    result = TrainResult(prefix, [])
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        data = list(train) if epoch_data is None else list(epoch_data(epoch))
        perm = torch.randperm(len(data), generator=gen).tolist()
        tot, cnt = 0.0, 0
        prefix.train()
        for b, s in enumerate(range(0, len(data), cfg.batch_size)):
            batch = [data[i] for i in perm[s : s + cfg.batch_size]]
            loss = batch_loss(batch)
            _check_finite(loss, f"epoch {epoch} batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(batch)
            cnt += len(batch)
        prefix.refresh()
        prefix.eval()
        elapsed = time.perf_counter() - t0
        dev_acc = accuracy(model, dev, prefix, label_ids)
        result.curve.append(EpochStats(epoch, tot / max(cnt, 1), dev_acc, elapsed))
        log.info("epoch %d loss %.4f dev %.4f (%.2fs)", epoch, tot / max(cnt, 1), dev_acc, elapsed)
        if epoch in cfg.milestones:
            result.milestones[epoch] = copy.deepcopy(prefix.state_dict())
            if on_milestone is not None:
                on_milestone(epoch, prefix)
    return result


def train_standard_prefix(model, prefix, train, dev, cfg: TrainConfig, label_ids, on_milestone=None) -> TrainResult:
    def batch_loss(batch):
        return label_loss(model, batch, prefix.states(grad=True))

    return _train_loop(model, prefix, train, dev, cfg, label_ids, batch_loss, on_milestone=on_milestone)


def train_adversarial_prefix(
    model, prefix, train, dev, cfg: TrainConfig, adv: AdvConfig, label_ids, on_milestone=None
) -> TrainResult:
    """Min over the prefix of the PGD-maximized label loss (or the KL objective when ``kl_beta`` is set)."""
    adv.validate()
    ball_log: list[float] = []

    def batch_loss(batch):
        if adv.kl_beta is not None:
            return kl_adversarial_step(model, batch, prefix, adv)
        states = prefix.states(grad=True)
        r = pgd_inner_max(model, batch, states, adv, log_excess=ball_log)
        tok, _ = batch_frames(batch)
        return label_loss(model, batch, states, input_embeds=model.embed(tok) + r)

    res = _train_loop(model, prefix, train, dev, cfg, label_ids, batch_loss, on_milestone=on_milestone)
    res.ball_log = ball_log
    return res


def augment_with_attack(
    dataset: Sequence[SampleFrame],
    attack: Callable[[SampleFrame], SampleFrame],
    kind: str = "attack",
) -> list[SampleFrame]:
    """Each clean sample followed by its perturbed copy (provenance in ``source``).

    A sample on which the attack raises keeps only its clean copy.
    """
    out: list[SampleFrame] = []
    for i, f in enumerate(dataset):
        out.append(f)
        try:
            pert = attack(f)
        except Exception as exc:  # noqa: BLE001 - any attack failure drops only the copy
            log.warning("attack failed on sample %d: %s", i, exc)
            continue
        pert = getattr(pert, "perturbed", pert)
        out.append(pert.with_context(pert.context, source=kind))
    return out


def train_augmented_prefix(
    model,
    prefix,
    train,
    dev,
    cfg: TrainConfig,
    label_ids,
    make_attack: Callable[[PrefixParameters], Callable[[SampleFrame], SampleFrame]],
    kind: str = "pwws",
    refresh_every: int = 5,
    on_milestone=None,
) -> TrainResult:
    """Standard prefix-tuning on clean + attack-perturbed data.

    Perturbed copies are regenerated against the current prefix every
    ``refresh_every`` epochs.
    """
    cache: dict[str, list[SampleFrame]] = {}

    def epoch_data(epoch: int):
        if "data" not in cache or (epoch - 1) % refresh_every == 0:
            prefix.refresh()
            cache["data"] = augment_with_attack(train, make_attack(prefix), kind)
        return cache["data"]

    def batch_loss(batch):
        return label_loss(model, batch, prefix.states(grad=True))

    return _train_loop(model, prefix, train, dev, cfg, label_ids, batch_loss, epoch_data, on_milestone)
