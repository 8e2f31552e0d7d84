"""Token-level attacks: greedy word substitution, token noise, universal triggers."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from . import autodiff as ad
from .data import LengthError, SampleFrame
from .model import MicroLM, PrefixParameters, batch_frames, label_logits, predict_label, total_prefix
from .training import context_mask

log = logging.getLogger(__name__)


class AttackConfigError(ValueError):
    pass


@dataclass
class AttackResult:
    original: SampleFrame
    perturbed: SampleFrame
    kind: str
    success: bool
    edits: list[tuple[int, int, int]] = field(default_factory=list)  # (context position, old, new)

    def to_dict(self) -> dict:
        return {
            "original": self.original.to_dict(),
            "perturbed": self.perturbed.to_dict(),
            "kind": self.kind,
            "success": self.success,
            "edits": [list(e) for e in self.edits],
        }


@dataclass
class Trigger:
    tokens: list[int]
    target_class: int  # gold label token of the attacked subset
    score: float = 0.0  # error rate on the attacked subset
    history: list[float] = field(default_factory=list)  # best error rate after each epoch


class Victim:
    """Model + prefix bundle the attacks query."""

    def __init__(self, model: MicroLM, prefix: PrefixParameters | torch.Tensor, label_ids: Sequence[int],
                 robust=None):
        self.model = model
        self.states = total_prefix(prefix, robust).detach()
        self.label_ids = list(label_ids)

    def label_probs(self, frames: Sequence[SampleFrame]) -> torch.Tensor:
        with torch.no_grad():
            tok, o = batch_frames(frames)
            logits = self.model.run(tok, self.states).logits
            return torch.softmax(label_logits(logits, o, self.label_ids), -1)

    def gold_prob(self, frames: Sequence[SampleFrame]) -> np.ndarray:
        p = self.label_probs(frames)
        gold = [self.label_ids.index(f.label) for f in frames]
        return p[torch.arange(len(frames)), gold].numpy()

    def predict(self, frames: Sequence[SampleFrame]) -> list[int]:
        return predict_label(self.model, frames, self.states, None, self.label_ids)

    def loss(self, frames: Sequence[SampleFrame], input_embeds=None, reduction: str = "mean") -> torch.Tensor:
        """Cross-entropy over the label set at ``o``."""
        tok, o = batch_frames(frames)
        logits = self.model.run(tok, self.states, input_embeds=input_embeds).logits
        y = torch.tensor([self.label_ids.index(f.label) for f in frames])
        return ad.cross_entropy(label_logits(logits, o, self.label_ids), y, reduction=reduction)

    def embedding_grad(self, frames: Sequence[SampleFrame]) -> torch.Tensor:
        """d(sum of label losses)/d(input embeddings), (B, T, d)."""
        tok, _ = batch_frames(frames)
        emb = self.model.embed(tok).detach().requires_grad_(True)
        (g,) = ad.backward(self.loss(frames, input_embeds=emb, reduction="sum"), [emb])
        return g


def _replace(frame: SampleFrame, pos: int, tok: int) -> SampleFrame:
    ctx = list(frame.context)
    ctx[pos] = tok
    return frame.with_context(ctx)


# ---------------------------------------------------------------- in-sentence attacks


def greedy_word_substitution(
    frame: SampleFrame, victim: Victim, synonyms: Mapping[int, Sequence[int]], unk_id: int = 3
) -> AttackResult:
    """PWWS-style: rank words by the gold-probability drop under [UNK], substitute greedily until the flip."""
    cur = frame
    edits: list[tuple[int, int, int]] = []
    if not synonyms or not frame.context:
        return AttackResult(frame, frame, "pwws", False, [])
    base = float(victim.gold_prob([frame])[0])
    unked = [_replace(frame, i, unk_id) for i in range(len(frame.context))]
    saliency = base - victim.gold_prob(unked)
    order = sorted(range(len(frame.context)), key=lambda i: (-saliency[i], i))
    success = False
    for i in order:
        cands = [c for c in synonyms.get(frame.context[i], []) if c != cur.context[i]]
        if not cands:
            continue
        trials = [_replace(cur, i, c) for c in cands]
        probs = victim.gold_prob(trials)
        k = int(np.argmin(probs))
        edits.append((i, cur.context[i], cands[k]))
        cur = trials[k]
        if victim.predict([cur])[0] != frame.label:
            success = True
            break
    cur = cur.with_context(cur.context, source="pwws")
    return AttackResult(frame, cur, "pwws", success, edits)


def token_noise_attack(
    frame: SampleFrame,
    victim: Victim,
    confusion: Mapping[int, Sequence[int]],
    budget: float,
    mode: str = "bug",
    rng: np.random.Generator | None = None,
) -> AttackResult:
    """Replace context tokens with their "visually perturbed" variants.

    ``bug``: positions by descending embedding-gradient norm, stop at the flip.
    ``viper``: blind, uniformly drawn positions, all replaced.
    """
    if not 0.0 < budget <= 1.0:
        raise AttackConfigError(f"budget must be in (0, 1], got {budget}")
    if mode not in ("bug", "viper"):
        raise AttackConfigError(f"mode must be 'bug' or 'viper', got {mode!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    limit = math.ceil(budget * len(frame.context))
    eligible = [i for i, t in enumerate(frame.context) if any(v != t for v in confusion.get(t, []))]

    def variant(t: int) -> int:
        opts = [v for v in confusion[t] if v != t]
        return opts[int(rng.integers(len(opts)))] if len(opts) > 1 else opts[0]

    cur = frame
    edits: list[tuple[int, int, int]] = []
    if mode == "viper":
        picks = sorted(rng.choice(eligible, size=min(limit, len(eligible)), replace=False).tolist()) if eligible else []
        for i in picks:
            new = variant(frame.context[i])
            edits.append((i, frame.context[i], new))
            cur = _replace(cur, i, new)
        success = bool(edits) and victim.predict([cur])[0] != frame.label
    else:
        success = False
        g = victim.embedding_grad([frame])[0]
        norms = ad.l2_norm(g, dim=-1).numpy()
        order = sorted(eligible, key=lambda i: (-norms[1 + i], i))
        for i in order[:limit]:
            new = variant(frame.context[i])
            edits.append((i, frame.context[i], new))
            cur = _replace(cur, i, new)
            if victim.predict([cur])[0] != frame.label:
                success = True
                break
    cur = cur.with_context(cur.context, source=mode)
    return AttackResult(frame, cur, mode, success, edits)


# ---------------------------------------------------------------- universal triggers


def apply_trigger(frame: SampleFrame, trigger: Sequence[int], max_seq_len: int | None = None,
                  prefix_len: int = 0) -> SampleFrame:
    """Prepend trigger tokens to the context; ``o`` shifts right by the trigger length."""
    if not trigger:
        return frame
    out = frame.with_context([*trigger, *frame.context], source="uat")
    if max_seq_len is not None and len(out.tokens) + prefix_len > max_seq_len:
        raise LengthError(f"triggered frame needs {len(out.tokens) + prefix_len} > max_seq_len={max_seq_len}")
    return out


def candidate_tokens(vocab_size: int, reserved: int) -> list[int]:
    return list(range(reserved, vocab_size))


def _error_rate(victim: Victim, frames: Sequence[SampleFrame], trig: Sequence[int], bs: int = 256) -> float:
    preds: list[int] = []
    trig_frames = [apply_trigger(f, trig) for f in frames]
    for s in range(0, len(trig_frames), bs):
        preds += victim.predict(trig_frames[s : s + bs])
    return sum(p != f.label for p, f in zip(preds, frames)) / max(len(frames), 1)


def _trigger_loss(victim: Victim, frames, trig) -> float:
    with torch.no_grad():
        return float(victim.loss([apply_trigger(f, trig) for f in frames]))


def uat_search(
    victim: Victim,
    attacked: Sequence[SampleFrame],
    candidates: Sequence[int],
    trigger_len: int = 3,
    beam: int = 5,
    epochs: int = 5,
    batch_size: int = 64,
    init_token: int | None = None,
) -> Trigger:
    """Gradient-guided beam search for a trigger that maximizes the attacked-set loss.

    Per position, candidates are the ``beam`` tokens with the largest first-order
    loss increase ``(e_c - e_cur) . grad`` at the current trigger; the beam keeps
    the ``beam`` best triggers by true batch loss. The trigger with the highest
    attacked-set error rate seen at any epoch end is returned.
    """
    candidates = list(candidates)
    if not attacked:
        raise AttackConfigError("attacked set is empty")
    if len(candidates) ** trigger_len < beam:
        raise AttackConfigError(f"{len(candidates)} candidate tokens cannot fill a beam of {beam}")
    model = victim.model
    emb_table = model.tok_emb.weight.detach()
    cand_t = torch.tensor(candidates)
    cand_emb = emb_table[cand_t]  # (C, d)
    k = min(beam, len(candidates))
    trig = [candidates[0] if init_token is None else init_token] * trigger_len
    gold = attacked[0].label
    best = (-1.0, -math.inf, list(trig))
    history: list[float] = []
    for epoch in range(epochs):
        beams: list[tuple[float, list[int]]] = [(0.0, list(trig))]
        for s in range(0, len(attacked), batch_size):
            batch = list(attacked[s : s + batch_size])
            cur = beams[0][1]
            tf = [apply_trigger(f, cur) for f in batch]
            g = victim.embedding_grad(tf)  # (B, T, d)
            g_trig = g[:, 1 : 1 + trigger_len].sum(0)  # (len, d)
            cur_emb = emb_table[torch.tensor(cur)]
            scores = cand_emb @ g_trig.T - (cur_emb * g_trig).sum(-1)  # (C, len)
            top = [cand_t[torch.argsort(-scores[:, p], stable=True)[:k]].tolist() for p in range(trigger_len)]
            pool = {tuple(cur): _trigger_loss(victim, batch, cur)}
            frontier = [tuple(cur)]
            for p in range(trigger_len):
                expanded = dict((t, pool[t]) for t in frontier)
                for t in frontier:
                    for c in top[p]:
                        nt = t[:p] + (c,) + t[p + 1 :]
                        if nt not in expanded:
                            expanded[nt] = pool.get(nt) if nt in pool else _trigger_loss(victim, batch, nt)
                            pool[nt] = expanded[nt]
                ranked = sorted(expanded.items(), key=lambda kv: (-kv[1], kv[0]))[:beam]
                frontier = [t for t, _ in ranked]
            beams = [(pool[t], list(t)) for t in frontier]
        trig = beams[0][1]
        for _, t in beams:
            err = _error_rate(victim, attacked, t)
            loss = _trigger_loss(victim, attacked, t)
            if (err, loss) > best[:2]:
                best = (err, loss, list(t))
        history.append(best[0])
        log.info("uat epoch %d: best error %.3f trigger %s", epoch + 1, best[0], best[2])
    return Trigger(best[2], gold, best[0], history)


def uat_per_class(victim: Victim, frames: Sequence[SampleFrame], candidates, **kw) -> dict[int, Trigger]:
    """One trigger per gold class, each searched on that class's subset."""
    out = {}
    for lab in victim.label_ids:
        subset = [f for f in frames if f.label == lab]
        if subset:
            out[lab] = uat_search(victim, subset, candidates, **kw)
    return out


def apply_class_triggers(frames: Sequence[SampleFrame], triggers: Mapping[int, Trigger]) -> list[SampleFrame]:
    return [apply_trigger(f, triggers[f.label].tokens) if f.label in triggers else f for f in frames]
