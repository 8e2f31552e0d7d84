"""Decoder-only transformer with per-layer prefix states.

Layer-state indexing: ``h[0]`` is the embedding output, ``h[j + 1]`` the output
of block ``j`` and ``h[L]`` feeds the output head. Prefix slice ``j`` plays the
role of ``h[j]`` at the prefix positions: it is layer-normed and projected to
keys/values by block ``j`` but never recomputed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn

from . import autodiff as ad
from .data import SampleFrame


class ContractError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_layers: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    vocab_size: int = 256
    max_seq_len: int = 48
    prefix_len: int = 10
    ffn_mult: int = 4

    def validate(self) -> None:
        if self.hidden_dim % self.num_heads:
            raise ConfigurationError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.prefix_len < 1:
            raise ConfigurationError("prefix_len must be >= 1")
        if min(self.num_layers, self.vocab_size, self.max_seq_len) < 1:
            raise ConfigurationError("num_layers, vocab_size and max_seq_len must be >= 1")


class Block(nn.Module):
    def __init__(self, d: int, n_heads: int, ffn_mult: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1_w = nn.Parameter(torch.ones(d))
        self.ln1_b = nn.Parameter(torch.zeros(d))
        self.w_q = nn.Linear(d, d)
        self.w_k = nn.Linear(d, d)
        self.w_v = nn.Linear(d, d)
        self.w_o = nn.Linear(d, d)
        self.ln2_w = nn.Parameter(torch.ones(d))
        self.ln2_b = nn.Parameter(torch.zeros(d))
        self.fc1 = nn.Linear(d, ffn_mult * d)
        self.fc2 = nn.Linear(ffn_mult * d, d)

    def forward(self, h: torch.Tensor, prefix: torch.Tensor | None, allowed: torch.Tensor):
        """``h``: (B, T, d); ``prefix``: (B, P, d) or None; ``allowed``: (T, P+T) bool."""
        B, T, d = h.shape
        H = self.n_heads
        dh = d // H
        full = h if prefix is None else torch.cat([prefix, h], dim=1)
        a = ad.layer_norm(full, self.ln1_w, self.ln1_b)
        S = a.shape[1]
        q = self.w_q(a[:, S - T:]).view(B, T, H, dh).transpose(1, 2)
        k = self.w_k(a).view(B, S, H, dh).transpose(1, 2)
        v = self.w_v(a).view(B, S, H, dh).transpose(1, 2)
        scores = ad.matmul(q, k.transpose(-1, -2)) / math.sqrt(dh)
        scores = scores.masked_fill(~allowed, float("-inf"))
        attn = ad.softmax(scores)
        out = ad.matmul(attn, v).transpose(1, 2).reshape(B, T, d)
        h = h + self.w_o(out)
        m = ad.layer_norm(h, self.ln2_w, self.ln2_b)
        h = h + self.fc2(ad.gelu(self.fc1(m)))
        return h, attn


@dataclass
class LMOutput:
    logits: torch.Tensor | None  # (B, T, V)
    hidden: list[torch.Tensor]  # h[0..k], each (B, T, d)
    attn: torch.Tensor | None  # final computed block, (B, H, T, P+T)


class MicroLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.tok_emb = nn.Embedding(cfg.vocab_size, d)
        self.pos_emb = nn.Embedding(cfg.max_seq_len, d)
        self.blocks = nn.ModuleList([Block(d, cfg.num_heads, cfg.ffn_mult) for _ in range(cfg.num_layers)])
        self.lnf_w = nn.Parameter(torch.ones(d))
        self.lnf_b = nn.Parameter(torch.zeros(d))
        self.head = nn.Linear(d, cfg.vocab_size, bias=False)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for name, p in self.named_parameters():
            if name.endswith("bias") or name.endswith("_b"):
                nn.init.zeros_(p)
            elif name.endswith("_w"):
                nn.init.ones_(p)
            else:
                nn.init.normal_(p, std=0.02)
        for blk in self.blocks:
            nn.init.normal_(blk.w_o.weight, std=0.02 / math.sqrt(2 * self.cfg.num_layers))
            nn.init.normal_(blk.fc2.weight, std=0.02 / math.sqrt(2 * self.cfg.num_layers))

    def freeze(self) -> "MicroLM":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.tok_emb(tokens)

    def output_head(self, h: torch.Tensor) -> torch.Tensor:
        return self.head(ad.layer_norm(h, self.lnf_w, self.lnf_b))

    def run(
        self,
        tokens: torch.Tensor,
        prefix_states: torch.Tensor | None = None,
        input_embeds: torch.Tensor | None = None,
        upto: int | None = None,
        logits: bool = True,
    ) -> LMOutput:
        """Forward over a right-padded token batch.

        ``prefix_states`` is (P, L, d) shared by the batch or (B, P, L, d).
        ``input_embeds`` replaces the token-embedding lookup (positions are
        still added). ``upto`` stops after ``h[upto]`` and skips the head.
        """
        cfg = self.cfg
        B, T = tokens.shape
        P = 0
        if prefix_states is not None:
            if prefix_states.ndim == 3:
                prefix_states = prefix_states.unsqueeze(0).expand(B, -1, -1, -1)
            if prefix_states.ndim != 4 or prefix_states.shape[0] != B or tuple(prefix_states.shape[2:]) != (
                cfg.num_layers,
                cfg.hidden_dim,
            ):
                raise ContractError(
                    f"prefix states {tuple(prefix_states.shape)} incompatible with L={cfg.num_layers}, "
                    f"d={cfg.hidden_dim}, batch={B}"
                )
            P = prefix_states.shape[1]
        if T + P > cfg.max_seq_len:
            raise ContractError(f"sequence of {T} tokens + {P} prefix exceeds max_seq_len={cfg.max_seq_len}")
        emb = self.embed(tokens) if input_embeds is None else input_embeds
        pos = self.pos_emb(torch.arange(T, device=tokens.device))
        h = emb + pos
        hidden = [h]
        allowed = torch.ones(T, P + T, dtype=torch.bool, device=tokens.device)
        allowed[:, P:] = torch.tril(torch.ones(T, T, dtype=torch.bool, device=tokens.device))
        last = cfg.num_layers if upto is None else min(upto, cfg.num_layers)
        attn = None
        for j in range(last):
            pj = None if prefix_states is None else prefix_states[:, :, j, :]
            h, attn = self.blocks[j](h, pj, allowed)
            hidden.append(h)
        out = self.output_head(h) if (logits and last == cfg.num_layers) else None
        return LMOutput(out, hidden, attn)


class PrefixParameters(nn.Module):
    """Trainable core matrix expanded per layer by a one-hidden-layer tanh MLP."""

    def __init__(self, cfg: ModelConfig, d_small: int | None = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.d_small = d if d_small is None else d_small
        self.core = nn.Parameter(torch.zeros(cfg.prefix_len, self.d_small))
        self.fc1 = nn.Linear(self.d_small, 2 * self.d_small)
        self.fc2 = nn.Linear(2 * self.d_small, cfg.num_layers * d)
        self._cache: torch.Tensor | None = None

    @classmethod
    def init_from_embeddings(cls, lm: MicroLM, generator: torch.Generator, token_pool: Sequence[int]):
        """Core rows copied from LM word embeddings of randomly drawn tokens."""
        pre = cls(lm.cfg)
        with torch.no_grad():
            idx = torch.tensor(list(token_pool))[
                torch.randint(len(token_pool), (lm.cfg.prefix_len,), generator=generator)
            ]
            if pre.d_small == lm.cfg.hidden_dim:
                pre.core.copy_(lm.tok_emb.weight[idx])
            else:
                pre.core.normal_(std=0.02, generator=generator)
            for lin in (pre.fc1, pre.fc2):
                bound = 1.0 / math.sqrt(lin.in_features)
                lin.weight.uniform_(-bound, bound, generator=generator)
                lin.bias.uniform_(-bound, bound, generator=generator)
        pre.refresh()
        return pre

    def expand(self) -> torch.Tensor:
        cfg = self.cfg
        out = self.fc2(torch.tanh(self.fc1(self.core)))
        return out.view(cfg.prefix_len, cfg.num_layers, cfg.hidden_dim)

    def refresh(self) -> None:
        with torch.no_grad():
            self._cache = self.expand().detach().clone()

    def states(self, grad: bool = False) -> torch.Tensor:
        """Expanded prefix (P, L, d); the cached copy unless ``grad``."""
        if grad:
            return self.expand()
        if self._cache is None:
            self.refresh()
        return self._cache


@dataclass
class RobustPrefix:
    """Additive per-batch prefix; slices outside ``layers`` stay exactly zero."""

    delta: torch.Tensor  # (P, L, d)
    layers: frozenset[int] = field(default_factory=frozenset)

    @classmethod
    def zeros(cls, cfg: ModelConfig, layers) -> "RobustPrefix":
        layers = frozenset(int(j) for j in layers)
        if any(not 0 <= j < cfg.num_layers for j in layers):
            raise ContractError(f"layer mask {sorted(layers)} outside 0..{cfg.num_layers - 1}")
        return cls(torch.zeros(cfg.prefix_len, cfg.num_layers, cfg.hidden_dim), layers)

    def mask(self) -> torch.Tensor:
        m = torch.zeros(self.delta.shape[1], dtype=self.delta.dtype)
        for j in self.layers:
            m[j] = 1.0
        return m.view(1, -1, 1)

    def apply_mask_(self) -> None:
        with torch.no_grad():
            self.delta.mul_(self.mask())


@dataclass
class ActivationRecord:
    """Hidden states at the output position, (B, k+1, d) for layers 0..k."""

    at_output: torch.Tensor
    final_attn: torch.Tensor | None = None  # (B, H, T, P+T)
    o: torch.Tensor | None = None

    def layer(self, j: int) -> torch.Tensor:
        return self.at_output[:, j, :]


def batch_frames(frames: Sequence[SampleFrame], pad_id: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-padded token ids (B, T) and output positions (B,)."""
    seqs = [f.tokens for f in frames]
    T = max(len(s) for s in seqs)
    tok = torch.full((len(seqs), T), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        tok[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    o = torch.tensor([f.o for f in frames], dtype=torch.long)
    return tok, o


def total_prefix(prefix: PrefixParameters | torch.Tensor, robust: RobustPrefix | None, grad: bool = False):
    base = prefix if isinstance(prefix, torch.Tensor) else prefix.states(grad=grad)
    if robust is None:
        return base
    if tuple(robust.delta.shape) != tuple(base.shape):
        raise ContractError(f"robust prefix {tuple(robust.delta.shape)} vs prefix {tuple(base.shape)}")
    return base + robust.delta * robust.mask()


def gather_output(hidden: Sequence[torch.Tensor], o: torch.Tensor) -> torch.Tensor:
    idx = torch.arange(o.shape[0])
    return torch.stack([h[idx, o] for h in hidden], dim=1)


def lm_forward(
    model: MicroLM,
    frames: Sequence[SampleFrame],
    prefix: PrefixParameters | torch.Tensor,
    robust: RobustPrefix | None = None,
    grad: bool = False,
    input_embeds: torch.Tensor | None = None,
    upto: int | None = None,
) -> tuple[torch.Tensor | None, ActivationRecord]:
    """Logits at every step plus the activation record at each frame's ``o``."""
    tok, o = batch_frames(frames)
    states = total_prefix(prefix, robust, grad=grad)
    out = model.run(tok, states, input_embeds=input_embeds, upto=upto)
    rec = ActivationRecord(gather_output(out.hidden, o), out.attn, o)
    return out.logits, rec


def label_logits(logits: torch.Tensor, o: torch.Tensor, label_ids: Sequence[int]) -> torch.Tensor:
    if len(label_ids) == 0:
        raise ConfigurationError("label set is empty")
    idx = torch.arange(o.shape[0])
    return logits[idx, o][:, list(label_ids)]


def argmax_label(label_logits_: torch.Tensor, label_ids: Sequence[int]) -> list[int]:
    """Argmax over the label set; ties go to the lowest token id."""
    order = sorted(range(len(label_ids)), key=lambda i: label_ids[i])
    ordered = label_logits_[:, order]
    best = ad.argmax(ordered)  # first maximum
    return [int(label_ids[order[int(b)]]) for b in best]


@torch.no_grad()
def predict_label(
    model: MicroLM,
    frames: Sequence[SampleFrame],
    prefix: PrefixParameters | torch.Tensor,
    robust: RobustPrefix | None = None,
    label_ids: Sequence[int] = (),
    batch_size: int = 256,
) -> list[int]:
    if len(label_ids) == 0:
        raise ConfigurationError("label set is empty")
    preds: list[int] = []
    for s in range(0, len(frames), batch_size):
        chunk = frames[s : s + batch_size]
        logits, rec = lm_forward(model, chunk, prefix, robust)
        preds += argmax_label(label_logits(logits, rec.o, label_ids), label_ids)
    return preds


@torch.no_grad()
def capture_final_attention(
    model: MicroLM,
    frame: SampleFrame,
    prefix: PrefixParameters | torch.Tensor,
    robust: RobustPrefix | None = None,
) -> torch.Tensor:
    """Final-layer attention (H, T, T) with prefix columns dropped, rows renormalized."""
    _, rec = lm_forward(model, [frame], prefix, robust)
    attn = rec.final_attn[0]
    T = attn.shape[1]
    body = attn[:, :, attn.shape[2] - T :]
    return body / body.sum(dim=-1, keepdim=True)


def parameter_checksum(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
