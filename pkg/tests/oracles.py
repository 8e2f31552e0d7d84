"""Independent reference implementations used by the tests."""

from __future__ import annotations

import itertools
from typing import Callable

import numpy as np
import torch


def central_difference(f: Callable[[torch.Tensor], float], x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``f`` at float64 ``x``."""
    x = x.detach().clone().double()
    g = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    a = a.detach().double().reshape(-1)
    b = b.detach().double().reshape(-1)
    denom = max(float(torch.linalg.norm(b)), float(torch.linalg.norm(a)), 1e-12)
    return float(torch.linalg.norm(a - b)) / denom


def eig_projector(H: np.ndarray, p: int) -> np.ndarray:
    """Projector onto the top-p eigenvectors of the centered scatter matrix."""
    Hc = H - H.mean(axis=0)
    w, V = np.linalg.eigh(Hc.T @ Hc)
    top = V[:, np.argsort(w)[::-1][:p]]
    return top @ top.T


def frequency_rule(context, signal_class: dict[int, int], num_classes: int):
    counts = [0] * num_classes
    for t in context:
        if t in signal_class:
            counts[signal_class[t]] += 1
    best = max(counts)
    if best == 0 or counts.count(best) > 1:
        return None
    return counts.index(best)


def exhaustive_trigger(loss_fn: Callable[[tuple[int, ...]], float], candidates, length: int) -> tuple[int, ...]:
    """Trigger maximizing ``loss_fn`` by brute force."""
    return max(itertools.product(candidates, repeat=length), key=lambda t: (loss_fn(t), tuple(-x for x in t)))


def softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _ln(x: np.ndarray, w: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / np.sqrt(var + eps) * w + b


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def reference_hidden(model, tokens, prefix: np.ndarray | None) -> np.ndarray:
    """Step-by-step recomputation of all hidden states, one position at a time.

    Returns an array (T, L+1, d). ``prefix`` is (P, L, d) or None.
    """
    sd = {k: v.detach().double().numpy() for k, v in model.state_dict().items()}
    cfg = model.cfg
    L, d, H = cfg.num_layers, cfg.hidden_dim, cfg.num_heads
    dh = d // H
    T = len(tokens)
    h = np.zeros((T, L + 1, d))
    for t in range(T):
        h[t, 0] = sd["tok_emb.weight"][tokens[t]] + sd["pos_emb.weight"][t]
    for j in range(L):
        p = f"blocks.{j}."
        lin = lambda name, x: sd[p + name + ".weight"] @ x + sd[p + name + ".bias"]  # noqa: E731
        mem = [] if prefix is None else [prefix[i, j] for i in range(prefix.shape[0])]
        for t in range(T):
            mem.append(h[t, j])
            normed = [_ln(m, sd[p + "ln1_w"], sd[p + "ln1_b"]) for m in mem]
            q = lin("w_q", normed[-1])
            out = np.zeros(d)
            for head in range(H):
                sl = slice(head * dh, (head + 1) * dh)
                scores = np.array([q[sl] @ lin("w_k", a)[sl] for a in normed]) / np.sqrt(dh)
                w = softmax_np(scores)
                out[sl] = sum(wi * lin("w_v", a)[sl] for wi, a in zip(w, normed))
            x = h[t, j] + lin("w_o", out)
            m = _ln(x, sd[p + "ln2_w"], sd[p + "ln2_b"])
            h[t, j + 1] = x + lin("fc2", _gelu(lin("fc1", m)))
    return h
