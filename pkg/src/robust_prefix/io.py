"""Binary artifact files: 32-byte header followed by a little-endian payload.

Header layout: magic ``RPTF``, u16 version, u16 kind, four u32 dims, u64 seed.
Numeric payloads are row-major float32; dataset payloads are UTF-8 JSON.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import SampleFrame, SyntheticTask
from .defense import ProjectionSet
from .model import MicroLM, ModelConfig, PrefixParameters, RobustPrefix

MAGIC = b"RPTF"
VERSION = 1
HEADER = struct.Struct("<4sHH4IQ")
assert HEADER.size == 32

KIND_LM = 1
KIND_PREFIX = 2
KIND_ROBUST = 3
KIND_PROJECTION = 4
KIND_TASK = 5
KIND_FRAMES = 6
KINDS = {KIND_LM, KIND_PREFIX, KIND_ROBUST, KIND_PROJECTION, KIND_TASK, KIND_FRAMES}

_F32 = np.dtype("<f4")


class ArtifactError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class Header:
    kind: int
    dims: tuple[int, int, int, int]
    seed: int
    version: int = VERSION


def _pack(kind: int, dims: Sequence[int], seed: int, payload: bytes) -> bytes:
    return HEADER.pack(MAGIC, VERSION, kind, *[int(x) for x in dims], int(seed)) + payload


def _floats(tensors: Sequence[torch.Tensor | np.ndarray]) -> bytes:
    parts = [np.ascontiguousarray(np.asarray(t.detach().cpu() if isinstance(t, torch.Tensor) else t), dtype=_F32) for t in tensors]
    return b"".join(p.tobytes() for p in parts)


def _lm_tensors(model: MicroLM) -> list[tuple[str, torch.Tensor]]:
    return sorted(model.state_dict().items())


def _prefix_tensors(prefix: PrefixParameters) -> list[tuple[str, torch.Tensor]]:
    return sorted(prefix.state_dict().items())


def encode_artifact(obj, seed: int = 0) -> bytes:
    if isinstance(obj, MicroLM):
        c = obj.cfg
        extra = np.array([c.max_seq_len, c.ffn_mult, c.prefix_len], dtype=_F32)
        body = _floats([extra] + [t for _, t in _lm_tensors(obj)])
        return _pack(KIND_LM, (c.num_layers, c.hidden_dim, c.num_heads, c.vocab_size), seed, body)
    if isinstance(obj, PrefixParameters):
        c = obj.cfg
        body = _floats([t for _, t in _prefix_tensors(obj)])
        return _pack(KIND_PREFIX, (c.prefix_len, c.num_layers, c.hidden_dim, obj.d_small), seed, body)
    if isinstance(obj, RobustPrefix):
        P, L, d = obj.delta.shape
        bits = sum(1 << j for j in obj.layers)
        return _pack(KIND_ROBUST, (P, L, d, bits), seed, _floats([obj.delta]))
    if isinstance(obj, ProjectionSet):
        layers = list(obj.layers)
        if layers and layers != list(range(layers[0], layers[0] + len(layers))):
            raise ArtifactError("layers", f"projection layers must be contiguous, got {layers}")
        d = obj.projectors[0].shape[0] if layers else 0
        parts = []
        for Q, mu in zip(obj.projectors, obj.means):
            parts += [Q, mu]
        first = layers[0] if layers else 0
        return _pack(KIND_PROJECTION, (len(layers), d, first, obj.n_correct), seed, _floats(parts))
    if isinstance(obj, SyntheticTask):
        raw = json.dumps(obj.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        return _pack(KIND_TASK, (len(obj.train), len(obj.dev), len(obj.test), len(raw)), seed, raw)
    if isinstance(obj, (list, tuple)) and all(isinstance(f, SampleFrame) for f in obj):
        raw = json.dumps([f.to_dict() for f in obj], sort_keys=True, separators=(",", ":")).encode("utf-8")
        return _pack(KIND_FRAMES, (len(obj), 0, 0, len(raw)), seed, raw)
    raise ArtifactError("kind", f"cannot serialize {type(obj).__name__}")


def save_artifact(obj, path: str | Path, seed: int = 0) -> Path:
    path = Path(path)
    data = encode_artifact(obj, seed)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def read_header(data: bytes) -> Header:
    if len(data) < HEADER.size:
        raise ArtifactError("header", f"file has {len(data)} bytes, header needs {HEADER.size}")
    magic, version, kind, d0, d1, d2, d3, seed = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ArtifactError("magic", f"expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise ArtifactError("version", f"unsupported version {version}")
    if kind not in KINDS:
        raise ArtifactError("kind", f"unknown kind {kind}")
    return Header(kind, (d0, d1, d2, d3), seed, version)


class _Reader:
    def __init__(self, payload: bytes):
        self.buf = payload
        self.pos = 0

    def floats(self, shape: tuple[int, ...]) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        end = self.pos + 4 * n
        if end > len(self.buf):
            raise ArtifactError("payload", f"truncated: need {end} bytes, have {len(self.buf)}")
        out = np.frombuffer(self.buf, dtype=_F32, count=n, offset=self.pos).reshape(shape).astype(np.float32)
        self.pos = end
        return out

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise ArtifactError("payload", f"{len(self.buf) - self.pos} trailing bytes")


def _load_state(module: torch.nn.Module, r: _Reader, items) -> None:
    state = {name: torch.from_numpy(r.floats(tuple(t.shape))).to(t.dtype) for name, t in items}
    module.load_state_dict(state)


def decode_artifact(data: bytes):
    h = read_header(data)
    r = _Reader(data[HEADER.size :])
    d0, d1, d2, d3 = h.dims
    if h.kind == KIND_LM:
        extra = r.floats((3,))
        cfg = ModelConfig(num_layers=d0, hidden_dim=d1, num_heads=d2, vocab_size=d3,
                          max_seq_len=int(extra[0]), ffn_mult=int(extra[1]), prefix_len=int(extra[2]))
        try:
            model = MicroLM(cfg)
        except ValueError as e:
            raise ArtifactError("dims", str(e)) from e
        _load_state(model, r, _lm_tensors(model))
        r.finish()
        return model
    if h.kind == KIND_PREFIX:
        if min(d0, d1, d2, d3) < 1:
            raise ArtifactError("dims", f"prefix dims must be positive, got {h.dims}")
        cfg = ModelConfig(num_layers=d1, hidden_dim=d2, num_heads=1, prefix_len=d0)
        prefix = PrefixParameters(cfg, d_small=d3)
        _load_state(prefix, r, _prefix_tensors(prefix))
        r.finish()
        prefix.refresh()
        return prefix
    if h.kind == KIND_ROBUST:
        if d3 >> d1:
            raise ArtifactError("dims", f"layer mask {d3:#x} exceeds {d1} layers")
        delta = torch.from_numpy(r.floats((d0, d1, d2)))
        r.finish()
        return RobustPrefix(delta, frozenset(j for j in range(d1) if d3 >> j & 1))
    if h.kind == KIND_PROJECTION:
        n, d, first, n_correct = h.dims
        projs, means, ranks = [], [], []
        for _ in range(n):
            Q = r.floats((d, d)).astype(np.float64)
            mu = r.floats((d,)).astype(np.float64)
            projs.append(Q)
            means.append(mu)
            ranks.append(int(round(float(np.trace(Q)))))
        r.finish()
        return ProjectionSet(list(range(first, first + n)), projs, means, ranks, n_correct)
    raw = data[HEADER.size :]
    if len(raw) != d3:
        raise ArtifactError("payload", f"expected {d3} JSON bytes, have {len(raw)}")
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArtifactError("payload", f"invalid JSON: {e}") from e
    if h.kind == KIND_TASK:
        task = SyntheticTask.from_dict(doc)
        if (len(task.train), len(task.dev), len(task.test)) != (d0, d1, d2):
            raise ArtifactError("dims", f"split sizes {h.dims[:3]} disagree with payload")
        return task
    frames = [SampleFrame.from_dict(x) for x in doc]
    if len(frames) != d0:
        raise ArtifactError("dims", f"frame count {d0} disagrees with payload")
    return frames


def load_artifact(path: str | Path):
    return decode_artifact(Path(path).read_bytes())


def artifact_seed(path: str | Path) -> int:
    return read_header(Path(path).read_bytes()[: HEADER.size]).seed
