from __future__ import annotations

import struct

import numpy as np
import pytest
import torch

from robust_prefix.defense import ProjectionSet, build_manifolds
from robust_prefix.io import (
    HEADER,
    ArtifactError,
    artifact_seed,
    decode_artifact,
    encode_artifact,
    load_artifact,
    read_header,
    save_artifact,
)
from robust_prefix.model import RobustPrefix, parameter_checksum


@pytest.fixture(scope="module")
def artifacts(tiny_task, tiny_trained):
    model, prefix = tiny_trained
    robust = RobustPrefix.zeros(model.cfg, [0])
    robust.delta = torch.randn(robust.delta.shape, generator=torch.Generator().manual_seed(0))
    robust.apply_mask_()
    proj = build_manifolds(model, prefix, tiny_task.train[:100], [0, 1], tiny_task.label_ids, rank=4)
    return {"lm": model, "prefix": prefix, "robust": robust, "proj": proj, "task": tiny_task,
            "frames": tiny_task.test[:7]}


@pytest.mark.parametrize("name", ["lm", "prefix", "robust", "proj", "task", "frames"])
def test_round_trip_byte_identical(artifacts, tmp_path, name):
    obj = artifacts[name]
    path = save_artifact(obj, tmp_path / f"{name}.rptf", seed=123)
    data = path.read_bytes()
    back = load_artifact(path)
    assert encode_artifact(back, seed=123) == data
    assert artifact_seed(path) == 123


def test_loaded_lm_has_same_parameters(artifacts):
    back = decode_artifact(encode_artifact(artifacts["lm"]))
    assert parameter_checksum(back) == parameter_checksum(artifacts["lm"])


def test_loaded_projection_keeps_rank(artifacts):
    back = decode_artifact(encode_artifact(artifacts["proj"]))
    assert back.layers == [0, 1] and back.rank == [4, 4]
    assert back.n_correct == artifacts["proj"].n_correct


def test_header_layout(artifacts):
    data = encode_artifact(artifacts["prefix"], seed=7)
    magic, version, kind, *dims, seed = struct.unpack("<4sHH4IQ", data[:32])
    assert HEADER.size == 32
    assert (magic, version, kind, seed) == (b"RPTF", 1, 2, 7)
    assert dims[0] == artifacts["prefix"].cfg.prefix_len


def test_corrupt_files_rejected(artifacts):
    data = encode_artifact(artifacts["proj"])
    with pytest.raises(ArtifactError, match="truncated"):
        decode_artifact(data[:-4])
    with pytest.raises(ArtifactError, match="trailing"):
        decode_artifact(data + b"\0\0\0\0")
    with pytest.raises(ArtifactError) as e:
        decode_artifact(b"XXXX" + data[4:])
    assert e.value.field == "magic"
    bad_version = data[:4] + struct.pack("<H", 9) + data[6:]
    with pytest.raises(ArtifactError, match="version"):
        decode_artifact(bad_version)
    with pytest.raises(ArtifactError, match="header"):
        read_header(data[:10])


def test_non_contiguous_projection_layers(artifacts):
    proj = artifacts["proj"]
    odd = type(proj)([0, 2], proj.projectors, proj.means, proj.rank, proj.n_correct)
    with pytest.raises(ArtifactError):
        encode_artifact(odd)


def test_unknown_object():
    with pytest.raises(ArtifactError):
        encode_artifact(np.zeros(3))


def test_projection_payload_size():
    rng = np.random.default_rng(0)
    d = 64
    Q = [np.eye(d) for _ in range(3)]
    mu = [rng.normal(size=d) for _ in range(3)]
    data = encode_artifact(ProjectionSet([0, 1, 2], Q, mu, [d] * 3, 100))
    assert len(data) == HEADER.size + 4 * 3 * (d * d + d)
