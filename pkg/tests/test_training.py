from __future__ import annotations

import copy
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from robust_prefix.attacks import Victim, greedy_word_substitution
from robust_prefix.data import SampleFrame
from robust_prefix.model import MicroLM, PrefixParameters, batch_frames, parameter_checksum
from robust_prefix.training import (
    AdvConfig,
    TrainConfig,
    TrainingError,
    accuracy,
    augment_with_attack,
    ball_excess,
    kl_adversarial_step,
    kl_divergence,
    label_loss,
    pgd_ball,
    pgd_inner_max,
    project_ball,
    train_adversarial_prefix,
    train_standard_prefix,
)

from conftest import tiny_config


def _fresh_prefix(model, task, seed=0):
    return PrefixParameters.init_from_embeddings(model, torch.Generator().manual_seed(seed), task.filler)


def _copy_task(task, n, seed):
    """Context holds filler plus one marker token per class, so a single-token rule suffices."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        c = int(rng.integers(2))
        ctx = [int(t) for t in rng.choice(task.filler, size=3)]
        ctx.insert(int(rng.integers(4)), task.signal[c][0])
        out.append(SampleFrame(tuple(ctx), task.question, task.label_ids[c]))
    return out


def _copy_rule(task, frames):
    marker = {task.signal[c][0]: task.label_ids[c] for c in task.signal}
    return [next(marker[t] for t in f.context if t in marker) for f in frames]


def test_separable_copy_task_learned_in_five_epochs(tiny_task, tiny_trained):
    model, _ = tiny_trained
    train, dev = _copy_task(tiny_task, 400, 1), _copy_task(tiny_task, 200, 2)
    assert _copy_rule(tiny_task, dev) == [f.label for f in dev]
    res = train_standard_prefix(model, _fresh_prefix(model, tiny_task), train, dev,
                                TrainConfig(epochs=5, lr=3e-3, batch_size=16), tiny_task.label_ids)
    assert max(s.dev_acc for s in res.curve) >= 0.99


def test_zero_learning_rate_leaves_prefix_unchanged(tiny_task, tiny_trained):
    model, _ = tiny_trained
    prefix = _fresh_prefix(model, tiny_task)
    before = parameter_checksum(prefix)
    train_standard_prefix(model, prefix, tiny_task.train[:64], tiny_task.dev[:16],
                          TrainConfig(epochs=1, lr=0.0, batch_size=16), tiny_task.label_ids)
    assert parameter_checksum(prefix) == before


def test_first_epoch_loss_not_above_untrained(tiny_task, tiny_trained):
    model, _ = tiny_trained
    cfg = TrainConfig(epochs=1, lr=3e-3, batch_size=32, seed=5)
    train = tiny_task.train
    prefix = _fresh_prefix(model, tiny_task)
    untrained = copy.deepcopy(prefix)
    perm = torch.randperm(len(train), generator=torch.Generator().manual_seed(cfg.seed)).tolist()
    with torch.no_grad():
        ref = [label_loss(model, [train[i] for i in perm[s : s + 32]], untrained.states()).item()
               * len(perm[s : s + 32]) for s in range(0, len(train), 32)]
    res = train_standard_prefix(model, prefix, train, tiny_task.dev[:16], cfg, tiny_task.label_ids)
    assert res.curve[0].train_loss <= sum(ref) / len(train)


def test_lm_untouched_and_seed_deterministic(tiny_task, tiny_trained):
    model, _ = tiny_trained
    lm_before = parameter_checksum(model)
    sums = []
    for _ in range(2):
        prefix = _fresh_prefix(model, tiny_task)
        train_adversarial_prefix(model, prefix, tiny_task.train[:64], tiny_task.dev[:16],
                                 TrainConfig(epochs=1, lr=3e-3, batch_size=16, seed=2),
                                 AdvConfig(epsilon=0.5, alpha=0.25, iters=2), tiny_task.label_ids)
        sums.append(parameter_checksum(prefix))
    assert sums[0] == sums[1]
    assert parameter_checksum(model) == lm_before


def test_epsilon_zero_matches_standard(tiny_task, tiny_trained):
    model, _ = tiny_trained
    cfg = TrainConfig(epochs=2, lr=3e-3, batch_size=16, seed=1)
    a = _fresh_prefix(model, tiny_task)
    b = _fresh_prefix(model, tiny_task)
    train_standard_prefix(model, a, tiny_task.train[:96], tiny_task.dev[:16], cfg, tiny_task.label_ids)
    train_adversarial_prefix(model, b, tiny_task.train[:96], tiny_task.dev[:16], cfg,
                             AdvConfig(epsilon=0.0, alpha=1.25, iters=10), tiny_task.label_ids)
    assert parameter_checksum(a) == parameter_checksum(b)


def test_milestones_and_curve_csv(tiny_task, tiny_trained):
    model, _ = tiny_trained
    seen = []
    res = train_standard_prefix(model, _fresh_prefix(model, tiny_task), tiny_task.train[:32], tiny_task.dev[:8],
                                TrainConfig(epochs=3, lr=1e-3, batch_size=16, milestones=[1, 3]),
                                tiny_task.label_ids, on_milestone=lambda e, p: seen.append(e))
    assert sorted(res.milestones) == [1, 3] and seen == [1, 3]
    lines = res.curve_csv().strip().splitlines()
    assert lines[0] == "epoch,train_loss,dev_acc,wall_clock_s"
    assert len(lines) == 4


def test_adversarial_epoch_slower_than_standard(tiny_task, tiny_trained):
    model, _ = tiny_trained
    cfg = TrainConfig(epochs=1, lr=1e-3, batch_size=16)
    std = train_standard_prefix(model, _fresh_prefix(model, tiny_task), tiny_task.train[:128], [], cfg,
                                tiny_task.label_ids)
    adv = train_adversarial_prefix(model, _fresh_prefix(model, tiny_task), tiny_task.train[:128], [], cfg,
                                   AdvConfig(), tiny_task.label_ids)
    assert adv.curve[0].wall_clock_s > std.curve[0].wall_clock_s


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(epochs=3, milestones=[4]).validate()
    with pytest.raises(ValueError):
        AdvConfig(level="char").validate()
    with pytest.warns(UserWarning):
        AdvConfig(epsilon=5.0, alpha=0.1, iters=2).validate()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        AdvConfig().validate()


def test_non_finite_loss_aborts(tiny_task, tiny_trained):
    model, _ = tiny_trained
    prefix = _fresh_prefix(model, tiny_task)
    with torch.no_grad():
        prefix.core.fill_(float("nan"))
    with pytest.raises(TrainingError):
        train_standard_prefix(model, prefix, tiny_task.train[:16], [], TrainConfig(epochs=1, lr=1e-3),
                              tiny_task.label_ids)


# ---------------------------------------------------------------- PGD


def test_pgd_zero_iterations_gives_zero(tiny_task, tiny_trained):
    model, prefix = tiny_trained
    r = pgd_inner_max(model, tiny_task.train[:4], prefix.states(), AdvConfig(iters=0))
    assert float(r.abs().sum()) == 0.0


@pytest.mark.parametrize("level", ["word", "sentence"])
def test_pgd_quadratic_surrogate(level):
    e = torch.randn(1, 3, 5, generator=torch.Generator().manual_seed(0))
    mask = torch.ones(1, 3) if level == "sentence" else torch.tensor([[0.0, 1.0, 0.0]])
    eps = 0.01
    r = pgd_ball(lambda r: ((e + r) ** 2).sum(), tuple(e.shape), mask, AdvConfig(eps, 0.005, 4, level))
    if level == "word":
        expect = torch.zeros_like(e)
        expect[0, 1] = eps * e[0, 1] / e[0, 1].norm()
    else:
        expect = eps * e / e.norm()
    assert torch.allclose(r, expect, atol=1e-6)


def test_pgd_zero_gradient_skips_step():
    r = pgd_ball(lambda r: r.sum() * 0.0, (1, 2, 3), torch.ones(1, 2), AdvConfig(1.0, 0.5, 3))
    assert float(r.abs().sum()) == 0.0


@pytest.mark.parametrize("level", ["word", "sentence"])
def test_pgd_ascends_loss_on_trained_model(tiny_task, tiny_trained, level):
    model, prefix = tiny_trained
    states = prefix.states()
    adv = AdvConfig(epsilon=1.0, alpha=0.25, iters=5, level=level)
    frames = tiny_task.test
    ups = 0
    for s in range(100):
        batch = [frames[(s * 4 + k) % len(frames)] for k in range(4)]
        r = pgd_inner_max(model, batch, states, adv)
        tok, _ = batch_frames(batch)
        with torch.no_grad():
            clean = label_loss(model, batch, states)
            pert = label_loss(model, batch, states, input_embeds=model.embed(tok) + r)
        ups += bool(pert >= clean)
    assert ups >= 95


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["word", "sentence"]), st.floats(0.01, 5.0))
def test_project_ball_invariant(seed, level, eps):
    g = torch.Generator().manual_seed(seed)
    r = 10 * torch.randn(3, 4, 6, generator=g)
    mask = (torch.rand(3, 4, generator=g) > 0.3).float()
    p = project_ball(r, mask, eps, level)
    assert ball_excess(p, eps, level) <= 1e-5
    assert float((p * (1 - mask).unsqueeze(-1)).abs().sum()) == 0.0


# ---------------------------------------------------------------- KL


def test_kl_beta_zero_equals_standard(tiny_task, tiny_trained):
    model, prefix = tiny_trained
    batch = tiny_task.train[:8]
    a = kl_adversarial_step(model, batch, prefix, AdvConfig(kl_beta=0.0))
    b = label_loss(model, batch, prefix.states(grad=True))
    assert torch.equal(a, b)


def test_kl_identical_distributions_zero():
    lp = torch.log_softmax(torch.randn(5, 7), -1)
    assert float(kl_divergence(lp, lp)) == 0.0


def test_kl_nonnegative_on_random_pairs():
    g = torch.Generator().manual_seed(0)
    for _ in range(1000):
        k = int(torch.randint(2, 10, (1,), generator=g))
        lp = torch.log_softmax(3 * torch.randn(1, k, generator=g, dtype=torch.float64), -1)
        lq = torch.log_softmax(3 * torch.randn(1, k, generator=g, dtype=torch.float64), -1)
        assert float(kl_divergence(lp, lq)) >= -1e-12


def test_kl_step_runs(tiny_task, tiny_trained):
    model, prefix = tiny_trained
    loss = kl_adversarial_step(model, tiny_task.train[:8], prefix, AdvConfig(epsilon=1.0, alpha=0.5, iters=2,
                                                                             kl_beta=4.0))
    clean = label_loss(model, tiny_task.train[:8], prefix.states())
    assert float(loss.detach()) >= float(clean) - 1e-6


# ---------------------------------------------------------------- augmentation


def test_identity_augmentation_doubles(tiny_task):
    data = tiny_task.train[:10]
    out = augment_with_attack(data, lambda f: f, "identity")
    assert len(out) == 20
    assert [f.context for f in out[::2]] == [f.context for f in out[1::2]]
    assert {f.source for f in out[1::2]} == {"identity"}


def test_failed_attack_keeps_clean_only(tiny_task):
    data = tiny_task.train[:6]

    def flaky(f):
        if f is data[2]:
            raise RuntimeError("boom")
        return f

    out = augment_with_attack(data, flaky)
    assert len(out) == 11 <= 2 * len(data)


def test_word_substitution_augmentation_differs(tiny_task, tiny_trained):
    model, prefix = tiny_trained
    victim = Victim(model, prefix, tiny_task.label_ids)
    data = tiny_task.train[:50]
    out = augment_with_attack(data, lambda f: greedy_word_substitution(f, victim, tiny_task.synonyms), "pwws")
    pert = out[1::2]
    differ = sum(p.context != f.context for p, f in zip(pert, data))
    assert differ >= 0.8 * len(pert)


def test_accuracy_of_fixture(tiny_task, tiny_trained):
    model, prefix = tiny_trained
    assert accuracy(model, tiny_task.test, prefix, tiny_task.label_ids) >= 0.95
    assert isinstance(model, MicroLM) and tiny_config(tiny_task).num_layers == 2
