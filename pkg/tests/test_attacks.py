from __future__ import annotations

import itertools

import numpy as np
import pytest
import torch

from robust_prefix.attacks import (
    AttackConfigError,
    Victim,
    apply_class_triggers,
    apply_trigger,
    candidate_tokens,
    greedy_word_substitution,
    token_noise_attack,
    uat_per_class,
    uat_search,
)
from robust_prefix.data import LengthError, SampleFrame
from robust_prefix.model import batch_frames

from oracles import exhaustive_trigger


@pytest.fixture(scope="module")
def victim(tiny_task, tiny_trained):
    model, prefix = tiny_trained
    return Victim(model, prefix, tiny_task.label_ids)


def _tail_intact(orig: SampleFrame, pert: SampleFrame) -> bool:
    return pert.question == orig.question and pert.label == orig.label and pert.ans_id == orig.ans_id


# ---------------------------------------------------------------- word substitution


def test_pwws_without_synonyms(tiny_task, victim):
    f = tiny_task.test[0]
    res = greedy_word_substitution(f, victim, {})
    assert res.edits == [] and not res.success and res.perturbed == f


def test_pwws_single_token_matches_exhaustive_oracle(tiny_task, victim):
    sig0, sig1 = tiny_task.signal[0][0], tiny_task.signal[1][0]
    f = SampleFrame((sig0,), tiny_task.question, tiny_task.label_ids[0])
    syn = {sig0: [tiny_task.signal[0][1], sig1]}
    flips = [c for c in syn[sig0] if victim.predict([f.with_context([c])])[0] != f.label]
    assert victim.predict([f])[0] == f.label and flips
    res = greedy_word_substitution(f, victim, syn)
    assert res.success and len(res.edits) == 1
    assert res.edits[0][2] in flips


def test_pwws_only_touches_context(tiny_task, victim):
    for f in tiny_task.test[:20]:
        res = greedy_word_substitution(f, victim, tiny_task.synonyms)
        assert _tail_intact(f, res.perturbed)
        assert len(res.perturbed.context) == len(f.context)
        if res.success:
            assert victim.predict([res.perturbed])[0] != f.label


def test_pwws_deterministic(tiny_task, victim):
    a = [greedy_word_substitution(f, victim, tiny_task.synonyms).to_dict() for f in tiny_task.test[:10]]
    b = [greedy_word_substitution(f, victim, tiny_task.synonyms).to_dict() for f in tiny_task.test[:10]]
    assert a == b


# ---------------------------------------------------------------- token noise


def test_noise_tiny_budget_at_most_one_edit(tiny_task, victim):
    for mode in ("bug", "viper"):
        res = token_noise_attack(tiny_task.test[0], victim, tiny_task.confusion, 1e-6, mode)
        assert len(res.edits) <= 1


def test_noise_budget_validation(tiny_task, victim):
    for b in (0.0, 1.5):
        with pytest.raises(AttackConfigError):
            token_noise_attack(tiny_task.test[0], victim, tiny_task.confusion, b)


def test_noise_identity_table(tiny_task, victim):
    f = tiny_task.test[0]
    ident = {t: [t] for t in range(len(tiny_task.vocab))}
    for mode in ("bug", "viper"):
        res = token_noise_attack(f, victim, ident, 1.0, mode)
        assert res.perturbed.context == f.context and res.edits == []


def test_noise_respects_budget(tiny_task, victim):
    rng = np.random.default_rng(0)
    for f in tiny_task.test[:20]:
        res = token_noise_attack(f, victim, tiny_task.confusion, 0.4, "viper", rng)
        assert len(res.edits) <= int(np.ceil(0.4 * len(f.context)))
        assert _tail_intact(f, res.perturbed)


def test_bug_edits_largest_gradient_position_first(tiny_task, victim):
    model = victim.model
    for f in tiny_task.test[:10]:
        tok, o = batch_frames([f])
        emb = model.embed(tok).detach().requires_grad_(True)
        logits = model.run(tok, victim.states, input_embeds=emb).logits[0, int(o[0])]
        lab = torch.log_softmax(logits[tiny_task.label_ids], -1)[tiny_task.label_ids.index(f.label)]
        (-lab).backward()
        norms = emb.grad[0].norm(dim=-1).numpy()
        eligible = [i for i, t in enumerate(f.context) if t in tiny_task.confusion]
        expect = max(eligible, key=lambda i: (norms[1 + i], -i))
        res = token_noise_attack(f, victim, tiny_task.confusion, 1.0, "bug")
        assert res.edits[0][0] == expect


# ---------------------------------------------------------------- triggers


def test_apply_trigger_contract(tiny_task):
    f = tiny_task.test[0]
    assert apply_trigger(f, []) == f
    g = apply_trigger(f, [10, 11, 12])
    assert g.o == f.o + 3
    assert g.context[:3] == (10, 11, 12) and g.context[3:] == f.context
    assert tiny_task.vocab.decode(g.tokens).startswith("[CLS] " + tiny_task.vocab.decode([10, 11, 12]))
    with pytest.raises(LengthError):
        apply_trigger(f, [10] * 30, max_seq_len=24, prefix_len=4)


def test_candidates_exclude_reserved():
    assert candidate_tokens(20, 8) == list(range(8, 20))


def test_uat_beam_too_large(tiny_task, victim):
    with pytest.raises(AttackConfigError):
        uat_search(victim, tiny_task.test[:4], [20], beam=5)
    with pytest.raises(AttackConfigError):
        uat_search(victim, [], [20, 21])


def test_uat_recovers_planted_token(tiny_task, victim):
    subset = [f for f in tiny_task.test if f.label == tiny_task.label_ids[0]][:40]
    planted = tiny_task.signal[1][0]
    cands = list(tiny_task.filler[:12]) + [planted]
    trig = uat_search(victim, subset, cands, beam=5, epochs=2, batch_size=40)
    assert len(trig.tokens) == 3
    assert planted in trig.tokens
    assert trig.history == sorted(trig.history)


def test_uat_full_beam_equals_exhaustive(tiny_task, victim):
    subset = [f for f in tiny_task.test if f.label == tiny_task.label_ids[1]][:16]
    cands = [tiny_task.filler[0], tiny_task.signal[0][0], tiny_task.filler[1]]
    trig = uat_search(victim, subset, cands, beam=len(cands) ** 3, epochs=1, batch_size=len(subset))

    def score(t):
        err = sum(p != f.label for p, f in zip(victim.predict([apply_trigger(f, t) for f in subset]), subset))
        with torch.no_grad():
            loss = float(victim.loss([apply_trigger(f, t) for f in subset]))
        return err / len(subset), loss

    best = exhaustive_trigger(score, cands, 3)
    assert score(tuple(trig.tokens)) == pytest.approx(score(best))
    assert len(list(itertools.product(cands, repeat=3))) == 27


def test_uat_per_class_and_apply(tiny_task, victim):
    frames = tiny_task.test[:20]
    cands = list(tiny_task.filler[:6])
    trigs = uat_per_class(victim, frames, cands, beam=2, epochs=1)
    assert set(trigs) == set(tiny_task.label_ids)
    attacked = apply_class_triggers(frames, trigs)
    for f, a in zip(frames, attacked):
        assert a.context[:3] == tuple(trigs[f.label].tokens)
        assert a.source == "uat"
    again = uat_per_class(victim, frames, cands, beam=2, epochs=1)
    assert {k: v.tokens for k, v in again.items()} == {k: v.tokens for k, v in trigs.items()}
