"""Word-level vocabulary and the synthetic classification task."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

PAD, CLS, ANS, UNK = "[PAD]", "[CLS]", "[ANS]", "[UNK]"
SPECIALS = (PAD, CLS, ANS, UNK)
CLASS_NAMES = ("positive", "negative", "neutral", "mixed")
QUESTION = ("which", "class", "is", "it", "?")


class ConfigError(ValueError):
    pass


class LengthError(ValueError):
    pass


class Vocab:
    """Whitespace tokenizer over a fixed token list.

    Ids ``0..3`` are ``[PAD] [CLS] [ANS] [UNK]``; the class label tokens follow
    immediately so ``label_ids`` is a contiguous block of reserved ids.
    """

    def __init__(self, tokens: Sequence[str], num_labels: int):
        if len(set(tokens)) != len(tokens):
            raise ConfigError("duplicate tokens in vocabulary")
        if tuple(tokens[:4]) != SPECIALS:
            raise ConfigError("vocabulary must start with [PAD] [CLS] [ANS] [UNK]")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.num_labels = num_labels

    def __len__(self) -> int:
        return len(self.tokens)

    pad_id = 0
    cls_id = 1
    ans_id = 2
    unk_id = 3

    @property
    def label_ids(self) -> list[int]:
        return list(range(4, 4 + self.num_labels))

    @property
    def num_reserved(self) -> int:
        return 4 + self.num_labels

    def encode(self, text: str | Iterable[str]) -> list[int]:
        words = text.split() if isinstance(text, str) else list(text)
        return [self.index.get(w, self.unk_id) for w in words]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[int(i)] for i in ids)

    def to_dict(self) -> dict:
        return {"tokens": self.tokens, "num_labels": self.num_labels}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(d["tokens"], d["num_labels"])


@dataclass(frozen=True)
class SampleFrame:
    """``[CLS] context question [ANS]`` with the single label token.

    ``o`` indexes the non-prefix stream, so ``tokens[o]`` is ``[ANS]``.
    """

    context: tuple[int, ...]
    question: tuple[int, ...]
    label: int
    cls_id: int = 1
    ans_id: int = 2
    source: str = "clean"

    @property
    def tokens(self) -> list[int]:
        return [self.cls_id, *self.context, *self.question, self.ans_id]

    @property
    def o(self) -> int:
        return len(self.context) + len(self.question) + 1

    @property
    def context_span(self) -> range:
        return range(1, 1 + len(self.context))

    def with_context(self, context: Sequence[int], source: str | None = None) -> "SampleFrame":
        return SampleFrame(
            tuple(int(t) for t in context),
            self.question,
            self.label,
            self.cls_id,
            self.ans_id,
            self.source if source is None else source,
        )

    def to_dict(self) -> dict:
        return {"context": list(self.context), "question": list(self.question), "label": self.label,
                "source": self.source}

    @classmethod
    def from_dict(cls, d: dict) -> "SampleFrame":
        return cls(tuple(d["context"]), tuple(d["question"]), int(d["label"]), source=d.get("source", "clean"))


def frame_sample(
    context: Sequence[int],
    question: Sequence[int],
    label: int,
    max_seq_len: int,
    prefix_len: int,
    cls_id: int = 1,
    ans_id: int = 2,
    source: str = "clean",
) -> SampleFrame:
    frame = SampleFrame(tuple(int(t) for t in context), tuple(int(t) for t in question), int(label),
                        cls_id, ans_id, source)
    total = len(frame.tokens) + prefix_len
    if total > max_seq_len:
        raise LengthError(f"frame needs {total} positions (incl. {prefix_len} prefix) > max_seq_len={max_seq_len}")
    return frame


@dataclass
class SyntheticTaskSpec:
    vocab_size: int = 256
    num_classes: int = 2
    signal_per_class: int = 12
    noise_ratio: float = 0.3
    min_len: int = 5
    max_len: int = 10
    max_signal: int = 3
    n_train: int = 2000
    n_dev: int = 300
    n_test: int = 400
    synonym_density: float = 0.5
    confusion_density: float = 0.3
    cue_per_class: int = 0  # filler tokens spuriously correlated with one class
    cue_rate: float = 0.0  # chance a sample carries a cue of its own class

    def validate(self) -> None:
        if not 2 <= self.num_classes <= 4:
            raise ConfigError(f"num_classes must be in 2..4, got {self.num_classes}")
        if min(self.n_train, self.n_dev, self.n_test, self.signal_per_class, self.max_signal) < 1:
            raise ConfigError("sample counts, signal_per_class and max_signal must be >= 1")
        if not 0.0 <= self.noise_ratio <= 1.0:
            raise ConfigError(f"noise_ratio must be in [0, 1], got {self.noise_ratio}")
        if not (0.0 <= self.synonym_density <= 1.0 and 0.0 <= self.confusion_density <= 1.0):
            raise ConfigError("table densities must be in [0, 1]")
        if self.cue_per_class < 0 or not 0.0 <= self.cue_rate <= 1.0:
            raise ConfigError("cue_per_class must be >= 0 and cue_rate in [0, 1]")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        # noise needs a strict majority: max_signal gold + (max_signal-1) others
        if self.max_signal > self.min_len:
            raise ConfigError("max_signal cannot exceed min_len")
        reserved = 4 + self.num_classes + len(QUESTION)
        if self.vocab_size - reserved - 2 * self.num_classes * self.signal_per_class < 8:
            raise ConfigError("vocab_size too small for the requested signal tokens")


@dataclass
class SyntheticTask:
    spec: SyntheticTaskSpec
    seed: int
    vocab: Vocab
    question: tuple[int, ...]
    signal: dict[int, list[int]]  # class index -> signal token ids
    filler: list[int]
    synonyms: dict[int, list[int]]
    confusion: dict[int, list[int]]
    train: list[SampleFrame]
    dev: list[SampleFrame]
    test: list[SampleFrame]
    cues: dict[int, list[int]] = field(default_factory=dict)  # class index -> spurious filler ids

    @property
    def label_ids(self) -> list[int]:
        return self.vocab.label_ids

    def signal_class(self) -> dict[int, int]:
        return {t: c for c, toks in self.signal.items() for t in toks}

    def checksum(self) -> str:
        payload = json.dumps(
            [[f.to_dict() for f in split] for split in (self.train, self.dev, self.test)], sort_keys=True
        )
        return hashlib.sha256(payload.encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "seed": self.seed,
            "vocab": self.vocab.to_dict(),
            "question": list(self.question),
            "signal": {str(k): v for k, v in self.signal.items()},
            "filler": self.filler,
            "synonyms": {str(k): v for k, v in self.synonyms.items()},
            "confusion": {str(k): v for k, v in self.confusion.items()},
            "train": [f.to_dict() for f in self.train],
            "dev": [f.to_dict() for f in self.dev],
            "test": [f.to_dict() for f in self.test],
            "cues": {str(k): v for k, v in self.cues.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTask":
        intkeys = lambda m: {int(k): list(v) for k, v in m.items()}  # noqa: E731
        return cls(
            spec=SyntheticTaskSpec(**d["spec"]),
            seed=int(d["seed"]),
            vocab=Vocab.from_dict(d["vocab"]),
            question=tuple(d["question"]),
            signal=intkeys(d["signal"]),
            filler=list(d["filler"]),
            synonyms=intkeys(d["synonyms"]),
            confusion=intkeys(d["confusion"]),
            train=[SampleFrame.from_dict(x) for x in d["train"]],
            dev=[SampleFrame.from_dict(x) for x in d["dev"]],
            cues=intkeys(d.get("cues", {})),
            test=[SampleFrame.from_dict(x) for x in d["test"]],
        )


def _build_vocab(spec: SyntheticTaskSpec):
    C, S = spec.num_classes, spec.signal_per_class
    tokens = list(SPECIALS) + list(CLASS_NAMES[:C]) + list(QUESTION)
    signal_names = {c: [f"c{c}w{k}" for k in range(S)] for c in range(C)}
    n_left = spec.vocab_size - len(tokens) - 2 * C * S
    n_filler = int(n_left / (1.0 + spec.confusion_density))
    n_filler_variants = n_left - n_filler
    filler_names = [f"f{k}" for k in range(n_filler)]
    for c in range(C):
        tokens += signal_names[c]
    tokens += filler_names
    tokens += ["~" + w for c in range(C) for w in signal_names[c]]
    tokens += ["~" + w for w in filler_names[:n_filler_variants]]
    vocab = Vocab(tokens, C)
    return vocab, signal_names, filler_names, n_filler_variants


def _sample_context(rng: np.random.Generator, spec: SyntheticTaskSpec, signal, filler, cues=None) -> tuple[list[int], int]:
    C = spec.num_classes
    gold = int(rng.integers(C))
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    n_gold = int(rng.integers(1, spec.max_signal + 1))
    picks = [int(t) for t in rng.choice(signal[gold], size=n_gold)]
    if n_gold > 1 and rng.random() < spec.noise_ratio:
        n_other = int(rng.integers(1, n_gold))
        others = [c for c in range(C) if c != gold]
        for _ in range(n_other):
            c = others[int(rng.integers(len(others)))]
            picks.append(int(rng.choice(signal[c])))
    n = max(n, len(picks))
    if cues and cues.get(gold) and n > len(picks) and rng.random() < spec.cue_rate:
        picks.append(int(rng.choice(cues[gold])))
    ctx = picks + [int(t) for t in rng.choice(filler, size=n - len(picks))]
    rng.shuffle(ctx)
    return ctx, gold


def majority_label(context: Sequence[int], signal_class: dict[int, int], num_classes: int) -> int | None:
    """Class with the strictly largest signal count, or None on a tie."""
    counts = np.zeros(num_classes, dtype=int)
    for t in context:
        if t in signal_class:
            counts[signal_class[t]] += 1
    best = counts.max()
    if best == 0 or (counts == best).sum() > 1:
        return None
    return int(counts.argmax())


def synth_dataset(spec: SyntheticTaskSpec, seed: int) -> SyntheticTask:
    """Generate train/dev/test splits plus synonym and confusion tables.

    Labels are the majority class among the context's signal tokens. Each
    signal token's synonym list holds a same-class alternate and a cross-class
    distractor; a ``synonym_density`` fraction of filler tokens get a filler
    alternate. Every signal token (and a share of fillers) has a
    "visually perturbed" variant token in the confusion table.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    vocab, signal_names, filler_names, n_filler_variants = _build_vocab(spec)
    C = spec.num_classes
    signal = {c: vocab.encode(signal_names[c]) for c in range(C)}
    filler = vocab.encode(filler_names)
    n_cue = spec.num_classes * spec.cue_per_class
    cues = {c: filler[len(filler) - n_cue + c * spec.cue_per_class :][: spec.cue_per_class] for c in range(spec.num_classes)} if n_cue else {}
    if n_cue:
        filler = filler[: len(filler) - n_cue]
    question = tuple(vocab.encode(QUESTION))

    synonyms: dict[int, list[int]] = {}
    for c in range(C):
        toks = signal[c]
        for k, t in enumerate(toks):
            same = toks[(k + 1 + int(rng.integers(len(toks) - 1))) % len(toks)] if len(toks) > 1 else t
            other_c = (c + 1 + int(rng.integers(C - 1))) % C
            cross = signal[other_c][int(rng.integers(len(signal[other_c])))]
            synonyms[t] = [same, cross] if same != t else [cross]
    n_syn = int(round(spec.synonym_density * len(filler)))
    for t in rng.choice(filler, size=n_syn, replace=False):
        alt = int(rng.choice(filler))
        while alt == t:
            alt = int(rng.choice(filler))
        synonyms[int(t)] = [alt]

    confusion: dict[int, list[int]] = {}
    for c in range(C):
        for name in signal_names[c]:
            confusion[vocab.index[name]] = [vocab.index["~" + name]]
    for name in filler_names[:n_filler_variants]:
        confusion[vocab.index[name]] = [vocab.index["~" + name]]

    label_ids = vocab.label_ids

    def make(n: int) -> list[SampleFrame]:
        out = []
        for _ in range(n):
            ctx, gold = _sample_context(rng, spec, signal, filler, cues)
            out.append(SampleFrame(tuple(ctx), question, label_ids[gold]))
        return out

    train, dev, test = make(spec.n_train), make(spec.n_dev), make(spec.n_test)
    return SyntheticTask(spec, seed, vocab, question, signal, filler, synonyms, confusion, train, dev, test, cues)


def lm_corpus(task: SyntheticTask, n: int, seed: int, label_rate: float = 0.0,
              framed: bool = False) -> list[list[int]]:
    """Pretraining sequences for the frozen LM.

    Each sequence is ``[CLS] context``; a ``label_rate`` share is followed by
    the majority class name, directly or (``framed``) after ``question [ANS]``.
    """
    if not 0.0 <= label_rate <= 1.0:
        raise ConfigError(f"label_rate must be in [0, 1], got {label_rate}")
    rng = np.random.default_rng(seed)
    out = []
    labels = task.vocab.label_ids
    tail = [*task.question, task.vocab.ans_id] if framed else []
    for _ in range(n):
        ctx, gold = _sample_context(rng, task.spec, task.signal, task.filler, task.cues)
        seq = [task.vocab.cls_id, *ctx]
        if rng.random() < label_rate:
            seq += [*tail, labels[gold]]
        out.append(seq)
    return out


def frequency_rule_accuracy(task: SyntheticTask, split: Sequence[SampleFrame]) -> float:
    """Accuracy of the bag-of-signal-tokens majority rule."""
    sc = task.signal_class()
    labels = task.vocab.label_ids
    hits = 0
    for f in split:
        c = majority_label(f.context, sc, task.spec.num_classes)
        hits += c is not None and labels[c] == f.label
    return hits / max(len(split), 1)


def ceil_budget(budget: float, n: int) -> int:
    return int(math.ceil(budget * n))
