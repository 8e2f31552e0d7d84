"""Experiment orchestration: config, staged pipeline, result bundle and reports."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io as _io
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch

from . import analysis
from .attacks import (
    Trigger,
    Victim,
    apply_class_triggers,
    greedy_word_substitution,
    token_noise_attack,
    uat_per_class,
)
from .data import SampleFrame, SyntheticTask, SyntheticTaskSpec, lm_corpus, synth_dataset
from .defense import DefenseConfig, ProjectionSet, build_manifolds, defend_dataset
from .io import KIND_FRAMES, KIND_LM, ArtifactError, load_artifact, read_header, save_artifact
from .model import MicroLM, ModelConfig, PrefixParameters, parameter_checksum
from .training import (
    AdvConfig,
    TrainConfig,
    accuracy,
    augment_with_attack,
    pretrain_lm,
    train_adversarial_prefix,
    train_augmented_prefix,
    train_standard_prefix,
)

log = logging.getLogger(__name__)

METHODS = ("std", "adv", "aug", "kl")
ATTACKS = ("uat", "pwws", "bug", "viper")
FORMATS = ("csv", "json", "text")
STAGES = ("synth-data", "train", "build-manifold", "attack", "eval", "defend", "analyze", "all")


class ExperimentConfigError(ValueError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------- config


@dataclass
class PretrainConfig:
    corpus_size: int = 20000
    epochs: int = 3
    lr: float = 3e-3
    batch_size: int = 64
    label_rate: float = 0.3
    framed: bool = False


@dataclass
class AttackConfig:
    kinds: list[str] = field(default_factory=lambda: list(ATTACKS))
    trigger_len: int = 3
    beam: int = 5
    uat_epochs: int = 5
    noise_budget: float = 0.25
    label_preserving: bool = True  # trigger candidates exclude class-signal tokens


@dataclass
class SweepConfig:
    layer_counts: list[int] = field(default_factory=lambda: [1, 2, 3])
    steps: list[int] = field(default_factory=lambda: [5, 10])
    lrs: list[float] = field(default_factory=lambda: [3e-3, 1e-2, 3e-2])
    max_clean_drop: float = 0.02
    n_dev: int = 200
    compare_top: bool = True


@dataclass
class AnalysisConfig:
    enabled: bool = True
    n_samples: int = 200
    resamples: int = 10000


@dataclass
class MixedConfig:
    enabled: bool = True
    normalization: str = "static"
    steps: int = 10
    lr: float = 1e-2


@dataclass
class NormVariant:
    normalization: str
    batch_size: int


def _default_variants() -> list[NormVariant]:
    return [NormVariant("dynamic", 2), NormVariant("dynamic", 4), NormVariant("static", 1), NormVariant("none", 1)]


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    n_eval: int = 400
    methods: list[str] = field(default_factory=lambda: ["std", "adv", "aug"])
    task: SyntheticTaskSpec = field(default_factory=lambda: SyntheticTaskSpec(cue_per_class=2, cue_rate=0.3))
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, lr=3e-3, batch_size=32))
    adv: AdvConfig = field(default_factory=lambda: AdvConfig(epsilon=0.5, alpha=0.125, iters=10))
    defense: DefenseConfig = field(default_factory=lambda: DefenseConfig(normalization="dynamic", batch_size=4))
    sweep: SweepConfig = field(default_factory=SweepConfig)
    attacks: AttackConfig = field(default_factory=AttackConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    mixed: MixedConfig = field(default_factory=MixedConfig)
    normalization_variants: list[NormVariant] = field(default_factory=_default_variants)
    defense_enabled: bool = True
    manifold_energy: float = 0.95
    manifold_rank: int | None = None
    lm_path: str | None = None  # load a pretrained LM instead of pretraining
    external_datasets: dict[str, str] = field(default_factory=dict)  # column name -> frames file

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "")

    def validate(self) -> None:
        """Every check that can fail before compute starts."""
        try:
            self.task.validate()
            self.model.validate()
            self.train.validate()
            self.adv.validate()
        except ValueError as e:
            raise ExperimentConfigError("config", str(e)) from e
        if self.model.vocab_size != self.task.vocab_size:
            raise ExperimentConfigError(
                "config", f"model.vocab_size {self.model.vocab_size} != task.vocab_size {self.task.vocab_size}"
            )
        if not self.methods or any(m not in METHODS for m in self.methods):
            raise ExperimentConfigError("config", f"methods must be a non-empty subset of {METHODS}")
        if "kl" in self.methods and not self.adv.kl_beta:
            raise ExperimentConfigError("config", "method 'kl' needs adv.kl_beta > 0")
        if any(k not in ATTACKS for k in self.attacks.kinds):
            raise ExperimentConfigError("config", f"attack kinds must be drawn from {ATTACKS}")
        if not 0.0 < self.attacks.noise_budget <= 1.0:
            raise ExperimentConfigError("config", "attacks.noise_budget must be in (0, 1]")
        if self.n_eval < 1 or self.sweep.n_dev < 1:
            raise ExperimentConfigError("config", "n_eval and sweep.n_dev must be >= 1")
        L = self.model.num_layers
        if any(not 1 <= n <= L for n in self.sweep.layer_counts) or not self.sweep.layer_counts:
            raise ExperimentConfigError("config", f"sweep.layer_counts must lie in 1..{L}")
        if not self.sweep.steps or not self.sweep.lrs:
            raise ExperimentConfigError("config", "sweep.steps and sweep.lrs must be non-empty")
        if not 0.0 < self.manifold_energy <= 1.0:
            raise ExperimentConfigError("config", "manifold_energy must be in (0, 1]")
        checks = [("defense", self.defense)]
        for lr in self.sweep.lrs:
            for steps in self.sweep.steps:
                checks.append(("sweep", dataclasses.replace(self.defense, lr=lr, steps=steps)))
        for v in self.normalization_variants:
            checks.append(("normalization_variants",
                           dataclasses.replace(self.defense, normalization=v.normalization, batch_mode="fixed",
                                               batch_size=v.batch_size)))
        if self.mixed.enabled:
            checks.append(("mixed", dataclasses.replace(self.defense, normalization=self.mixed.normalization,
                                                        steps=self.mixed.steps, lr=self.mixed.lr,
                                                        batch_mode="fixed", batch_size=1)))
        for where, dc in checks:
            try:
                dc.validate(L)
            except ValueError as e:
                raise ExperimentConfigError("config", f"{where}: {e}") from e
        if self.lm_path is not None:
            _require_artifact(self.lm_path, KIND_LM, "lm_path")
        for name, path in self.external_datasets.items():
            if name in ATTACKS or name == "clean":
                raise ExperimentConfigError("config", f"external dataset name {name!r} clashes with a built-in column")
            _require_artifact(path, KIND_FRAMES, f"external_datasets.{name}")


def _require_artifact(path: str, kind: int, where: str) -> None:
    p = Path(path)
    if not p.is_file():
        raise ExperimentConfigError("config", f"{where}: file {path} does not exist")
    try:
        h = read_header(p.read_bytes()[:32])
    except ArtifactError as e:
        raise ExperimentConfigError("config", f"{where}: {e}") from e
    if h.kind != kind:
        raise ExperimentConfigError("config", f"{where}: artifact kind {h.kind}, expected {kind}")


_NESTED: dict[str, type] = {
    "task": SyntheticTaskSpec,
    "model": ModelConfig,
    "pretrain": PretrainConfig,
    "train": TrainConfig,
    "adv": AdvConfig,
    "defense": DefenseConfig,
    "sweep": SweepConfig,
    "attacks": AttackConfig,
    "analysis": AnalysisConfig,
    "mixed": MixedConfig,
}


def _build(cls: type, d: Any, path: str):
    if not isinstance(d, dict):
        raise ExperimentConfigError("config", f"{path or 'config'} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ExperimentConfigError("config", f"unknown keys in {path or 'config'}: {', '.join(unknown)}")
    kw = {}
    for k, v in d.items():
        where = f"{path}.{k}" if path else k
        if cls is ExperimentConfig and k in _NESTED:
            kw[k] = _build(_NESTED[k], v, where)
        elif cls is ExperimentConfig and k == "normalization_variants":
            kw[k] = [_build(NormVariant, x, f"{where}[{i}]") for i, x in enumerate(v)]
        else:
            kw[k] = v
    try:
        return cls(**kw)
    except TypeError as e:
        raise ExperimentConfigError("config", f"{path or 'config'}: {e}") from e


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ExperimentConfigError("config", f"cannot read {path}: {e}") from e
    cfg = ExperimentConfig.from_dict(doc)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- bundle


@dataclass
class ResultBundle:
    config: dict = field(default_factory=dict)
    status: str = "empty"  # empty | partial | complete
    failed_stage: str | None = None
    error: str | None = None
    checksums: dict = field(default_factory=dict)
    timings: list[dict] = field(default_factory=list)  # phase, method, seconds
    curves: dict = field(default_factory=dict)  # method -> list of epoch rows
    columns: list[str] = field(default_factory=list)
    grid: dict = field(default_factory=dict)  # row -> column -> accuracy
    triggers: dict = field(default_factory=dict)
    selection: dict = field(default_factory=dict)
    layers: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)
    mixed: dict = field(default_factory=dict)
    normalization: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ResultBundle":
        return cls(**d)

    def deterministic_view(self) -> dict:
        """Everything except wall-clock measurements and the output location."""
        d = self.to_dict()
        d.pop("timings")
        d["config"] = {k: v for k, v in d["config"].items() if k != "output_dir"}
        d["curves"] = {m: [{k: v for k, v in r.items() if k != "wall_clock_s"} for r in rows]
                       for m, rows in d["curves"].items()}
        return d

    def checksum(self) -> str:
        raw = json.dumps(self.deterministic_view(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(raw.encode()).hexdigest()


# ---------------------------------------------------------------- pipeline


def _rows_for(method: str) -> tuple[str, str]:
    return method, f"{method}+defense"


class Pipeline:
    """Stage runner; each stage records wall-clock and re-checks the LM parameters."""

    def __init__(self, cfg: ExperimentConfig, out_dir: str | Path | None = None, save: bool = True):
        self.cfg = cfg
        self.out = Path(out_dir or cfg.output_dir)
        self.save = save
        self.bundle = ResultBundle(config=cfg.to_dict())
        self.task: SyntheticTask | None = None
        self.lm: MicroLM | None = None
        self.lm_sum: str | None = None
        self.prefixes: dict[str, PrefixParameters] = {}
        self.proj: dict[str, ProjectionSet] = {}
        self.attacked: dict[str, dict[str, list[SampleFrame]]] = {}
        self.trig: dict[str, dict[int, Trigger]] = {}
        self.selected: dict[str, DefenseConfig] = {}

    # ------------------------------------------------------------ plumbing

    def _path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    def _save(self, obj, name: str) -> None:
        if self.save:
            save_artifact(obj, self._path(name), self.cfg.seed)

    @contextmanager
    def stage(self, phase: str, method: str = "-"):
        name = phase if method == "-" else f"{phase}:{method}"
        t0 = time.perf_counter()
        try:
            yield
        except Exception as e:  # noqa: BLE001 - any failure marks the bundle partial
            raise StageFailure(name, e) from e
        finally:
            self.bundle.timings.append({"phase": phase, "method": method,
                                        "seconds": round(time.perf_counter() - t0, 4)})
            log.info("stage %s done in %.1fs", name, self.bundle.timings[-1]["seconds"])
        if self.lm is not None:
            now = parameter_checksum(self.lm)
            if self.lm_sum is not None and now != self.lm_sum:
                raise StageFailure(name, RuntimeError("LM parameters changed during the stage"))
            self.lm_sum = now
            self.bundle.checksums.setdefault("lm", {})[name] = now

    @property
    def labels(self) -> list[int]:
        return self.task.label_ids

    def eval_set(self) -> list[SampleFrame]:
        return self.task.test[: self.cfg.n_eval]

    def dev_set(self) -> list[SampleFrame]:
        return self.task.dev[: self.cfg.sweep.n_dev]

    # ------------------------------------------------------------ stages

    def synth(self) -> None:
        with self.stage("synth"):
            self.task = synth_dataset(self.cfg.task, self.cfg.seed)
            self.bundle.checksums["task"] = self.task.checksum()
            self._save(self.task, "task.rptf")

    def pretrain(self) -> None:
        with self.stage("pretrain"):
            if self.cfg.lm_path is not None:
                lm = load_artifact(self.cfg.lm_path)
                if lm.cfg.vocab_size != len(self.task.vocab):
                    raise ExperimentConfigError("pretrain", "loaded LM vocabulary does not match the task")
            else:
                torch.manual_seed(self.cfg.seed)
                lm = MicroLM(dataclasses.replace(self.cfg.model, vocab_size=len(self.task.vocab)))
                p = self.cfg.pretrain
                corpus = lm_corpus(self.task, p.corpus_size, self.cfg.seed + 1, p.label_rate, p.framed)
                pretrain_lm(lm, corpus, epochs=p.epochs, lr=p.lr, batch_size=p.batch_size, seed=self.cfg.seed)
            self.lm = lm.freeze()
            self._save(self.lm, "lm.rptf")

    def _fresh_prefix(self) -> PrefixParameters:
        gen = torch.Generator().manual_seed(self.cfg.seed)
        pool = range(self.task.vocab.num_reserved, len(self.task.vocab))
        return PrefixParameters.init_from_embeddings(self.lm, gen, pool)

    def _pwws(self, prefix) -> Callable[[SampleFrame], Any]:
        victim = Victim(self.lm, prefix, self.labels)
        return lambda f: greedy_word_substitution(f, victim, self.task.synonyms)

    def train(self, method: str) -> None:
        with self.stage("train", method):
            cfg = dataclasses.replace(self.cfg.train, seed=self.cfg.seed)
            prefix = self._fresh_prefix()
            args = (self.lm, prefix, self.task.train, self.task.dev)
            if method == "std":
                res = train_standard_prefix(*args, cfg, self.labels)
            elif method in ("adv", "kl"):
                adv = self.cfg.adv if method == "kl" else dataclasses.replace(self.cfg.adv, kl_beta=None)
                res = train_adversarial_prefix(*args, cfg, adv, self.labels)
            else:
                res = train_augmented_prefix(*args, cfg, self.labels, self._pwws, kind="pwws")
            self.prefixes[method] = res.prefix
            self.bundle.curves[method] = [asdict(s) for s in res.curve]
            self._save(res.prefix, f"prefix_{method}.rptf")

    def manifold(self, method: str) -> None:
        with self.stage("manifold", method):
            prefix = self.prefixes[method]
            data = self.task.train
            if method == "aug":
                data = augment_with_attack(data, self._pwws(prefix), "pwws")
            L = self.lm.cfg.num_layers
            self.proj[method] = build_manifolds(self.lm, prefix, data, range(L), self.labels,
                                                rank=self.cfg.manifold_rank, energy=self.cfg.manifold_energy)
            self._save(self.proj[method], f"proj_{method}.rptf")

    def uat_candidates(self) -> list[int]:
        lo = self.task.vocab.num_reserved
        signal = set(self.task.signal_class()) if self.cfg.attacks.label_preserving else set()
        return [t for t in range(lo, len(self.task.vocab)) if t not in signal]

    def attack_frames(self, method: str, kind: str, frames: Sequence[SampleFrame], seed_offset: int = 0):
        a = self.cfg.attacks
        victim = Victim(self.lm, self.prefixes[method], self.labels)
        if kind == "uat":
            return apply_class_triggers(frames, self.trig[method])
        if kind == "pwws":
            return [greedy_word_substitution(f, victim, self.task.synonyms).perturbed for f in frames]
        rng = np.random.default_rng(self.cfg.seed + seed_offset)
        return [token_noise_attack(f, victim, self.task.confusion, a.noise_budget, kind, rng).perturbed
                for f in frames]

    def attack(self, method: str, kind: str) -> None:
        with self.stage(f"attack:{kind}", method):
            a = self.cfg.attacks
            frames = self.eval_set()
            if kind == "uat":
                victim = Victim(self.lm, self.prefixes[method], self.labels)
                cands = self.uat_candidates()
                self.trig[method] = uat_per_class(victim, frames, cands, trigger_len=a.trigger_len, beam=a.beam,
                                                  epochs=a.uat_epochs, init_token=self.task.filler[0])
                self.bundle.triggers[method] = {str(k): {"tokens": self.task.vocab.decode(t.tokens),
                                                         "error_rate": round(t.score, 6)}
                                                for k, t in self.trig[method].items()}
            out = self.attack_frames(method, kind, frames)
            self.attacked.setdefault(method, {})[kind] = out
            self._save(out, f"attacked_{method}_{kind}.rptf")

    def load_external(self) -> None:
        with self.stage("external"):
            for name, path in self.cfg.external_datasets.items():
                frames = load_artifact(path)
                for m in self.cfg.methods:
                    self.attacked.setdefault(m, {})[name] = frames

    def _selection_attack(self) -> str | None:
        kinds = self.cfg.attacks.kinds
        return "uat" if "uat" in kinds else (kinds[0] if kinds else None)

    def _dev_pair(self, method: str) -> tuple[list[SampleFrame], list[SampleFrame]]:
        dev = self.dev_set()
        kind = self._selection_attack()
        if kind is None:
            return dev, dev
        return dev, self.attack_frames(method, kind, dev, seed_offset=1)

    def _sweep(self, method: str, end: str, dev, dev_att) -> tuple[DefenseConfig, list[dict]]:
        s = self.cfg.sweep
        rows = []
        for n in s.layer_counts:
            for steps in s.steps:
                for lr in s.lrs:
                    dc = dataclasses.replace(self.cfg.defense, n_layers=n, layer_end=end, steps=steps, lr=lr)
                    ev_a = defend_dataset(self.lm, dev_att, self.prefixes[method], self.proj[method], dc,
                                          self.labels)
                    ev_c = defend_dataset(self.lm, dev, self.prefixes[method], self.proj[method], dc, self.labels)
                    rows.append({"layer_end": end, "n_layers": n, "steps": steps, "lr": lr,
                                 "recovered": round(ev_a.accuracy(dev_att) - ev_a.baseline_accuracy(dev_att), 6),
                                 "clean_drop": round(ev_c.baseline_accuracy(dev) - ev_c.accuracy(dev), 6)})
        ok = [r for r in rows if r["clean_drop"] <= s.max_clean_drop + 1e-9]
        if ok:
            best = max(ok, key=lambda r: (r["recovered"], -r["clean_drop"], -r["n_layers"], -r["steps"], -r["lr"]))
        else:
            best = min(rows, key=lambda r: (r["clean_drop"], -r["recovered"], r["n_layers"], r["steps"], r["lr"]))
        dc = dataclasses.replace(self.cfg.defense, n_layers=best["n_layers"], layer_end=end, steps=best["steps"],
                                 lr=best["lr"])
        return dc, rows

    def select(self, method: str) -> None:
        with self.stage("select", method):
            dev, dev_att = self._dev_pair(method)
            dc, rows = self._sweep(method, "bottom", dev, dev_att)
            self.selected[method] = dc
            self.bundle.selection[method] = {"config": asdict(dc), "dev": rows}

    def defend(self, method: str, with_defense: bool = True) -> None:
        with self.stage("defend" if with_defense else "eval", method):
            plain, defended = _rows_for(method)
            cols = {"clean": self.eval_set(), **self.attacked.get(method, {})}
            self.bundle.grid[plain] = {}
            if not with_defense:
                for col, frames in cols.items():
                    self.bundle.grid[plain][col] = round(accuracy(self.lm, frames, self.prefixes[method],
                                                                  self.labels), 6)
                return
            self.bundle.grid[defended] = {}
            for col, frames in cols.items():
                ev = defend_dataset(self.lm, frames, self.prefixes[method], self.proj[method], self.selected[method],
                                    self.labels)
                self.bundle.grid[plain][col] = round(ev.baseline_accuracy(frames), 6)
                self.bundle.grid[defended][col] = round(ev.accuracy(frames), 6)

    def compare_layers(self, method: str) -> None:
        kind = self._selection_attack()
        if kind is None:
            return
        with self.stage("layers", method):
            dev, dev_att = self._dev_pair(method)
            frames = self.attacked[method][kind]
            out = {}
            for end in ("bottom", "top"):
                dc, rows = self._sweep(method, end, dev, dev_att) if end == "top" else (
                    self.selected[method], self.bundle.selection[method]["dev"])
                ev = defend_dataset(self.lm, frames, self.prefixes[method], self.proj[method], dc, self.labels)
                out[end] = {"config": asdict(dc), "attack": kind,
                            "undefended": round(ev.baseline_accuracy(frames), 6),
                            "defended": round(ev.accuracy(frames), 6),
                            "recovered": round(ev.accuracy(frames) - ev.baseline_accuracy(frames), 6),
                            "dev": rows if end == "top" else []}
            self.bundle.layers = out

    def analyze(self, method: str) -> None:
        if "uat" not in self.attacked.get(method, {}):
            return
        with self.stage("analysis", method):
            n = self.cfg.analysis.n_samples
            clean = self.eval_set()[:n]
            att = self.attacked[method]["uat"][:n]
            prefix = self.prefixes[method]
            ev = defend_dataset(self.lm, att, prefix, self.proj[method], self.selected[method], self.labels)
            tl = self.cfg.attacks.trigger_len
            base = analysis.corpus_metrics(self.lm, clean, att, prefix, prefix, self.labels, None, tl)
            dfd = analysis.corpus_metrics(self.lm, clean, att, prefix, prefix, self.labels, ev.robust, tl)
            r = self.cfg.analysis.resamples
            self.bundle.analysis = {
                "method": method,
                "n": len(base.dod),
                "cdod_baseline": round(base.cdod, 6),
                "cdod_defended": round(dfd.cdod, 6),
                "cdod_p": round(analysis.bootstrap_test(dfd.dod, base.dod, r, self.cfg.seed), 6),
                "croe_baseline": round(base.croe, 6),
                "croe_defended": round(dfd.croe, 6),
                "croe_p": round(analysis.bootstrap_test(dfd.roe, base.roe, r, self.cfg.seed), 6),
            }

    def mixed(self, method: str) -> None:
        if "uat" not in self.attacked.get(method, {}) or not self.cfg.mixed.enabled:
            return
        with self.stage("mixed", method):
            m = self.cfg.mixed
            clean, att = self.eval_set(), self.attacked[method]["uat"]
            stream = [clean[i] if i % 2 == 0 else att[i] for i in range(len(clean))]
            dc = dataclasses.replace(self.selected[method], normalization=m.normalization, steps=m.steps, lr=m.lr,
                                     batch_mode="fixed", batch_size=1)
            ev = defend_dataset(self.lm, stream, self.prefixes[method], self.proj[method], dc, self.labels)
            part = lambda preds, k: float(np.mean([p == f.label for p, f in zip(preds[k::2], stream[k::2])]))  # noqa: E731
            self.bundle.mixed = {
                "method": method, "config": asdict(dc), "n": len(stream),
                "undefended": round(ev.baseline_accuracy(stream), 6), "defended": round(ev.accuracy(stream), 6),
                "undefended_clean": round(part(ev.baseline, 0), 6), "defended_clean": round(part(ev.predictions, 0), 6),
                "undefended_uat": round(part(ev.baseline, 1), 6), "defended_uat": round(part(ev.predictions, 1), 6),
            }

    def normalization(self, method: str) -> None:
        if "uat" not in self.attacked.get(method, {}):
            return
        with self.stage("normalization", method):
            att = self.attacked[method]["uat"]
            rows = []
            for v in self.cfg.normalization_variants:
                dc = dataclasses.replace(self.selected[method], normalization=v.normalization, batch_mode="fixed",
                                         batch_size=v.batch_size)
                t0 = time.perf_counter()
                ev = defend_dataset(self.lm, att, self.prefixes[method], self.proj[method], dc, self.labels)
                rows.append({"normalization": v.normalization, "batch_size": v.batch_size,
                             "undefended": round(ev.baseline_accuracy(att), 6), "defended": round(ev.accuracy(att), 6)})
                self.bundle.timings.append({"phase": f"normalization:{v.normalization}:{v.batch_size}",
                                            "method": method, "seconds": round(time.perf_counter() - t0, 4)})
            self.bundle.normalization = rows

    # ------------------------------------------------------------ driver

    def run(self, until: str = "all") -> ResultBundle:
        """Run stages in order, stopping after ``until`` (one of ``STAGES``)."""
        cfg = self.cfg
        b = self.bundle
        try:
            if until not in STAGES:
                raise StageFailure("config", ExperimentConfigError("config", f"unknown stage {until!r}"))
            try:
                cfg.validate()
            except ExperimentConfigError as e:
                raise StageFailure(e.stage, e) from e
            stop = STAGES.index(until)
            reached = lambda s: STAGES.index(s) <= stop  # noqa: E731
            defend = cfg.defense_enabled
            b.columns = ["clean", *cfg.attacks.kinds, *cfg.external_datasets]
            self.synth()
            if reached("train"):
                self.pretrain()
                if cfg.external_datasets and reached("attack"):
                    self.load_external()
            for m in cfg.methods:
                if reached("train"):
                    self.train(m)
                if defend and reached("build-manifold"):
                    self.manifold(m)
                if reached("attack"):
                    for k in cfg.attacks.kinds:
                        self.attack(m, k)
                with_defense = defend and reached("defend")
                if with_defense:
                    self.select(m)
                if reached("eval"):
                    self.defend(m, with_defense)
            primary = cfg.methods[0]
            if defend and reached("analyze"):
                if cfg.sweep.compare_top:
                    self.compare_layers(primary)
                if cfg.analysis.enabled:
                    self.analyze(primary)
                self.mixed(primary)
                self.normalization(primary)
            b.status = "complete"
        except StageFailure as e:
            log.error("%s", e)
            b.status = "partial"
            b.failed_stage = e.stage
            b.error = f"{type(e.cause).__name__}: {e.cause}"
        return b


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, save: bool = True,
                   until: str = "all") -> ResultBundle:
    return Pipeline(cfg, out_dir, save).run(until)


# ---------------------------------------------------------------- reports


def _cells(bundle: ResultBundle) -> list[tuple[str, str, str, float]]:
    """(section, row, column, value) for every numeric cell."""
    out = []
    for row, cols in bundle.grid.items():
        for col in bundle.columns:
            if col in cols:
                out.append(("grid", row, col, cols[col]))
    for method, rows in bundle.curves.items():
        for r in rows:
            for k in ("train_loss", "dev_acc", "wall_clock_s"):
                out.append(("curve", f"{method}:{r['epoch']}", k, r[k]))
    for k, v in bundle.analysis.items():
        if isinstance(v, (int, float)):
            out.append(("analysis", bundle.analysis.get("method", "-"), k, v))
    for k, v in bundle.mixed.items():
        if isinstance(v, (int, float)):
            out.append(("mixed", bundle.mixed.get("method", "-"), k, v))
    for r in bundle.normalization:
        row = f"{r['normalization']}:{r['batch_size']}"
        out += [("normalization", row, k, r[k]) for k in ("undefended", "defended")]
    for end, r in bundle.layers.items():
        out += [("layers", end, k, r[k]) for k in ("undefended", "defended", "recovered")]
    for t in bundle.timings:
        out.append(("timing", t["phase"], t["method"], t["seconds"]))
    return out


CSV_HEADER = ["section", "row", "column", "value"]


def render_csv(bundle: ResultBundle) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for sec, row, col, v in _cells(bundle):
        w.writerow([sec, row, col, repr(float(v))])
    return buf.getvalue()


def render_json(bundle: ResultBundle) -> str:
    doc = bundle.to_dict()
    doc["report_checksum"] = bundle.checksum() if bundle.status != "empty" else None
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    return "\n".join([line(headers), line(["-" * w for w in widths]), *(line(r) for r in rows)])


def render_text(bundle: ResultBundle) -> str:
    parts = [f"status: {bundle.status}" + (f" (failed at {bundle.failed_stage}: {bundle.error})"
                                          if bundle.failed_stage else "")]
    fmt = lambda v: f"{100 * v:.2f}"  # noqa: E731
    parts += ["", "accuracy (%)", _table(["method", *bundle.columns],
                                          [[r, *(fmt(c[k]) if k in c else "-" for k in bundle.columns)]
                                           for r, c in bundle.grid.items()])]
    a = bundle.analysis
    parts += ["", "distraction metrics", _table(
        ["metric", "baseline", "defended", "p"],
        [[m, f"{a[f'{m}_baseline']:.4f}", f"{a[f'{m}_defended']:.4f}", f"{a[f'{m}_p']:.4g}"]
         for m in ("cdod", "croe")] if a else [])]
    mx = bundle.mixed
    parts += ["", "mixed clean+uat stream, batch size 1 (%)", _table(
        ["method", "undefended", "defended"], [[mx["method"], fmt(mx["undefended"]), fmt(mx["defended"])]] if mx else [])]
    parts += ["", "normalization under uat (%)", _table(
        ["mode", "batch", "undefended", "defended"],
        [[r["normalization"], str(r["batch_size"]), fmt(r["undefended"]), fmt(r["defended"])]
         for r in bundle.normalization])]
    parts += ["", "layer selection under uat (%)", _table(
        ["end", "layers", "undefended", "defended", "recovered"],
        [[e, str(r["config"]["n_layers"]), fmt(r["undefended"]), fmt(r["defended"]), fmt(r["recovered"])]
         for e, r in bundle.layers.items()])]
    parts += ["", "wall clock (s)", _table(["phase", "method", "seconds"],
                                            [[t["phase"], t["method"], f"{t['seconds']:.2f}"] for t in bundle.timings])]
    if bundle.status != "empty":
        parts += ["", f"report checksum: {bundle.checksum()}"]
    return "\n".join(parts) + "\n"


_RENDER = {"csv": render_csv, "json": render_json, "text": render_text}
_SUFFIX = {"csv": "csv", "json": "json", "text": "txt"}


def emit_report(bundle: ResultBundle, fmt: str, out_dir: str | Path, stem: str = "report") -> Path:
    if fmt not in _RENDER:
        raise ExperimentConfigError("report", f"unknown format {fmt!r}; choose from {', '.join(FORMATS)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{stem}.{_SUFFIX[fmt]}"
    path.write_text(_RENDER[fmt](bundle))
    return path


def load_bundle(path: str | Path) -> ResultBundle:
    doc = json.loads(Path(path).read_text())
    doc.pop("report_checksum", None)
    return ResultBundle.from_dict(doc)
