"""Experiment orchestration: corpus, training, attack/defense/baseline
stages, and CSV report emission.

A :class:`RunManifest` snapshot fully determines every output byte: all
stage seeds derive from the manifest seed, stages write atomically into the
run directory, and reruns of the same manifest produce identical tables.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .align import AlignmentTrace
from .attacks import AttackConfig, LoopResult, classify, closed_loop, cw_l2, per_class_noise
from .baselines import (
    ObfuscationBudget,
    instruction_substitute,
    mix_control_flow,
    payload_append,
    random_nop_insert,
    subroutine_reorder,
)
from .corpus import DataError, corpus_hash, default_templates, synth_corpus
from .defenses import DefenseConfig, adversarial_training, distill
from .heuristics import InsertionStats, TraceRecord, collect_stats, heuristic_insert, write_stats_csv
from .image import GrayImage, WidthPolicy, bytes_to_image
from .isa import DEFAULT_VOCAB, SemanticNop, load_vocabulary, program_from_bytes, verify_vocabulary
from .models.cnn import TinyCnnParams, TrainConfig, load_checkpoint, save_checkpoint, train_cnn
from .models.common import LabeledSample, split_corpus
from .models.stumps import (
    SurrogateParams,
    evaluate as surrogate_accuracy,
    load_surrogate,
    predict_bytes,
    save_surrogate,
    train_surrogate,
)


@dataclass
class RunManifest:
    """Everything a run depends on.  Field names double as config-file keys
    and CLI flags."""

    seed: int = 7
    out_dir: str = ""
    # corpus
    classes: int = 8
    per_class: int = 200
    width_mode: str = "size-table"
    fixed_width: int = 0
    # cnn
    input_side: int = 32
    cnn_epochs: int = 14
    cnn_lr: float = 0.01
    cnn_batch: int = 32
    cnn_momentum: float = 0.9
    conv1_channels: int = 8
    conv2_channels: int = 16
    hidden: int = 128
    dropout: float = 0.5
    # surrogate
    surrogate_rounds: int = 200
    surrogate_ngrams: int = 500
    # attack
    epsilon: float = 1500.0
    fgsm_step: float = 24.0
    cw_c: float = 1e-7
    cw_steps: int = 100
    cw_lr: float = 1e5
    max_loops: int = 10
    growth: float = 1.25
    metric: str = "pixel_l2"
    # defenses
    mix_ratio: float = 0.5
    temperature: float = 20.0
    epoch_cap_factor: int = 3
    # baselines / evaluation
    max_growth: float = 1.25
    random_seeds: int = 10
    attack_cap: int = 0  # 0 = whole test split
    defense_cap: int = 128
    vocab_file: str = ""
    version: str = __version__

    def policy(self) -> WidthPolicy:
        if self.width_mode == "fixed":
            return WidthPolicy.fixed(self.fixed_width)
        return WidthPolicy()

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.cnn_epochs, lr=self.cnn_lr, batch_size=self.cnn_batch,
            seed=self.seed, momentum=self.cnn_momentum, input_side=self.input_side,
            conv1_channels=self.conv1_channels, conv2_channels=self.conv2_channels,
            hidden=self.hidden, dropout_rate=self.dropout,
        )

    def attack_config(self) -> AttackConfig:
        return AttackConfig(
            epsilon=self.epsilon, fgsm_step=self.fgsm_step, cw_c=self.cw_c,
            cw_steps=self.cw_steps, cw_lr=self.cw_lr, max_loops=self.max_loops,
            seed=self.seed, growth=self.growth,
        )

    def defense_config(self, kind: str) -> DefenseConfig:
        return DefenseConfig(kind=kind, mix_ratio=self.mix_ratio,
                             temperature=self.temperature,
                             epoch_cap_factor=self.epoch_cap_factor)

    def budget(self, seed: int = 0) -> ObfuscationBudget:
        return ObfuscationBudget(max_growth=self.max_growth, seed=seed)

    def vocabulary(self) -> list[SemanticNop]:
        if self.vocab_file:
            return load_vocabulary(self.vocab_file)
        return list(DEFAULT_VOCAB)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_dict(values: dict) -> "RunManifest":
        manifest = RunManifest()
        for key, value in values.items():
            if not hasattr(manifest, key):
                raise DataError(f"unknown manifest key {key!r}")
            current = getattr(manifest, key)
            setattr(manifest, key, type(current)(value) if current is not None else value)
        return manifest

    @staticmethod
    def from_json(text: str) -> "RunManifest":
        return RunManifest.from_dict(json.loads(text))


def parse_config_file(path: str) -> dict:
    """Flat 'key = value' config format; '#' comments."""
    out: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


# -- persistence ----------------------------------------------------------------

def atomic_write(path: str, data: str | bytes) -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    tmp = path + ".tmp"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_csv(path: str, fieldnames: list[str], rows: list[dict]) -> None:
    lines = [",".join(fieldnames)]
    for row in rows:
        cells = []
        for name in fieldnames:
            v = row.get(name, "")
            cells.append(f"{v:.4f}" if isinstance(v, float) else str(v))
        lines.append(",".join(cells))
    atomic_write(path, "\n".join(lines) + "\n")


# -- evaluation helpers -----------------------------------------------------------

def _accuracy_on(model, artifacts: list[tuple[bytes, GrayImage, int]]) -> float:
    if not artifacts:
        return float("nan")
    hits = 0
    for data, image, label in artifacts:
        if isinstance(model, SurrogateParams):
            hits += predict_bytes(model, data, image) == label
        else:
            hits += classify(model, data, image) == label
    return hits / len(artifacts)


def _as_artifacts(samples: list[LabeledSample]) -> list[tuple[bytes, GrayImage, int]]:
    return [(s.bytes, s.image, s.label) for s in samples]


def _reimage(data: bytes, policy: WidthPolicy, label: int) -> tuple[bytes, GrayImage, int]:
    return (data, bytes_to_image(data, policy), label)


# -- stages ----------------------------------------------------------------------

@dataclass
class RunState:
    manifest: RunManifest
    samples: list[LabeledSample] = field(default_factory=list)
    splits: tuple | None = None
    cnn: TinyCnnParams | None = None
    cnn_report: object | None = None
    surrogate: SurrogateParams | None = None
    amao_full: list[tuple[LabeledSample, LoopResult]] = field(default_factory=list)
    amao_one: list[tuple[LabeledSample, LoopResult]] = field(default_factory=list)
    trace_records: list[TraceRecord] = field(default_factory=list)
    stats: InsertionStats | None = None
    failures: list[str] = field(default_factory=list)


def stage_synth(state: RunState) -> None:
    m = state.manifest
    templates = default_templates()[: m.classes]
    state.samples = synth_corpus(templates, m.per_class, m.seed, m.policy())
    state.splits = split_corpus(state.samples, m.seed)


def stage_train(state: RunState) -> None:
    m = state.manifest
    state.cnn, state.cnn_report = train_cnn(state.samples, m.train_config(), splits=state.splits)
    state.surrogate = train_surrogate(state.splits[0], rounds=m.surrogate_rounds,
                                      top_ngrams=m.surrogate_ngrams, seed=m.seed)


def _attack_subset(state: RunState) -> list[LabeledSample]:
    test = state.splits[2]
    cap = state.manifest.attack_cap
    return test[:cap] if cap else test


def class_noise_fields(state: RunState, model: TinyCnnParams) -> dict[int, np.ndarray]:
    """Per-class single-step noise from the training split (loop-1 input)."""
    m = state.manifest
    cfg = m.attack_config()
    rng = np.random.default_rng([m.seed, 21])
    fields = {}
    train_set = state.splits[0]
    for label in sorted({s.label for s in train_set}):
        members = [s.image for s in train_set if s.label == label][:32]
        fields[label] = per_class_noise(model, members, label, cfg, rng, method="fgsm")
    return fields


def run_amao(state: RunState, victims: list, subset: list[LabeledSample],
             max_loops: int, seed_tag: int, collect: bool = False,
             class_noise: dict[int, np.ndarray] | None = None) -> list[tuple[LabeledSample, LoopResult]]:
    """Closed-loop attack over a subset; optionally collect trace records."""
    m = state.manifest
    cfg = replace(m.attack_config(), max_loops=max_loops)
    policy = m.policy()
    vocab = m.vocabulary()
    out = []
    for i, s in enumerate(subset):
        rng = np.random.default_rng([m.seed, seed_tag, i])
        prog = program_from_bytes(s.bytes)
        noise = class_noise.get(s.label) if class_noise else None
        res = closed_loop(victims, prog, s.label, cfg, vocab, m.metric, policy, noise, rng)
        out.append((s, res))
        if collect and res.trace is not None:
            out_boundaries = res.boundaries if res.boundaries is not None else ()
            state.trace_records.append(TraceRecord(res.trace, s.label, tuple(out_boundaries)))
    return out


def stage_attack(state: RunState) -> list[dict]:
    """Table-1 analog: white-box CNN and black-box surrogate accuracies under
    none / one-loop / full AMAO / random insertion (10 seeds)."""
    m = state.manifest
    policy = m.policy()
    vocab = m.vocabulary()
    subset = _attack_subset(state)
    noise = class_noise_fields(state, state.cnn)

    state.amao_one = run_amao(state, [state.cnn], subset, 1, 31, class_noise=noise)
    state.amao_full = run_amao(state, [state.cnn], subset, m.max_loops, 32,
                               collect=True, class_noise=noise)

    arts_none = _as_artifacts(subset)
    arts_one = [_reimage(r.program.text, policy, s.label) for s, r in state.amao_one]
    arts_full = [_reimage(r.program.text, policy, s.label) for s, r in state.amao_full]

    rows = []
    for model_name, model in (("cnn", state.cnn), ("surrogate", state.surrogate)):
        acc_rand = []
        for k in range(m.random_seeds):
            arts = []
            for i, s in enumerate(subset):
                prog = program_from_bytes(s.bytes)
                obf = random_nop_insert(prog, vocab, m.budget(_stable_seed(m.seed, 33, k, i)))
                arts.append(_reimage(obf.text, policy, s.label))
            acc_rand.append(_accuracy_on(model, arts))
        for dataset, arts in (("none", arts_none), ("amao_1", arts_one), ("amao_f", arts_full)):
            acc = _accuracy_on(model, arts)
            rows.append({"model": model_name, "obfuscation": dataset, "accuracy": acc,
                         "accuracy_lo": acc, "accuracy_hi": acc, "n": len(arts)})
        rows.append({"model": model_name, "obfuscation": "random",
                     "accuracy": float(np.mean(acc_rand)),
                     "accuracy_lo": float(np.min(acc_rand)),
                     "accuracy_hi": float(np.max(acc_rand)), "n": len(subset)})
    return rows


def _stable_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _defense_subset(state: RunState) -> list[LabeledSample]:
    cap = state.manifest.defense_cap
    test = state.splits[2]
    return test[:cap] if cap else test


def stage_defend(state: RunState) -> list[dict]:
    """Table-2 analog: {cnn} x {none, adversarial training, distillation} x
    {true, payload, amao}; attacks are regenerated against each defended
    model, payload appends the attack target's trailing bytes."""
    m = state.manifest
    policy = m.policy()
    train_set, val_set, _ = state.splits
    subset = _defense_subset(state)
    base_cfg = m.train_config()

    # adversarial examples for retraining come from the *base* model
    retrain_src = train_set[: m.defense_cap]
    adv_for_training = []
    noise = class_noise_fields(state, state.cnn)
    for s, res in run_amao(state, [state.cnn], retrain_src, max(2, m.max_loops // 3), 41,
                           class_noise=noise):
        img = bytes_to_image(res.program.text, policy)
        adv_for_training.append(LabeledSample(res.program.text, img, s.label, "advtrain"))

    hardened = adversarial_training(state.cnn, train_set, adv_for_training, val_set,
                                    base_cfg, m.defense_config("adversarial_training"))
    distilled = distill(state.samples, base_cfg, m.temperature, state.splits)

    rows = []
    for defense, model in (("none", state.cnn),
                           ("adversarial_training", hardened.params),
                           ("distillation", distilled.params)):
        noise_d = class_noise_fields(state, model)
        amao = run_amao(state, [model], subset, m.max_loops, 42, class_noise=noise_d)
        arts_amao = [_reimage(r.program.text, policy, s.label) for s, r in amao]

        arts_payload = []
        cfg = m.attack_config()
        for i, s in enumerate(subset):
            rng = np.random.default_rng([m.seed, 43, i])
            prog = program_from_bytes(s.bytes)
            n = max(len(prog.text), int(round(len(prog.text) * cfg.growth)))
            ext_img = bytes_to_image(prog.text + bytes(n - len(prog.text)), policy)
            adv = cw_l2(model, ext_img, s.label, cfg, rng)
            tail = bytes(np.clip(np.rint(adv.perturbed.reshape(-1)[len(prog.text):n]), 0, 255).astype(np.uint8))
            data = payload_append(prog, tail, m.budget())
            arts_payload.append(_reimage(data, policy, s.label))

        for dataset, arts in (("true", _as_artifacts(subset)),
                              ("payload", arts_payload),
                              ("amao", arts_amao)):
            rows.append({"model": "cnn", "defense": defense, "dataset": dataset,
                         "accuracy": _accuracy_on(model, arts), "n": len(arts)})
    return rows


def stage_baseline(state: RunState) -> list[dict]:
    """Table-3 analog: surrogate accuracy under every obfuscator; the AMAO row
    drives the closed loop with the surrogate itself as the target."""
    m = state.manifest
    policy = m.policy()
    vocab = m.vocabulary()
    subset = _attack_subset(state)

    def transform_all(fn) -> list[tuple[bytes, GrayImage, int]]:
        arts = []
        for i, s in enumerate(subset):
            prog = program_from_bytes(s.bytes)
            out = fn(prog, i)
            data = out if isinstance(out, bytes) else out.text
            arts.append(_reimage(data, policy, s.label))
        return arts

    rows = []
    noise = class_noise_fields(state, state.cnn)
    amao = run_amao(state, [state.cnn, state.surrogate], subset, m.max_loops, 51,
                    class_noise=noise)
    table = [
        ("none", _as_artifacts(subset)),
        ("instruction_substitution", transform_all(
            lambda p, i: instruction_substitute(p, _stable_seed(m.seed, 52, i), m.budget()))),
        ("subroutine_reorder", transform_all(
            lambda p, i: subroutine_reorder(p, _stable_seed(m.seed, 53, i)))),
        ("random_dummy_code", transform_all(
            lambda p, i: random_nop_insert(p, vocab, m.budget(_stable_seed(m.seed, 54, i))))),
        ("mixing_flow", transform_all(
            lambda p, i: mix_control_flow(p, _stable_seed(m.seed, 55, i), m.budget()))),
        ("amao", [_reimage(r.program.text, policy, s.label) for s, r in amao]),
    ]
    for name, arts in table:
        rows.append({"obfuscation": name, "accuracy": _accuracy_on(state.surrogate, arts),
                     "n": len(arts)})
    return rows


def stage_stats(state: RunState, out_dir: str) -> list[dict]:
    """Heuristic extraction: frequency tables from the white-box traces, plus
    a heuristic-vs-random evasion comparison on the attack subset."""
    m = state.manifest
    policy = m.policy()
    vocab = m.vocabulary()
    state.stats = collect_stats(state.trace_records)
    tables = os.path.join(out_dir, "tables")
    write_stats_csv(state.stats,
                    os.path.join(tables, "stats-by-class.csv"),
                    os.path.join(tables, "stats-by-nop.csv"),
                    os.path.join(tables, "stats-joint.csv"),
                    os.path.join(tables, "stats-raw-index.csv"))
    subset = _attack_subset(state)
    rows = []
    for name, fn in (
        ("heuristic", lambda p, i, s: heuristic_insert(
            p, state.stats, s.label, m.budget(), _stable_seed(m.seed, 61, i), vocab)),
        ("random", lambda p, i, s: random_nop_insert(p, vocab, m.budget(_stable_seed(m.seed, 62, i)))),
    ):
        arts = []
        for i, s in enumerate(subset):
            prog = program_from_bytes(s.bytes)
            out = fn(prog, i, s)
            arts.append(_reimage(out.text, policy, s.label))
        rows.append({"method": name, "cnn_accuracy": _accuracy_on(state.cnn, arts),
                     "n": len(arts)})
    return rows


# -- orchestration ----------------------------------------------------------------

TABLE1_FIELDS = ["model", "obfuscation", "accuracy", "accuracy_lo", "accuracy_hi", "n"]
TABLE2_FIELDS = ["model", "defense", "dataset", "accuracy", "n"]
TABLE3_FIELDS = ["obfuscation", "accuracy", "n"]
HEURISTIC_FIELDS = ["method", "cnn_accuracy", "n"]


def run_experiment(manifest: RunManifest) -> RunState:
    """Execute the full pipeline into manifest.out_dir; each stage persists
    its outputs before the next starts, and failures leave partial results
    plus a failure record."""
    out = manifest.out_dir
    if not out:
        raise DataError("manifest.out_dir is required")
    os.makedirs(os.path.join(out, "tables"), exist_ok=True)
    os.makedirs(os.path.join(out, "corpus"), exist_ok=True)
    os.makedirs(os.path.join(out, "models"), exist_ok=True)
    state = RunState(manifest)

    def guard(stage_name: str, fn):
        try:
            return fn()
        except Exception as exc:  # persist what we have, record, re-raise
            state.failures.append(f"{stage_name}: {exc!r}")
            atomic_write(os.path.join(out, "FAILED.txt"), "\n".join(state.failures) + "\n")
            raise

    report = verify_vocabulary(manifest.vocabulary(), trials=100, seed=manifest.seed)
    if not report.passed:
        raise DataError(f"nop vocabulary failed verification: {report.violations[0].nop}")

    guard("synth", lambda: stage_synth(state))
    labels_csv = [{"index": i, "label": s.label, "source": s.source, "bytes": len(s.bytes)}
                  for i, s in enumerate(state.samples)]
    write_csv(os.path.join(out, "corpus", "labels.csv"),
              ["index", "label", "source", "bytes"], labels_csv)
    for i, s in enumerate(state.samples[:64]):
        atomic_write(os.path.join(out, "corpus", f"sample{i:04d}.bin"), s.bytes)
    manifest_doc = json.loads(manifest.to_json())
    manifest_doc["corpus_hash"] = corpus_hash(state.samples)
    atomic_write(os.path.join(out, "manifest.json"), json.dumps(manifest_doc, indent=2, sort_keys=True))

    guard("train", lambda: stage_train(state))
    save_checkpoint(state.cnn, os.path.join(out, "models", "cnn.ckpt"))
    save_surrogate(state.surrogate, os.path.join(out, "models", "surrogate.json"))
    rep = state.cnn_report
    write_csv(os.path.join(out, "tables", "model-accuracy.csv"),
              ["model", "split", "accuracy"],
              [{"model": "cnn", "split": "train", "accuracy": rep.train_accuracy},
               {"model": "cnn", "split": "val", "accuracy": rep.val_accuracy},
               {"model": "cnn", "split": "test", "accuracy": rep.test_accuracy},
               {"model": "surrogate", "split": "train",
                "accuracy": surrogate_accuracy(state.surrogate, state.splits[0])},
               {"model": "surrogate", "split": "test",
                "accuracy": surrogate_accuracy(state.surrogate, state.splits[2])}])

    table1 = guard("attack", lambda: stage_attack(state))
    write_csv(os.path.join(out, "tables", "table1-evasion.csv"), TABLE1_FIELDS, table1)
    _write_attack_log(state, os.path.join(out, "attacks.jsonl"))

    table2 = guard("defend", lambda: stage_defend(state))
    write_csv(os.path.join(out, "tables", "table2-defenses.csv"), TABLE2_FIELDS, table2)

    table3 = guard("baseline", lambda: stage_baseline(state))
    write_csv(os.path.join(out, "tables", "table3-obfuscations.csv"), TABLE3_FIELDS, table3)

    heuristic_rows = guard("stats", lambda: stage_stats(state, out))
    write_csv(os.path.join(out, "tables", "heuristic-comparison.csv"), HEURISTIC_FIELDS, heuristic_rows)

    atomic_write(os.path.join(out, "summary.txt"),
                 _summary_text(state, table1, table2, table3, heuristic_rows))
    return state


def _write_attack_log(state: RunState, path: str) -> None:
    lines = []
    for s, res in state.amao_full:
        lines.append(json.dumps({
            "sample": s.source,
            "label": s.label,
            "loops": res.loops,
            "evaded": res.evaded,
            "final_distance": round(res.distance, 4),
            "predictions_per_loop": res.history,
        }, sort_keys=True))
    atomic_write(path, "\n".join(lines) + "\n")


def _summary_text(state: RunState, table1, table2, table3, heuristic_rows) -> str:
    lines = ["run summary", "==========="]
    rep = state.cnn_report
    lines.append(f"corpus: {len(state.samples)} samples, hash {corpus_hash(state.samples)[:16]}")
    lines.append(f"cnn accuracy train/val/test: {rep.train_accuracy:.4f}/{rep.val_accuracy:.4f}/{rep.test_accuracy:.4f}")
    lines.append(f"surrogate test accuracy: {surrogate_accuracy(state.surrogate, state.splits[2]):.4f}")
    lines.append("")
    lines.append("table 1 (evasion):")
    for row in table1:
        lines.append(f"  {row['model']:10s} {row['obfuscation']:12s} acc={row['accuracy']:.4f} "
                     f"[{row['accuracy_lo']:.4f}, {row['accuracy_hi']:.4f}] n={row['n']}")
    lines.append("table 2 (defenses):")
    for row in table2:
        lines.append(f"  {row['defense']:22s} {row['dataset']:8s} acc={row['accuracy']:.4f} n={row['n']}")
    lines.append("table 3 (obfuscation comparison, surrogate):")
    for row in table3:
        lines.append(f"  {row['obfuscation']:24s} acc={row['accuracy']:.4f} n={row['n']}")
    lines.append("heuristic replay vs random (cnn accuracy):")
    for row in heuristic_rows:
        lines.append(f"  {row['method']:10s} acc={row['cnn_accuracy']:.4f} n={row['n']}")
    if state.failures:
        lines.append("failures:")
        lines.extend(f"  {f}" for f in state.failures)
    return "\n".join(lines) + "\n"
