"""Experiment orchestration: flat config files, pipelines, provenance, diffs.

A pipeline is an ordered list of steps with declared input/output paths.
Each completed step writes a status file carrying the config hash and its
outputs; the pipeline state file makes interrupted runs resumable, and the
audit walk flags any artifact no step claims to have produced.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

import jsonschema

from . import defense, metrics, reporting, synthdata, translator
from .classifiers import (
    TrainingRecipe,
    build_classifier,
    load_classifier,
    save_classifier,
    train_classifier,
)
from .core import (
    ExperimentConfig,
    WEIGHT_PRESETS,
    ValidationError,
    config_hash,
    derive_rng,
    load_image,
    read_json,
    save_image,
    seed_everything,
    write_json,
)
from .ingest import (
    VictimSet,
    build_victim_set,
    load_manifest,
    load_partitions,
    manifest_loader,
    partition_images,
    partition_patients,
    save_partitions,
)
from .metrics import REPORT_SCHEMA
from .synthdata import NON_DISEASE_LABEL, ToySpec

# --------------------------------------------------------------------------
# Flat config files: one "section.key = value" per line.


def parse_flat_config(text: str) -> dict:
    config: dict[str, dict] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"config line {number}: expected 'section.key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if "." not in key:
            raise ValidationError(f"config line {number}: key {key!r} lacks a section prefix")
        section, _, name = key.partition(".")
        try:
            parsed = json.loads(value.strip())
        except json.JSONDecodeError:
            parsed = value.strip()
        config.setdefault(section, {})[name] = parsed
    return config


def format_flat_config(config: dict) -> str:
    lines = []
    for section in sorted(config):
        for name in sorted(config[section]):
            value = config[section][name]
            rendered = json.dumps(value) if not isinstance(value, str) else value
            lines.append(f"{section}.{name} = {rendered}")
    return "\n".join(lines) + "\n"


def load_config_file(path: str | Path) -> dict:
    return parse_flat_config(Path(path).read_text(encoding="utf-8"))


def merge_config(base: dict, override: dict) -> dict:
    merged = {section: dict(values) for section, values in base.items()}
    for section, values in override.items():
        merged.setdefault(section, {}).update(values)
    return merged


DEFAULT_TOY_CONFIG: dict = {
    "experiment": {"seed": 7, "deterministic": True},
    "synth": {"patients": 12, "images_per_patient": 12, "resolution": 64, "stages": 2, "color": False},
    "prepare": {"eval_fraction": 0.25, "min_images": 8},
    "classifier": {
        "backbone": "toycnn",
        "epochs": 10,
        "batch_size": 16,
        "learning_rate": 3e-4,
        "val_fraction": 0.2,
    },
    "gan": {
        "weights_preset": "toy",
        "epochs_constant": 2,
        "epochs_decay": 2,
        "steps_per_epoch": 30,
        "generator_base_width": 16,
        "discriminator_base_width": 16,
        "residual_blocks": 4,
        "batch_size": 1,
        "repurposed": False,
    },
    "evaluate": {"disease_threshold": 0.5},
    "defend": {"mesonet_epochs": 3, "test_patient_fraction": 0.4, "nu": 0.12, "gamma": 0.1},
}


# --------------------------------------------------------------------------
# Plans


@dataclass
class PlanStep:
    name: str
    run: Callable[[], dict]
    inputs: tuple[Path, ...] = ()
    outputs: tuple[Path, ...] = ()


@dataclass
class ExperimentPlan:
    steps: list[PlanStep]
    config: dict
    artifact_dir: Path
    resumable: bool = True

    @property
    def seed(self) -> int:
        return int(self.config.get("experiment", {}).get("seed", 0))

    @property
    def hash(self) -> str:
        return config_hash(self.config)


def validate_plan(plan: ExperimentPlan) -> None:
    names = [step.name for step in plan.steps]
    if len(set(names)) != len(names):
        raise ValidationError(f"duplicate step names in plan: {names}")
    produced: dict[Path, str] = {}
    for step in plan.steps:
        for out in step.outputs:
            if out in produced:
                raise ValidationError(f"output {out} claimed by both {produced[out]!r} and {step.name!r}")
            produced[out] = step.name
    seen: set[Path] = set()
    for step in plan.steps:
        for inp in step.inputs:
            if inp in produced and inp not in seen:
                raise ValidationError(
                    f"step {step.name!r} needs {inp} which is produced later by {produced[inp]!r}"
                )
        seen.update(step.outputs)


def _state_path(plan: ExperimentPlan) -> Path:
    return plan.artifact_dir / "state.json"


def run_experiment(plan: ExperimentPlan) -> dict:
    """Execute pending steps in order, persisting per-step status and state.

    A failure leaves the state file pointing at the last completed step, so a
    rerun with ``resumable`` skips everything already done. Rerunning with a
    changed config against the same artifact directory is refused.
    """
    validate_plan(plan)
    plan.artifact_dir.mkdir(parents=True, exist_ok=True)
    (plan.artifact_dir / "config.txt").write_text(format_flat_config(plan.config), encoding="utf-8")
    status_dir = plan.artifact_dir / "status"
    status_dir.mkdir(exist_ok=True)
    state_file = _state_path(plan)
    completed: list[str] = []
    if state_file.exists():
        state = read_json(state_file)
        if state.get("config_hash") != plan.hash:
            raise ValidationError(
                f"artifact dir {plan.artifact_dir} holds a run with a different config; use a fresh dir"
            )
        if plan.resumable:
            completed = [n for n in state.get("completed", []) if n in {s.name for s in plan.steps}]
    executed = []
    for step in plan.steps:
        if step.name in completed:
            executed.append({"step": step.name, "status": "skipped"})
            continue
        missing = [str(p) for p in step.inputs if not p.exists()]
        if missing:
            raise ValidationError(f"step {step.name!r} missing inputs: {missing}")
        try:
            details = step.run() or {}
        except Exception as exc:
            write_json(
                {"step": step.name, "status": "failed", "error": str(exc), "config_hash": plan.hash},
                status_dir / f"{step.name}.json",
            )
            raise
        write_json(
            {
                "step": step.name,
                "status": "done",
                "config_hash": plan.hash,
                "seed": plan.seed,
                "inputs": [str(p) for p in step.inputs],
                "outputs": [str(p) for p in step.outputs],
                "details": details,
            },
            status_dir / f"{step.name}.json",
        )
        completed.append(step.name)
        write_json({"config_hash": plan.hash, "completed": completed}, state_file)
        executed.append({"step": step.name, "status": "done"})
    return {"artifact_dir": str(plan.artifact_dir), "steps": executed}


def compare_runs(report_path_a: str | Path, report_path_b: str | Path) -> dict:
    """Per-metric deltas (B minus A) between two evaluation reports."""
    diffs = {}
    report_a = read_json(report_path_a)
    report_b = read_json(report_path_b)
    for report in (report_a, report_b):
        jsonschema.validate(report, REPORT_SCHEMA)
    for key in ("r_d", "r_i", "mssim_real_real", "mssim_real_fake"):
        a, b = report_a.get(key), report_b.get(key)
        diffs[f"delta_{key}"] = None if a is None or b is None else b - a
    return diffs


def audit_artifacts(artifact_dir: str | Path) -> list[str]:
    """Provenance check: every file must be claimed by some step's status.

    Returns violations (orphan files, or status entries whose config hash
    disagrees with the run's config).
    """
    artifact_dir = Path(artifact_dir)
    status_dir = artifact_dir / "status"
    if not status_dir.is_dir():
        return [f"no status directory under {artifact_dir}"]
    expected_hash = config_hash(load_config_file(artifact_dir / "config.txt"))
    claimed: set[Path] = {artifact_dir / "config.txt", artifact_dir / "state.json"}
    violations: list[str] = []
    for status_file in sorted(status_dir.glob("*.json")):
        claimed.add(status_file)
        status = read_json(status_file)
        if status.get("status") == "done" and status.get("config_hash") != expected_hash:
            violations.append(f"{status_file.name}: config hash mismatch")
        for out in status.get("outputs", []):
            claimed.add(Path(out))
    for path in sorted(artifact_dir.rglob("*")):
        if path.is_dir():
            continue
        if any(path == c or c in path.parents for c in claimed):
            continue
        violations.append(f"orphan artifact: {path.relative_to(artifact_dir)}")
    return violations


# --------------------------------------------------------------------------
# The built-in toy pipeline


def _split_items(items: list, val_fraction: float, seed: int, key: str) -> tuple[list, list]:
    order = derive_rng(seed, key).permutation(len(items))
    n_val = max(1, int(round(val_fraction * len(items))))
    val_idx = set(order[:n_val].tolist())
    train = [items[i] for i in range(len(items)) if i not in val_idx]
    val = [items[i] for i in range(len(items)) if i in val_idx]
    return train, val


def train_partition_classifier(
    manifest,
    partition,
    task: str,
    cfg: dict,
    seed: int,
    out_dir: Path,
):
    """Build, train, and persist one classifier for a partition; returns (handle, accuracy)."""
    loader = manifest_loader(manifest)
    triples = partition_images(manifest, partition)
    if task == "disease":
        class_names = (NON_DISEASE_LABEL, "disease")
        items = [(loader(ref), 0 if label == NON_DISEASE_LABEL else 1) for _, ref, label in triples]
    else:
        class_names = tuple(sorted(partition.patient_ids))
        index = {pid: i for i, pid in enumerate(class_names)}
        items = [(loader(ref), index[pid]) for pid, ref, _ in triples]
    recipe = TrainingRecipe(
        epochs=int(cfg.get("epochs", 10)),
        batch_size=int(cfg.get("batch_size", 16)),
        learning_rate=float(cfg.get("learning_rate", 3e-4)),
    )
    handle = build_classifier(
        task, partition.name, class_names, cfg.get("backbone", "toycnn"), manifest.image_resolution
    )
    train_items, val_items = _split_items(
        items, float(cfg.get("val_fraction", 0.2)), seed, f"clf-split-{task}-{partition.name}"
    )
    accuracy = train_classifier(handle, train_items, val_items, recipe, seed)
    save_classifier(handle, out_dir)
    return handle, accuracy


def _experiment_config(config: dict, channels: int, resolution: int, repurposed: bool) -> ExperimentConfig:
    gan = config["gan"]
    weights = WEIGHT_PRESETS[gan.get("weights_preset", "toy")]
    if "lambda_adv" in gan:
        weights = weights.__class__(
            float(gan["lambda_adv"]),
            float(gan["lambda_disease"]),
            float(gan["lambda_identity"]),
            float(gan["lambda_cycle"]),
        )
    return ExperimentConfig(
        seed=int(config["experiment"]["seed"]) + (1000 if repurposed else 0),
        loss_weights=weights,
        epochs_constant=int(gan.get("epochs_constant", 2)),
        epochs_decay=int(gan.get("epochs_decay", 2)),
        batch_size=int(gan.get("batch_size", 1)),
        image_size=resolution,
        image_channels=channels,
        generator_base_width=int(gan.get("generator_base_width", 16)),
        discriminator_base_width=int(gan.get("discriminator_base_width", 16)),
        residual_blocks=int(gan.get("residual_blocks", 4)),
        steps_per_epoch=gan.get("steps_per_epoch"),
        deterministic_mode=bool(config["experiment"].get("deterministic", True)),
    )


def build_toy_plan(config: dict, artifact_dir: str | Path) -> ExperimentPlan:
    """The full synthetic pipeline: data, split, classifiers, attack, report, defense."""
    config = merge_config(DEFAULT_TOY_CONFIG, config)
    artifact_dir = Path(artifact_dir)
    seed = int(config["experiment"]["seed"])
    deterministic = bool(config["experiment"].get("deterministic", True))
    data_dir = artifact_dir / "data"
    partitions_file = artifact_dir / "partitions.json"
    clf_dir = artifact_dir / "classifiers"
    victims_file = artifact_dir / "victims.json"
    gan_dir = artifact_dir / "gan"
    fakes_dir = artifact_dir / "translations"
    reports_dir = artifact_dir / "reports"
    defense_dir = artifact_dir / "defense"

    # Steps share loaded state lazily so a resumed run only loads what it needs.
    cache: dict = {}

    def manifest():
        if "manifest" not in cache:
            cache["manifest"] = load_manifest(data_dir / "manifest.jsonl")
        return cache["manifest"]

    def partitions():
        if "partitions" not in cache:
            cache["partitions"] = load_partitions(partitions_file)
        return cache["partitions"]

    def classifier(role: str):
        key = f"clf-{role}"
        if key not in cache:
            cache[key] = load_classifier(clf_dir / role.replace(":", "_"))
        return cache[key]

    def step_synth() -> dict:
        seed_everything(seed, deterministic)
        synth = config["synth"]
        spec = ToySpec(
            n_patients=int(synth["patients"]),
            images_per_patient=int(synth["images_per_patient"]),
            resolution=int(synth["resolution"]),
            stage_levels=tuple(np.linspace(0.5, 0.9, int(synth.get("stages", 2)))),
            color=bool(synth.get("color", False)),
        )
        manifest_obj, oracle_path = synthdata.generate_toy_dataset(spec, seed, data_dir)
        cache["manifest"] = manifest_obj
        n_images = sum(len(r.image_refs) for r in manifest_obj.records)
        return {"images": n_images, "oracle": str(oracle_path)}

    def step_prepare() -> dict:
        prep = config["prepare"]
        attack, evaluation = partition_patients(
            manifest(), float(prep["eval_fraction"]), int(prep["min_images"]), seed
        )
        save_partitions(attack, evaluation, partitions_file)
        cache["partitions"] = (attack, evaluation)
        return {"attack_patients": len(attack.patient_ids), "evaluation_patients": len(evaluation.patient_ids)}

    def step_classifiers() -> dict:
        seed_everything(seed, deterministic)
        attack, evaluation = partitions()
        accuracies = {}
        clf_cfg = config["classifier"]
        for partition in (attack, evaluation):
            for task in ("disease", "identity"):
                role = f"{task}:{partition.name}"
                task_cfg = dict(clf_cfg)
                if task == "identity":
                    task_cfg["epochs"] = clf_cfg.get("identity_epochs", clf_cfg.get("epochs", 10) * 2)
                handle, accuracy = train_partition_classifier(
                    manifest(), partition, task, task_cfg, seed, clf_dir / role.replace(":", "_")
                )
                cache[f"clf-{role}"] = handle
                accuracies[role] = accuracy
        return {"accuracies": accuracies}

    def step_victims() -> dict:
        _, evaluation = partitions()
        loader = manifest_loader(manifest())
        candidates = [
            (pid, ref)
            for pid, ref, _ in partition_images(manifest(), evaluation, lambda l: l == NON_DISEASE_LABEL)
        ]
        victims = build_victim_set(
            candidates, classifier("disease:evaluation"), classifier("identity:evaluation"), loader
        )
        victims.save(victims_file)
        cache["victims"] = victims
        return {"candidates": len(candidates), "victims": len(victims.entries)}

    def step_gan() -> dict:
        seed_everything(seed, deterministic)
        attack, _ = partitions()
        loader = manifest_loader(manifest())
        x_refs = partition_images(manifest(), attack, lambda l: l == NON_DISEASE_LABEL)
        y_refs = partition_images(manifest(), attack, lambda l: l != NON_DISEASE_LABEL)
        x_pool = np.stack([loader(ref) for _, ref, _ in x_refs])
        y_pool = np.stack([loader(ref) for _, ref, _ in y_refs])
        cfg = _experiment_config(
            config, x_pool.shape[1], manifest().image_resolution, bool(config["gan"].get("repurposed", False))
        )
        model = translator.build_translation_model(
            cfg, classifier("disease:attack"), classifier("identity:attack")
        )
        if config["gan"].get("repurposed", False):
            model = translator.attach_global_discriminator(model)
        history = translator.train_jekyll(model, x_pool, y_pool, out_dir=gan_dir)
        cache["gan"] = model
        reporting.write_loss_history_csv(history, gan_dir / "loss_history.csv")
        reporting.render_loss_curves(history, gan_dir / "loss_curves.png")
        return {"epochs": len(history), "final": history[-1] if history else None}

    def gan_model():
        if "gan" not in cache:
            cache["gan"] = translator.load_translation_model(gan_dir / "final")
        return cache["gan"]

    def step_translate() -> dict:
        victims = cache.get("victims") or VictimSet.load(victims_file)
        loader = manifest_loader(manifest())
        images = [loader(ref) for _, ref in victims.entries]
        fakes = translator.translate_batch(gan_model(), images, direction="xy")
        for (pid, ref), fake in zip(victims.entries, fakes):
            save_image(fake, fakes_dir / ref)
        return {"fakes": len(fakes)}

    def step_evaluate() -> dict:
        victims = cache.get("victims") or VictimSet.load(victims_file)
        _, evaluation = partitions()
        loader = manifest_loader(manifest())
        fakes = [load_image(fakes_dir / ref) for _, ref in victims.entries]
        refs = [ref for _, ref in victims.entries]
        true_ids = [pid for pid, _ in victims.entries]
        disease_real = [
            loader(ref) for _, ref, _ in partition_images(manifest(), evaluation, lambda l: l != NON_DISEASE_LABEL)
        ]
        half = len(disease_real) // 2
        scores = (
            metrics.mssim_cohort(disease_real[:half], disease_real[half:], fakes, pairing_seed=seed)
            if half >= 1
            else None
        )
        report = metrics.evaluate_attack(
            fakes,
            refs,
            true_ids,
            classifier("disease:evaluation"),
            classifier("identity:evaluation"),
            scores,
            seed,
            config_hash(config),
            float(config["evaluate"].get("disease_threshold", 0.5)),
            path=reports_dir / "report.json",
        )
        reporting.write_per_image_csv(report, reports_dir / "per_image.csv")
        reporting.render_report_figures(report, reports_dir / "figures")
        return {"r_d": report["r_d"], "r_i": report["r_i"]}

    def _is_color() -> bool:
        first_ref = manifest().records[0].image_refs[0]
        return load_image(manifest().resolve(first_ref)).shape[0] == 3

    def step_defend() -> dict:
        seed_everything(seed, deterministic)
        victims = cache.get("victims") or VictimSet.load(victims_file)
        _, evaluation = partitions()
        loader = manifest_loader(manifest())
        details: dict = {}
        eval_patients = sorted(evaluation.patient_ids)
        rng = derive_rng(seed, "defense-split")
        n_test = max(1, int(round(float(config["defend"].get("test_patient_fraction", 0.4)) * len(eval_patients))))
        test_patients = set(rng.permutation(eval_patients)[:n_test].tolist())
        real_items = [
            (loader(ref), pid) for pid, ref, _ in partition_images(manifest(), evaluation)
        ]
        fake_items = [(load_image(fakes_dir / ref), pid) for pid, ref in victims.entries]
        split = lambda items, test: [it for it in items if (it[1] in test_patients) == test]
        detector, test_metrics = defense.train_supervised_detector(
            split(real_items, False),
            split(fake_items, False),
            split(real_items, True),
            split(fake_items, True),
            defense.DetectorRecipe(epochs=int(config["defend"].get("mesonet_epochs", 3))),
            seed,
        )
        defense.save_detector(detector, defense_dir / "mesonet")
        details["mesonet"] = test_metrics
        if _is_color():
            blind_cfg = defense.BlindDetectorConfig(
                nu=float(config["defend"].get("nu", 0.12)), gamma=float(config["defend"].get("gamma", 0.1))
            )
            blind = defense.train_blind_detector([img for img, _ in real_items], blind_cfg)
            defense.save_detector(blind, defense_dir / "blind")
            details["blind"] = blind.metadata
        else:
            details["blind"] = "skipped: grayscale data, color statistics unavailable"
        write_json(details, defense_dir / "defense_metrics.json")
        return details

    steps = [
        PlanStep("synth", step_synth, outputs=(data_dir,)),
        PlanStep("prepare", step_prepare, inputs=(data_dir,), outputs=(partitions_file,)),
        PlanStep("classifiers", step_classifiers, inputs=(data_dir, partitions_file), outputs=(clf_dir,)),
        PlanStep("victims", step_victims, inputs=(data_dir, partitions_file, clf_dir), outputs=(victims_file,)),
        PlanStep("gan", step_gan, inputs=(data_dir, partitions_file, clf_dir), outputs=(gan_dir,)),
        PlanStep("translate", step_translate, inputs=(victims_file, gan_dir), outputs=(fakes_dir,)),
        PlanStep(
            "evaluate", step_evaluate, inputs=(fakes_dir, victims_file, clf_dir), outputs=(reports_dir,)
        ),
        PlanStep("defend", step_defend, inputs=(fakes_dir, victims_file), outputs=(defense_dir,)),
    ]
    return ExperimentPlan(steps=steps, config=config, artifact_dir=artifact_dir)
