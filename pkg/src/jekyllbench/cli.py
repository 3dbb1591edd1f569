"""Command-line entry point.

Exit codes: 0 success, 1 validation/configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import defense, harness, metrics, progression, reporting, synthdata, translator
from .classifiers import load_classifier
from .core import ValidationError, config_hash, load_image, save_image, seed_everything, write_json
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
from .synthdata import NON_DISEASE_LABEL, ToySpec


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="flat section.key=value config file")
    parser.add_argument("--seed", type=int, default=None, help="override the experiment seed")
    parser.add_argument("--deterministic", action="store_true", help="pin deterministic kernels")


def _load_config(args: argparse.Namespace) -> dict:
    config = harness.load_config_file(args.config) if args.config else {}
    if args.seed is not None:
        config.setdefault("experiment", {})["seed"] = args.seed
    if args.deterministic:
        config.setdefault("experiment", {})["deterministic"] = True
    return config


def _seed_of(args: argparse.Namespace, config: dict) -> int:
    return int(config.get("experiment", {}).get("seed", 0))


def cmd_synth(args: argparse.Namespace) -> int:
    config = _load_config(args)
    seed = _seed_of(args, config)
    seed_everything(seed, config.get("experiment", {}).get("deterministic", False))
    spec = ToySpec(
        n_patients=args.patients,
        images_per_patient=args.images_per,
        resolution=args.resolution,
        stage_levels=tuple(np.linspace(0.5, 0.9, args.stages)),
        color=args.color,
    )
    manifest, oracle = synthdata.generate_toy_dataset(spec, seed, args.out)
    n = sum(len(r.image_refs) for r in manifest.records)
    print(f"wrote {n} images, manifest, and oracle under {args.out}")
    return 0


def cmd_prepare(args: argparse.Namespace) -> int:
    config = _load_config(args)
    seed = _seed_of(args, config)
    manifest = load_manifest(args.manifest)
    attack, evaluation = partition_patients(manifest, args.eval_fraction, args.min_images, seed)
    out = Path(args.out)
    save_partitions(attack, evaluation, out / "partitions.json")
    print(f"attack={len(attack.patient_ids)} evaluation={len(evaluation.patient_ids)} patients")
    if args.disease_eval and args.identity_eval:
        loader = manifest_loader(manifest)
        candidates = [
            (pid, ref)
            for pid, ref, _ in partition_images(manifest, evaluation, lambda l: l == args.non_disease_label)
        ]
        victims = build_victim_set(
            candidates, load_classifier(args.disease_eval), load_classifier(args.identity_eval), loader
        )
        victims.save(out / "victims.json")
        print(f"victims: {len(victims.entries)} of {len(candidates)} candidates")
    return 0


def cmd_train_classifier(args: argparse.Namespace) -> int:
    config = _load_config(args)
    seed = _seed_of(args, config)
    seed_everything(seed, config.get("experiment", {}).get("deterministic", False))
    manifest = load_manifest(args.manifest)
    attack, evaluation = load_partitions(args.partitions)
    partition = attack if args.partition == "attack" else evaluation
    clf_cfg = dict(config.get("classifier", {}))
    if args.epochs is not None:
        clf_cfg["epochs"] = args.epochs
    if args.backbone is not None:
        clf_cfg["backbone"] = args.backbone
    handle, accuracy = harness.train_partition_classifier(
        manifest, partition, args.role, clf_cfg, seed, Path(args.out)
    )
    print(f"{handle.role} accuracy: {accuracy:.3f}")
    return 0


def cmd_train_gan(args: argparse.Namespace) -> int:
    config = _load_config(args)
    seed = _seed_of(args, config)
    seed_everything(seed, config.get("experiment", {}).get("deterministic", True))
    manifest = load_manifest(args.data)
    attack, _ = load_partitions(args.partitions)
    loader = manifest_loader(manifest)
    x = np.stack([loader(r) for _, r, _ in partition_images(manifest, attack, lambda l: l == args.non_disease_label)])
    y = np.stack([loader(r) for _, r, _ in partition_images(manifest, attack, lambda l: l != args.non_disease_label)])
    merged = harness.merge_config(harness.DEFAULT_TOY_CONFIG, config)
    cfg = harness._experiment_config(merged, x.shape[1], manifest.image_resolution, args.repurposed)
    disease = load_classifier(args.disease_clf) if args.disease_clf else None
    identity = load_classifier(args.identity_clf) if args.identity_clf else None
    model = translator.build_translation_model(cfg, disease, identity)
    if args.repurposed:
        model = translator.attach_global_discriminator(model)
    history = translator.train_jekyll(model, x, y, out_dir=args.out)
    reporting.write_loss_history_csv(history, Path(args.out) / "loss_history.csv")
    reporting.render_loss_curves(history, Path(args.out) / "loss_curves.png")
    print(f"trained {len(history)} epochs; final: {history[-1] if history else None}")
    return 0


def cmd_translate(args: argparse.Namespace) -> int:
    model = translator.load_translation_model(args.model)
    fake = translator.translate(model, load_image(args.input), args.direction)
    save_image(fake, args.output)
    print(f"wrote {args.output}")
    return 0


def cmd_interpolate(args: argparse.Namespace) -> int:
    i_nd = load_image(args.nd)
    i_d = load_image(args.d)
    alphas = tuple(float(a) for a in args.alphas.split(","))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for alpha in alphas:
        frame = progression.interpolate_stage(i_nd, i_d, alpha)
        save_image(frame, out / f"alpha_{alpha:.3f}.png")
    if args.disease_eval:
        handle = load_classifier(args.disease_eval)
        curve = progression.progression_curve(handle, i_nd, i_d, alphas)
        write_json(curve, out / "curve.json")
        reporting.render_progression_curves([curve], out / "curve.png")
        print(f"monotone={curve['monotone']} probabilities={['%.3f' % p for p in curve['probabilities']]}")
    else:
        print(f"wrote {len(alphas)} interpolated frames to {out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _load_config(args)
    seed = _seed_of(args, config)
    manifest = load_manifest(args.manifest)
    loader = manifest_loader(manifest)
    victims = VictimSet.load(args.victims)
    model = translator.load_translation_model(args.model)
    images = [loader(ref) for _, ref in victims.entries]
    fakes = translator.translate_batch(model, images, direction="xy")
    disease_eval = load_classifier(args.disease_eval)
    identity_eval = load_classifier(args.identity_eval) if args.identity_eval else None
    _, evaluation = load_partitions(args.partitions)
    reals = [
        loader(ref)
        for _, ref, _ in partition_images(manifest, evaluation, lambda l: l != args.non_disease_label)
    ]
    half = len(reals) // 2
    scores = metrics.mssim_cohort(reals[:half], reals[half:], fakes, seed) if half else None
    out = Path(args.out)
    report = metrics.evaluate_attack(
        fakes,
        [ref for _, ref in victims.entries],
        [pid for pid, _ in victims.entries],
        disease_eval,
        identity_eval,
        scores,
        seed,
        config_hash(config),
        args.threshold,
        path=out / "report.json",
    )
    reporting.write_per_image_csv(report, out / "per_image.csv")
    figures = reporting.render_report_figures(report, out / "figures")
    print(f"R_d={report['r_d']:.1f}% R_i={report['r_i']:.1f}% ({len(figures)} figures)")
    return 0


def manifest_images_limited(manifest, limit: int | None):
    triples = list(manifest.iter_images())
    return triples if limit is None else triples[:limit]


def cmd_defend(args: argparse.Namespace) -> int:
    config = _load_config(args)
    seed = _seed_of(args, config)
    seed_everything(seed, config.get("experiment", {}).get("deterministic", False))
    if args.mode == "train-blind":
        manifest = load_manifest(args.manifest)
        loader = manifest_loader(manifest)
        reals = [loader(ref) for _, ref, _ in manifest_images_limited(manifest, args.limit)]
        detector = defense.train_blind_detector(
            reals, defense.BlindDetectorConfig(nu=args.nu, gamma=args.gamma)
        )
        defense.save_detector(detector, args.out)
        print(f"blind detector trained; train anomaly fraction {detector.metadata['train_anomaly_fraction']:.3f}")
        return 0
    if args.fakes is None:
        raise ValidationError("train-supervised requires --fakes")
    manifest = load_manifest(args.manifest)
    loader = manifest_loader(manifest)
    fakes_dir = Path(args.fakes)
    real_items, fake_items = [], []
    for pid, ref, _ in manifest.iter_images():
        real_items.append((loader(ref), pid))
        if (fakes_dir / ref).exists():
            fake_items.append((load_image(fakes_dir / ref), pid))
    if not fake_items:
        raise ValidationError(f"no fakes under {fakes_dir} matching manifest refs")
    patients = sorted({pid for _, pid in real_items})
    rng = np.random.default_rng(seed)
    n_test = max(1, int(round(args.test_fraction * len(patients))))
    test_patients = set(rng.permutation(patients)[:n_test].tolist())
    pick = lambda items, test: [it for it in items if (it[1] in test_patients) == test]
    detector, results = defense.train_supervised_detector(
        pick(real_items, False),
        pick(fake_items, False),
        pick(real_items, True),
        pick(fake_items, True),
        defense.DetectorRecipe(epochs=args.epochs),
        seed,
    )
    defense.save_detector(detector, args.out)
    print(
        f"mesonet test accuracy {results['accuracy']:.1f}% precision {results['precision']:.1f}% "
        f"recall {results['recall']:.1f}%"
    )
    return 0


def cmd_detect(args: argparse.Namespace) -> int:
    detector = defense.load_detector(args.model)
    image_paths = sorted(Path(args.images).rglob("*.png"))
    if not image_paths:
        raise ValidationError(f"no .png images under {args.images}")
    verdicts = []
    for path in image_paths:
        img = load_image(path)
        if detector.kind == "supervised_mesonet":
            score = float(defense.supervised_scores(detector, [img])[0])
            verdict = "fake" if score >= detector.threshold else "real"
        else:
            verdict = defense.blind_detect(detector, img)
            score = None
        verdicts.append({"path": str(path), "verdict": verdict, "score": score})
    write_json({"verdicts": verdicts}, args.out)
    fakes = sum(v["verdict"] == "fake" for v in verdicts)
    print(f"{fakes}/{len(verdicts)} flagged fake; wrote {args.out}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    config = _load_config(args)
    plan = harness.build_toy_plan(config, args.out)
    plan.resumable = not args.no_resume
    result = harness.run_experiment(plan)
    for step in result["steps"]:
        print(f"{step['step']}: {step['status']}")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    diff = harness.compare_runs(args.report_a, args.report_b)
    for key in sorted(diff):
        value = diff[key]
        print(f"{key} = {'n/a' if value is None else f'{value:+.3f}'}")
    if args.out:
        write_json(diff, args.out)
    return 0


def cmd_audit(args: argparse.Namespace) -> int:
    violations = harness.audit_artifacts(args.artifacts)
    if violations:
        for violation in violations:
            print(violation)
        return 1
    print("audit clean")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jekyllbench",
        description="Disease-injection style-transfer attack benchmark and defenses",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic toy dataset")
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--images-per", type=int, required=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--stages", type=int, default=2)
    p.add_argument("--color", action="store_true")
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("prepare", help="patient-level split and optional victim screening")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--eval-fraction", type=float, default=0.2)
    p.add_argument("--min-images", type=int, default=10)
    p.add_argument("--disease-eval", type=Path, default=None)
    p.add_argument("--identity-eval", type=Path, default=None)
    p.add_argument("--non-disease-label", default=NON_DISEASE_LABEL)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("train-classifier", help="train a disease or identity classifier")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--partitions", type=Path, required=True)
    p.add_argument("--role", choices=("disease", "identity"), required=True)
    p.add_argument("--partition", choices=("attack", "evaluation"), required=True)
    p.add_argument("--backbone", choices=("toycnn", "densenet121"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_train_classifier)

    p = sub.add_parser("train-gan", help="train the translation model")
    p.add_argument("--data", type=Path, required=True, help="manifest path")
    p.add_argument("--partitions", type=Path, required=True)
    p.add_argument("--disease-clf", type=Path, default=None)
    p.add_argument("--identity-clf", type=Path, default=None)
    p.add_argument("--repurposed", action="store_true", help="add the scalar discriminator heads")
    p.add_argument("--non-disease-label", default=NON_DISEASE_LABEL)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_train_gan)

    p = sub.add_parser("translate", help="translate one image")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--direction", choices=("xy", "yx"), default="xy")
    p.add_argument("--output", type=Path, required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_translate)

    p = sub.add_parser("interpolate", help="blend between an image and its translation")
    p.add_argument("--nd", type=Path, required=True)
    p.add_argument("--d", type=Path, required=True)
    p.add_argument("--alphas", default="0,0.25,0.5,0.75,1")
    p.add_argument("--disease-eval", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_interpolate)

    p = sub.add_parser("evaluate", help="score an attack and write the report")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--victims", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--partitions", type=Path, required=True)
    p.add_argument("--disease-eval", type=Path, required=True)
    p.add_argument("--identity-eval", type=Path, default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--non-disease-label", default=NON_DISEASE_LABEL)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("defend", help="train a fake-image detector")
    p.add_argument("mode", choices=("train-blind", "train-supervised"))
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--fakes", type=Path, default=None, help="directory of fakes (supervised)")
    p.add_argument("--nu", type=float, default=0.12)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--test-fraction", type=float, default=0.4)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_defend)

    p = sub.add_parser("detect", help="run a detector over a directory of images")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("run", help="run the full toy pipeline")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-resume", action="store_true")
    _add_common(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("compare", help="metric deltas between two reports")
    p.add_argument("--report-a", type=Path, required=True)
    p.add_argument("--report-b", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("audit", help="check artifact provenance of a run directory")
    p.add_argument("--artifacts", type=Path, required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_audit)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for violation in getattr(exc, "violations", []):
            print(f"  - {violation}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
