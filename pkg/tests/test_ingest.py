import json

import numpy as np
import pytest

from jekyllbench import classifiers
from jekyllbench.core import DatasetManifest, PatientRecord, ValidationError
from jekyllbench.ingest import (
    AugmentationSpec,
    VictimSet,
    augment,
    build_victim_set,
    load_manifest,
    load_partitions,
    manifest_loader,
    partition_images,
    partition_patients,
    save_partitions,
    upsample_minority,
)


def write_lines(path, lines):
    path.write_text("\n".join(json.dumps(line) for line in lines) + "\n")
    return path


HEADER = {"vocabulary": ["non-disease", "disease"], "resolution": 8}


def image_line(pid, name, label="non-disease"):
    return {"path": f"{pid}/{name}.png", "patient_id": pid, "label": label}


def synthetic_manifest(n_patients, images_per_patient, resolution=8):
    records = []
    for k in range(n_patients):
        pid = f"p{k:03d}"
        refs = tuple(f"{pid}/i{i}.png" for i in range(images_per_patient))
        labels = ("non-disease",) * images_per_patient
        records.append(PatientRecord(pid, refs, labels))
    return DatasetManifest(tuple(records), ("non-disease", "disease"), resolution)


# ---------------------------------------------------------------- load_manifest


def test_load_manifest_header_plus_three_lines(tmp_path):
    path = write_lines(
        tmp_path / "m.jsonl",
        [HEADER, image_line("p1", "a"), image_line("p1", "b", "disease"), image_line("p2", "a")],
    )
    manifest = load_manifest(path)
    assert len(manifest.records) == 2
    assert manifest.records[0].patient_id == "p1"
    assert manifest.records[0].labels == ("non-disease", "disease")
    assert manifest.image_resolution == 8
    assert manifest.root == tmp_path


def test_load_manifest_reports_malformed_line_number(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps(HEADER) + "\n{not json\n")
    with pytest.raises(ValidationError, match="line 2"):
        load_manifest(path)


def test_load_manifest_empty_file_means_missing_header(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text("")
    with pytest.raises(ValidationError, match="missing header"):
        load_manifest(path)


def test_load_manifest_rejects_unknown_labels(tmp_path):
    path = write_lines(tmp_path / "m.jsonl", [HEADER, image_line("p1", "a", "Edema")])
    with pytest.raises(ValidationError, match="invalid"):
        load_manifest(path)


# ---------------------------------------------------------------- partitioning


def test_partition_100_patients_fraction_point_two():
    manifest = synthetic_manifest(100, 12)
    attack, evaluation = partition_patients(manifest, 0.2, 10, seed=1)
    assert len(evaluation.patient_ids) == 20
    assert len(attack.patient_ids) == 80
    assert not attack.patient_ids & evaluation.patient_ids
    assert attack.patient_ids | evaluation.patient_ids == set(manifest.patient_ids)


def test_partition_requires_enough_qualifying_patients():
    manifest = synthetic_manifest(10, 1)
    with pytest.raises(ValidationError, match=">= 10 images"):
        partition_patients(manifest, 0.2, 10, seed=1)


def test_partition_is_seed_deterministic():
    manifest = synthetic_manifest(30, 12)
    a1, e1 = partition_patients(manifest, 0.2, 10, seed=5)
    a2, e2 = partition_patients(manifest, 0.2, 10, seed=5)
    _, e3 = partition_patients(manifest, 0.2, 10, seed=6)
    assert e1.patient_ids == e2.patient_ids
    assert e1.patient_ids != e3.patient_ids


def test_partition_rejects_degenerate_fractions():
    manifest = synthetic_manifest(10, 12)
    for fraction in (0.0, 1.0, 0.001):
        with pytest.raises(ValidationError):
            partition_patients(manifest, fraction, 10, seed=1)


def test_partition_images_filters_by_partition_and_label(tmp_path):
    path = write_lines(
        tmp_path / "m.jsonl",
        [HEADER, image_line("p1", "a"), image_line("p1", "b", "disease"), image_line("p2", "a")],
    )
    manifest = load_manifest(path)
    from jekyllbench.core import Partition

    part = Partition("attack", frozenset({"p1"}))
    assert partition_images(manifest, part) == [
        ("p1", "p1/a.png", "non-disease"),
        ("p1", "p1/b.png", "disease"),
    ]
    only_nd = partition_images(manifest, part, lambda label: label == "non-disease")
    assert only_nd == [("p1", "p1/a.png", "non-disease")]


def test_save_load_partitions_round_trip(tmp_path):
    manifest = synthetic_manifest(20, 12)
    attack, evaluation = partition_patients(manifest, 0.25, 10, seed=2)
    save_partitions(attack, evaluation, tmp_path / "p.json")
    a2, e2 = load_partitions(tmp_path / "p.json")
    assert a2.patient_ids == attack.patient_ids
    assert e2.patient_ids == evaluation.patient_ids


# ---------------------------------------------------------------- victim screening


def screen_with(monkeypatch, disease_probs, identity_preds):
    """Patch the classifier predictions build_victim_set consults."""
    monkeypatch.setattr(classifiers, "predict_disease", lambda model, img: disease_probs[img.tobytes()])
    monkeypatch.setattr(
        classifiers, "predict_identity", lambda model, img: (identity_preds[img.tobytes()], 1.0)
    )


def test_victim_screening_filter_rules(monkeypatch):
    images = {f"r{i}": np.full((1, 4, 4), i / 10.0, dtype=np.float32) for i in range(3)}
    candidates = [("p1", "r0"), ("p1", "r1"), ("p2", "r2")]
    disease_probs = {images["r0"].tobytes(): 0.1, images["r1"].tobytes(): 0.9, images["r2"].tobytes(): 0.2}
    identity_preds = {images["r0"].tobytes(): "p1", images["r1"].tobytes(): "p1", images["r2"].tobytes(): "p9"}
    screen_with(monkeypatch, disease_probs, identity_preds)

    victims = build_victim_set(candidates, None, None, lambda ref: images[ref])
    # r1 screens as diseased, r2 as the wrong patient; only r0 passes both
    assert victims.entries == (("p1", "r0"),)


def test_victim_screening_errors_when_nothing_survives(monkeypatch):
    img = np.zeros((1, 4, 4), dtype=np.float32)
    screen_with(monkeypatch, {img.tobytes(): 0.99}, {img.tobytes(): "p1"})
    with pytest.raises(ValidationError, match="survived"):
        build_victim_set([("p1", "r0")], None, None, lambda ref: img)


def test_victim_set_requires_evaluation_source(tmp_path):
    with pytest.raises(ValidationError):
        VictimSet((("p1", "r0"),), source_partition="attack")
    victims = VictimSet((("p1", "a.png"), ("p2", "b.png")))
    victims.save(tmp_path / "v.json")
    assert VictimSet.load(tmp_path / "v.json") == victims


# ---------------------------------------------------------------- augmentation


def test_augment_index_zero_is_the_original():
    img = np.random.default_rng(0).uniform(-1, 1, (1, 12, 12)).astype(np.float32)
    out = augment(img, AugmentationSpec(target_count_per_patient=4), seed=3)
    assert len(out) == 4
    assert out[0] is img
    for variant in out[1:]:
        assert variant.shape == img.shape
        assert not np.array_equal(variant, img)


def test_augment_target_one_returns_only_original():
    img = np.zeros((1, 8, 8), dtype=np.float32)
    out = augment(img, AugmentationSpec(target_count_per_patient=1), seed=3)
    assert len(out) == 1


def test_augment_fixed_seed_reproduces_variants():
    img = np.random.default_rng(1).uniform(-1, 1, (1, 12, 12)).astype(np.float32)
    spec = AugmentationSpec(target_count_per_patient=3, ops=("random_rotation",))
    a = augment(img, spec, seed=11)
    b = augment(img, spec, seed=11)
    c = augment(img, spec, seed=12)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[1], c[1])


def test_augmentation_spec_validation():
    with pytest.raises(ValidationError):
        AugmentationSpec(target_count_per_patient=0)
    with pytest.raises(ValidationError):
        AugmentationSpec(target_count_per_patient=2, ops=("solarize",))


# ---------------------------------------------------------------- balancing


def test_upsample_minority_repeats_cyclically():
    balanced = upsample_minority({"A": list(range(10)), "B": ["x", "y", "z", "w"]})
    assert len(balanced["A"]) == 10
    assert balanced["B"] == ["x", "y", "z", "w", "x", "y", "z", "w", "x", "y"]


def test_upsample_minority_identity_when_balanced():
    classes = {"A": [1, 2], "B": [3, 4]}
    assert upsample_minority(classes) == classes


def test_upsample_minority_rejects_empty_class():
    with pytest.raises(ValidationError, match="empty"):
        upsample_minority({"A": [1], "B": []})


def test_manifest_loader_caches_repeated_refs(tmp_path, monkeypatch):
    from jekyllbench import ingest
    from jekyllbench.core import save_image

    img = np.zeros((1, 8, 8), dtype=np.float32)
    save_image(img, tmp_path / "a.png")
    manifest = DatasetManifest(
        (PatientRecord("p1", ("a.png",), ("non-disease",)),),
        ("non-disease",),
        8,
        root=tmp_path,
    )
    calls = []
    real_load = ingest.load_image
    monkeypatch.setattr(ingest, "load_image", lambda p: calls.append(p) or real_load(p))
    loader = manifest_loader(manifest)
    first = loader("a.png")
    second = loader("a.png")
    assert np.array_equal(first, second)
    assert len(calls) == 1
