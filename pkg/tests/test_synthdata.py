import hashlib
from pathlib import Path

import numpy as np
import pytest

from jekyllbench.core import ValidationError, load_image, validate_manifest
from jekyllbench.synthdata import (
    NON_DISEASE_LABEL,
    ToyOracle,
    ToySpec,
    default_marker_bbox,
    generate_toy_dataset,
    marker_mean_difference,
    oracle_classify,
    render_image,
)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    spec = ToySpec(n_patients=6, images_per_patient=8, resolution=64)
    manifest, oracle_path = generate_toy_dataset(spec, 13, out)
    return spec, manifest, ToyOracle.load(oracle_path)


def tree_digest(root: Path) -> str:
    sha = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            sha.update(path.relative_to(root).as_posix().encode())
            sha.update(path.read_bytes())
    return sha.hexdigest()


def test_spec_validation_rejects_bad_values():
    with pytest.raises(ValidationError):
        ToySpec(n_patients=0, images_per_patient=8)
    with pytest.raises(ValidationError):
        ToySpec(n_patients=2, images_per_patient=8, stage_levels=(0.9, 0.5))


def test_generated_counts_and_manifest_validate(small_dataset):
    spec, manifest, _ = small_dataset
    assert len(manifest.records) == spec.n_patients
    total = sum(len(r.image_refs) for r in manifest.records)
    assert total == spec.n_patients * spec.images_per_patient
    assert validate_manifest(manifest) == []


def test_same_seed_twice_is_byte_identical(tmp_path):
    spec = ToySpec(n_patients=3, images_per_patient=4, resolution=32)
    generate_toy_dataset(spec, 5, tmp_path / "a")
    generate_toy_dataset(spec, 5, tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_different_seeds_differ(tmp_path):
    spec = ToySpec(n_patients=2, images_per_patient=4, resolution=32)
    generate_toy_dataset(spec, 5, tmp_path / "a")
    generate_toy_dataset(spec, 6, tmp_path / "b")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "b")


def test_half_split_and_stage_cycling(small_dataset):
    spec, manifest, oracle = small_dataset
    record = manifest.records[0]
    half = spec.images_per_patient // 2
    assert all(label == NON_DISEASE_LABEL for label in record.labels[:half])
    stages = [oracle.entry(ref)["stage"] for ref in record.image_refs[half:]]
    assert stages == [1, 2, 1, 2]


def test_pixel_statistic_oracle_separates_labels_perfectly(small_dataset):
    """The additive marker must dominate the center-vs-surround mean gap."""
    spec, manifest, oracle = small_dataset
    bbox = default_marker_bbox(spec.resolution, spec.marker_semiaxes)
    gaps = {True: [], False: []}
    for _, ref, label in manifest.iter_images():
        img = load_image(manifest.resolve(ref))
        gaps[label != NON_DISEASE_LABEL].append(marker_mean_difference(img, bbox))
    assert min(gaps[True]) > max(gaps[False])


def test_oracle_classify_returns_recorded_truth(small_dataset):
    _, manifest, oracle = small_dataset
    for pid, ref, label in manifest.iter_images():
        assert oracle_classify(oracle, ref) == (label, pid)


def test_oracle_rejects_foreign_image(small_dataset):
    _, _, oracle = small_dataset
    with pytest.raises(ValidationError):
        oracle.classify("images/p9999/i0000.png")


def test_stage_levels_strictly_increase_marker_brightness():
    spec = ToySpec(n_patients=1, images_per_patient=4, resolution=64, stage_levels=(0.3, 0.6, 0.9))
    bbox = default_marker_bbox(spec.resolution, spec.marker_semiaxes)
    means = []
    for stage in (1, 2, 3):
        img, _ = render_image(spec, 0, 0, 0, stage)
        means.append(marker_mean_difference(img, bbox))
    assert means[0] < means[1] < means[2]


def test_render_is_pure_and_repeatable():
    spec = ToySpec(n_patients=1, images_per_patient=2, resolution=32)
    a, bbox_a = render_image(spec, 9, 0, 1, 1)
    b, bbox_b = render_image(spec, 9, 0, 1, 1)
    assert np.array_equal(a, b)
    assert bbox_a == bbox_b


def test_recorded_bbox_contains_the_marker(small_dataset):
    spec, manifest, oracle = small_dataset
    diseased = [e for e in oracle.by_path.values() if e["stage"] > 0]
    assert diseased
    for entry in diseased[:10]:
        clean_ref = entry["path"]
        img = load_image(manifest.resolve(clean_ref))
        assert marker_mean_difference(img, entry["marker_bbox"]) > 0.1


def test_color_mode_keeps_red_channel_dominant(tmp_path):
    spec = ToySpec(n_patients=3, images_per_patient=4, resolution=32, color=True)
    manifest, _ = generate_toy_dataset(spec, 4, tmp_path)
    for _, ref, _ in manifest.iter_images():
        img = load_image(manifest.resolve(ref))
        assert img.shape[0] == 3
        r, g, b = img.reshape(3, -1).mean(axis=1)
        assert r > g > b


def test_marker_mean_difference_rejects_degenerate_bbox():
    img = np.zeros((1, 16, 16), dtype=np.float32)
    with pytest.raises(ValidationError):
        marker_mean_difference(img, [0, 0, 16, 16])
