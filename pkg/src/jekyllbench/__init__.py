"""Disease-injection style-transfer attacks on medical-like images, with defenses.

The package trains an unpaired image-to-image translator whose objective is
augmented with frozen disease and identity classifiers, so that translated
images read as diseased while still reading as the original patient. It also
ships the evaluation metrics, a synthetic dataset generator, two detector
families, and an experiment harness that ties the pieces together.
"""

from .core import (
    DatasetManifest,
    ExperimentConfig,
    LossWeights,
    Partition,
    PatientRecord,
    ValidationError,
    WEIGHT_PRESETS,
    config_hash,
    load_image,
    save_image,
    seed_everything,
)

__version__ = "0.1.0"

__all__ = [
    "DatasetManifest",
    "ExperimentConfig",
    "LossWeights",
    "Partition",
    "PatientRecord",
    "ValidationError",
    "WEIGHT_PRESETS",
    "config_hash",
    "load_image",
    "save_image",
    "seed_everything",
    "__version__",
]
