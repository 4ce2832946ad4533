"""matrec: construction-material recognition pipeline."""

__version__ = "0.1.0"

from .catalog import ClassCatalog, default_catalog, EXPECTED_COUNTS  # noqa: F401
from .dataset import (DatasetManifest, SplitManifest, attach_outliers,  # noqa: F401
                      make_splits, scan_dataset, verify_counts)
from .augment import AugmentConfig  # noqa: F401
from .backbone import BackboneSpec, load_backbone, toy_backbone  # noqa: F401
from .head import HeadSpec, Head, canonical_head_spec  # noqa: F401
from .train import TrainConfig, train_head, save_checkpoint, load_checkpoint  # noqa: F401
from .inference import TtaConfig, five_crop, material_argmax, predict_image  # noqa: F401
from .evaluation import ConfusionMatrix, EvalReport, evaluate, illumination_eval  # noqa: F401
from .bench import LatencyStats, time_single_image  # noqa: F401
