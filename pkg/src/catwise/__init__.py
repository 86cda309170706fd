"""Category-wise adversarial attacks for heatmap-based anchor-free detectors.

Sparse (coordinate-minimal) and dense (sign-step, optionally masked) attacks
that suppress every target pixel of every object category at once, plus a
desk-scale toy detector, synthetic shapes data, and an evaluation harness
covering attack strength, perceptibility, and transferability.
"""

from .data import Annotation, DatasetConfig, Sample, generate_synthetic_dataset
from .dense import (
    AttackMask,
    DenseAttackConfig,
    SaliencyMapSet,
    category_gradient,
    dca,
    generate_local_mask,
    generate_semantic_mask,
    global_perturbation,
)
from .detector import ToyCenterNet, TorchDetectorOracle, build_oracle
from .evaluation import (
    EvalReport,
    JpegTransferReport,
    TransferReport,
    UndefinedMetricError,
    asr,
    atr,
    jpeg_roundtrip,
    jpeg_transfer_eval,
    map_score,
    perturbation_norms,
    transfer_eval,
)
from .oracle import (
    Detection,
    DetectorOracle,
    FeatureActivation,
    HeatmapStack,
    InputShapeError,
    UnknownLayerError,
    decode_detections,
)
from .results import AttackResult, save_attack_result
from .sparse import (
    BoundaryNormal,
    CwdfResult,
    DegenerateBoundaryError,
    DegenerateGradientError,
    SparseAttackConfig,
    approx_boundary,
    cwdf,
    linear_solver,
    sca,
)
from .targets import (
    CategoryTargetSets,
    TargetPixel,
    build_target_sets,
    build_target_sets_from_stack,
    prune_all_sets,
    remove_pixels,
    select_highest_set,
)
from .training import (
    TrainConfig,
    TrainingDivergedError,
    load_checkpoint,
    save_checkpoint,
    train_toy_detector,
)

__version__ = "0.1.0"
