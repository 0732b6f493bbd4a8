"""CSI fingerprint indoor localization: channel simulation, CRLB analysis,
fingerprint datasets, from-scratch neural networks and location estimators."""

from .config import ExperimentConfig, load_config
from .crlb import (
    CrlbResult,
    PerturbationPrior,
    PilotConfig,
    crlb_location,
    crlb_perturbed,
    fim_eta,
    fim_eta_numeric,
    scene_crlb,
    transform_matrix,
    transform_matrix_numeric,
)
from .dataset import (
    FingerprintDataset,
    MeasurementModel,
    RpGrid,
    augment_dataset,
    build_dataset,
    calibrate_phase,
    load_dataset,
    save_dataset,
    simulate_csi,
)
from .errors import CsilocError
from .geometry import (
    Area,
    ArrayConfig,
    Location,
    OfdmConfig,
    PathParams,
    Scene,
    channel_matrix,
    location_from_los,
    path_params_from_geometry,
    steering_vector,
)
from .localization import (
    evaluate,
    fuse_average,
    knn_localize,
    remove_outliers,
    sic_localize,
)
from .neural import Network, TrainConfig, build_table1, gradient_check, train

__version__ = "0.1.0"
