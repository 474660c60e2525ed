"""Representation learning for short multi-vehicle traffic scenes.

Two autoencoder families embed scenarios into a shared-size latent space: a
3D convolutional autoencoder over spatio-temporal occupancy grids and a
sequential set autoencoder over per-frame participant sets. The latent
vectors feed hierarchical clustering, nearest-neighbor retrieval and a
cluster-vs-label agreement score; a synthetic highway generator with an
automatic maneuver labeler provides ground truth.
"""

from .grid_ae import GridAutoencoder, grid_forward, grid_loss
from .grids import GridConfig, SpatioTemporalGrid, rasterize, smooth_target
from .latent import (
    ClusterAssignment,
    EmbeddingRecord,
    EmbeddingTable,
    embed_dataset,
    hierarchical_cluster,
    majority_vote_assign,
    nearest_neighbors,
    pca_project,
    v_measure,
)
from .scenarios import (
    ClassLabel,
    FrameSet,
    Scenario,
    ScenarioFormatError,
    Trajectory,
    TrajectorySample,
    read_scenarios,
    resample_to_frames,
    validate_scenario,
    write_scenarios,
)
from .seqdspn import (
    DSPNConfig,
    SeqDSPN,
    SetEncoder,
    SetPrediction,
    dspn_decode,
    seqdspn_loss,
)
from .set_losses import chamfer_loss, hungarian_loss
from .synthetic import RANDOM_TRAFFIC, GeneratorConfig, auto_label, generate_dataset, generate_scenario
from .training import (
    TrainHyperparams,
    TrainingLog,
    train_grid_ae,
    train_seqdspn,
    train_val_split,
)

__version__ = "0.1.0"

__all__ = [
    "ClassLabel",
    "ClusterAssignment",
    "DSPNConfig",
    "EmbeddingRecord",
    "EmbeddingTable",
    "FrameSet",
    "GeneratorConfig",
    "GridAutoencoder",
    "GridConfig",
    "RANDOM_TRAFFIC",
    "Scenario",
    "ScenarioFormatError",
    "SeqDSPN",
    "SetEncoder",
    "SetPrediction",
    "SpatioTemporalGrid",
    "TrainHyperparams",
    "TrainingLog",
    "Trajectory",
    "TrajectorySample",
    "auto_label",
    "chamfer_loss",
    "dspn_decode",
    "embed_dataset",
    "generate_dataset",
    "generate_scenario",
    "grid_forward",
    "grid_loss",
    "hierarchical_cluster",
    "hungarian_loss",
    "majority_vote_assign",
    "nearest_neighbors",
    "pca_project",
    "rasterize",
    "read_scenarios",
    "resample_to_frames",
    "seqdspn_loss",
    "smooth_target",
    "train_grid_ae",
    "train_seqdspn",
    "train_val_split",
    "v_measure",
    "validate_scenario",
    "write_scenarios",
    "__version__",
]
