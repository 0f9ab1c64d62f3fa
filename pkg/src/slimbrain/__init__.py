"""Atlas-free 4D fMRI representation learning on numpy.

A global masked-reconstruction transformer over patch time series scores
temporal windows; the most representative windows feed a sparse hierarchical
voxel encoder trained with a JEPA objective.
"""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, PipelineConfig, load_config
from .estimators import GlobalMAE, HieraJEPA, SLIMBrainEncoder, WindowSelector
from .probe import ProbeClassifier, ProbeRegressor
from .volume import Volume4D, load_volume, make_synthetic, save_volume

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "GlobalMAE",
    "HieraJEPA",
    "PipelineConfig",
    "ProbeClassifier",
    "ProbeRegressor",
    "SLIMBrainEncoder",
    "Volume4D",
    "WindowSelector",
    "load_checkpoint",
    "load_config",
    "load_volume",
    "make_synthetic",
    "save_checkpoint",
    "save_volume",
]

__version__ = "0.1.0"
