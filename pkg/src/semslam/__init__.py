"""Object-level semantic SLAM with oracle-supervised landmark refinement."""

from .association import AssociationConfig, Detection, associate_frame
from .evaluation import MatchConfig, ape, landmark_prf
from .geometry import CameraIntrinsics, Pose
from .graph import FactorGraph, NoiseModel, OptimizerConfig
from .pipeline import Frame, PipelineConfig, RunResult, SlamPipeline, run_scenario
from .semantics import ConfusionMatrix, LabelDatabase, Landmark, NGramEmbedding, Status

__all__ = [
    "AssociationConfig", "CameraIntrinsics", "ConfusionMatrix", "Detection", "FactorGraph", "Frame",
    "LabelDatabase", "Landmark", "MatchConfig", "NGramEmbedding", "NoiseModel", "OptimizerConfig",
    "PipelineConfig", "Pose", "RunResult", "SlamPipeline", "Status", "ape", "associate_frame",
    "landmark_prf", "run_scenario",
]
__version__ = "0.1.0"
