"""Open-set semantic instance mapping from RGB-D sequences and per-frame detections."""

from .camera import CameraIntrinsics, Frame, Pose
from .detections import DetectionRecord, LabelMeasurement, LabelSpace
from .fusion import LikelihoodMatrix, SemanticBelief
from .pipeline import PipelineConfig, export_map, run_sequence
from .tsdf import GlobalTsdf

__all__ = [
    "CameraIntrinsics",
    "DetectionRecord",
    "Frame",
    "GlobalTsdf",
    "LabelMeasurement",
    "LabelSpace",
    "LikelihoodMatrix",
    "PipelineConfig",
    "Pose",
    "SemanticBelief",
    "export_map",
    "run_sequence",
]

__version__ = "0.1.0"
