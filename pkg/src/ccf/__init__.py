"""Channel features (hand-crafted or convolutional) with boosted forests,
for sliding-window detection and structured edge detection."""

__version__ = "0.1.0"

from .channels import ChannelStack, ConcatBackend, HogLuvBackend, compute_hogluv
from .convnet import ConvBackend, ConvNetSpec, LayerSpec, forward, load_weights, save_weights
from .detector import Detection, DetectorModel, detect, evaluate, load_model, nms, save_model, train_detector
from .edges import detect_edges, evaluate_edges, load_edge_model, save_edge_model, train_edge_forest
from .forest import BoostedForest, CandidateFeatureSpace, forest_score, load_forest, save_forest, train_realboost
from .image import ImagePlane, LabeledBox, load_image, save_image
from .pyramid import FeaturePyramid, PowerLawModel, build_pyramid, estimate_lambda, make_scale_grid

__all__ = [
    "ChannelStack", "ConcatBackend", "HogLuvBackend", "compute_hogluv",
    "ConvBackend", "ConvNetSpec", "LayerSpec", "forward", "load_weights", "save_weights",
    "Detection", "DetectorModel", "detect", "evaluate", "load_model", "nms", "save_model", "train_detector",
    "detect_edges", "evaluate_edges", "load_edge_model", "save_edge_model", "train_edge_forest",
    "BoostedForest", "CandidateFeatureSpace", "forest_score", "load_forest", "save_forest", "train_realboost",
    "ImagePlane", "LabeledBox", "load_image", "save_image",
    "FeaturePyramid", "PowerLawModel", "build_pyramid", "estimate_lambda", "make_scale_grid",
]
