"""Pose-guided graph convolutional networks for skeleton action recognition."""
from .attention import PoseGuidedAttention, dynamic_affinity, fuse, vanilla_affinity
from .estimator import PGGCNClassifier, ViewAligner
from .graph import SkeletonGraph, build_ntu_graph, chain_graph, normalize_adjacency
from .model import PGGCNConfig, PGGCNModel, ablation_build, preprocess_substreams
from .tensor import Param, finite_difference_check

__version__ = "0.1.0"

__all__ = [
    "PGGCNClassifier", "PGGCNConfig", "PGGCNModel", "Param", "PoseGuidedAttention", "SkeletonGraph",
    "ablation_build", "build_ntu_graph", "chain_graph", "dynamic_affinity",
    "finite_difference_check", "fuse", "normalize_adjacency", "preprocess_substreams",
    "vanilla_affinity", "ViewAligner",
]
