"""Restore backdoor triggers from image classifiers and flag infected classes."""
from .data import LabeledDataset, TriggerSpec, generate_synthetic, poison, stamp
from .detector import DetectorConfig, TriggerCandidate, patch_unlearning, scan_all_classes, solve_for_target
# the judge() function is not re-exported: it would shadow the judge submodule
from .judge import DetectionReport, correctness, fidelity, mad_outliers, quality
from .model import Network, TrainConfig, build, desk_architecture, load, save, train

__version__ = "0.1.0"

__all__ = [
    "DetectionReport", "DetectorConfig", "LabeledDataset", "Network", "TrainConfig", "TriggerCandidate",
    "TriggerSpec", "build", "correctness", "desk_architecture", "fidelity", "generate_synthetic",
    "load", "mad_outliers", "patch_unlearning", "poison", "quality", "save", "scan_all_classes",
    "solve_for_target", "stamp", "train",
]
