"""GAS-MIL: group-aggregative Max-Min multi-instance learning on feature bags."""

from .bagio import FeatureBag, GroupLayout, Manifest, SplitSpec, sample_or_pad, stratified_split, synth_generate
from .baselines import AbMil, BaselineConfig, Chowder, build_model, chowder_forward
from .checkpoint import load_checkpoint, save_checkpoint
from .kernels import BACKEND as KERNEL_BACKEND
from .metrics import MetricsReport, metrics_report
from .model import GasMil, GasMilConfig, assemble_d, max_min_select, predict_label
from .training import TrainConfig, TrainLog, evaluate_split, fit

__version__ = "0.1.0"

__all__ = [
    "AbMil",
    "BaselineConfig",
    "Chowder",
    "FeatureBag",
    "GasMil",
    "GasMilConfig",
    "GroupLayout",
    "KERNEL_BACKEND",
    "Manifest",
    "MetricsReport",
    "SplitSpec",
    "TrainConfig",
    "TrainLog",
    "assemble_d",
    "build_model",
    "chowder_forward",
    "evaluate_split",
    "fit",
    "load_checkpoint",
    "max_min_select",
    "metrics_report",
    "predict_label",
    "sample_or_pad",
    "save_checkpoint",
    "stratified_split",
    "synth_generate",
]
