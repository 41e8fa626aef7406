"""Slice-attention fusion for 3D volume classification, with attention-derived
3D explanation maps and atlas-region quantification."""
from .volume import Plane, SliceSequence, Volume3D, extract_slices, load_volume, prepare_slice, save_volume
from .phantom import PhantomDataset, PhantomSpec, generate_phantom_dataset
from .model import AttentionWeights, SliceAttentionNet, forward
from .evaluation import ConfusionMatrix, MetricsReport, compute_metrics
from .xai import AttentionMap3D, BinaryHeatmap, binarize, minmax_normalize, synthesize_map
from .regions import AtlasVolume, RegionStats, rank_report, region_stats
from .train import FoldSplit, TrainConfig, make_folds, train_model

__all__ = [
    "Plane", "SliceSequence", "Volume3D", "extract_slices", "load_volume", "prepare_slice",
    "save_volume", "PhantomDataset", "PhantomSpec", "generate_phantom_dataset",
    "AttentionWeights", "SliceAttentionNet", "forward", "ConfusionMatrix", "MetricsReport",
    "compute_metrics", "AttentionMap3D", "BinaryHeatmap", "binarize", "minmax_normalize",
    "synthesize_map", "AtlasVolume", "RegionStats", "rank_report", "region_stats",
    "FoldSplit", "TrainConfig", "make_folds", "train_model",
]

__version__ = "0.1.0"
