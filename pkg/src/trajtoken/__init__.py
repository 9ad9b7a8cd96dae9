"""trajtoken: hierarchical GPS trajectory tokenization and generation.

Quantizes GPS trajectories into discrete travel-pattern tokens with a
residual-quantized autoencoder, models the token sequences with a small
conditional autoregressive transformer, decodes tokens back to trajectories
over a road network, and evaluates generated data against real data with
point-, grid-, and road-level distribution metrics.
"""

from . import cli, config, geo, metrics, nn, patternlm, roadnet, rqvae, tokens, traj
from .config import PipelineConfig
from .geo import GridSpec, LonLat, Polyline
from .metrics import MetricsConfig, MetricsReport, evaluate
from .patternlm import LmConfig, LmVocab, PatternLm, generate, train_lm
from .roadnet import RoadNetwork, Route, build_synthetic_city, shortest_path
from .rqvae import PatternCode, RqvaeConfig, RqvaeModel, downsample_len, upsample_len
from .tokens import Vocabulary, decode_pattern_tokens, encode_pattern_tokens
from .traj import GpsTrajectory, RelativeLabels, make_labels, reconstruct_from_labels

__version__ = "0.1.0"

__all__ = [
    "cli",
    "config",
    "geo",
    "metrics",
    "nn",
    "patternlm",
    "roadnet",
    "rqvae",
    "tokens",
    "traj",
    "PipelineConfig",
    "GridSpec",
    "LonLat",
    "Polyline",
    "MetricsConfig",
    "MetricsReport",
    "evaluate",
    "LmConfig",
    "LmVocab",
    "PatternLm",
    "generate",
    "train_lm",
    "RoadNetwork",
    "Route",
    "build_synthetic_city",
    "shortest_path",
    "PatternCode",
    "RqvaeConfig",
    "RqvaeModel",
    "downsample_len",
    "upsample_len",
    "Vocabulary",
    "decode_pattern_tokens",
    "encode_pattern_tokens",
    "GpsTrajectory",
    "RelativeLabels",
    "make_labels",
    "reconstruct_from_labels",
    "__version__",
]
