"""Dual-graph GCN forecasting of hourly EV charging demand."""

from .graph import AdjacencyMatrix, build_dem_adjacency, build_geo_adjacency, dtw_distance, haversine_km
from .ingest import PanelSet, ingest, load_panels, save_panels
from .metrics import MetricsReport, evaluate
from .regional import kmeans
from .synth import SynthConfig, generate
from .train import ExperimentConfig, make_windows, run_experiment

__version__ = "0.1.0"

__all__ = [
    "AdjacencyMatrix",
    "ExperimentConfig",
    "MetricsReport",
    "PanelSet",
    "SynthConfig",
    "build_dem_adjacency",
    "build_geo_adjacency",
    "dtw_distance",
    "evaluate",
    "generate",
    "haversine_km",
    "ingest",
    "kmeans",
    "load_panels",
    "make_windows",
    "run_experiment",
    "save_panels",
]
