"""Short-term traffic-flow forecasting with neural networks, Gaussian processes
and graphical-lasso feature selection."""

from .data import FlowSeries, LinkId, RoadNetwork, SupervisedDataset
from .glasso import GlassoConfig, PrecisionEstimate
from .models import Approach, ForecastResult, RunSettings, run_approach

__all__ = [
    "Approach", "FlowSeries", "ForecastResult", "GlassoConfig", "LinkId", "PrecisionEstimate",
    "RoadNetwork", "RunSettings", "SupervisedDataset", "run_approach",
]
__version__ = "0.1.0"
