"""Scene-graph relation pipeline with scene-object attention, head-to-tail
codeword knowledge transfer, long-tail feature calibration, and the standard
Recall@K evaluation protocol, runnable end-to-end on synthetic data."""

from .autodiff import Tensor, no_grad
from .geometry import BoundingBox
from .model import ModelDims, ModelParams, Toggles
from .data import Dataset, GeneratorConfig, SceneSample, generate
from .training import TrainConfig, fit, ablate
from .evaluation import MetricsReport, evaluate

__version__ = "0.1.0"
