"""Self-loop iterative fusion of interaction, feature and knowledge graphs for
multimodal recommendation."""

from slifmr.config import TrainConfig, resolve
from slifmr.kernels import BACKEND
from slifmr.training import evaluate, load_bundle, load_run, train

__all__ = ["BACKEND", "TrainConfig", "evaluate", "load_bundle", "load_run", "resolve", "train"]
__version__ = "0.1.0"
