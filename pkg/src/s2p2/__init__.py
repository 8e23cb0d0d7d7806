"""State-space point processes: simulation, a small autodiff engine, the model, training and evaluation."""

from .events import Dataset, EventSequence, ParseError, ValidationError, load_jsonl, save_jsonl
from .model import S2P2Config, S2P2Model, condition, intensity_at, intensity_trace, log_likelihood

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "EventSequence",
    "ParseError",
    "ValidationError",
    "S2P2Config",
    "S2P2Model",
    "condition",
    "intensity_at",
    "intensity_trace",
    "load_jsonl",
    "log_likelihood",
    "save_jsonl",
]
