"""Thread-constrained dialogue quadruple extraction."""

from .config import PipelineConfig, SyntheticSpec
from .dialogue import Dialogue, Quadruple, Sentiment, Utterance, load_dialogues, parse_dialogue
from .model import TCDAModel, Vocab, prepare
from .synth import gen_synthetic
from .train import load_model, run_ablation, train

__version__ = "0.1.0"

__all__ = [
    "Dialogue",
    "PipelineConfig",
    "Quadruple",
    "Sentiment",
    "SyntheticSpec",
    "TCDAModel",
    "Utterance",
    "Vocab",
    "gen_synthetic",
    "load_dialogues",
    "load_model",
    "parse_dialogue",
    "prepare",
    "run_ablation",
    "train",
]
