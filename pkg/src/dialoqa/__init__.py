"""Hierarchical transformer pre-training and span-based question answering
over multiparty dialogue, built from scratch on a float64 autodiff core."""

from .corpus import AnswerSpan, Dialogue, QAExample, Utterance
from .encoder import EncoderWeights, ModelConfig
from .metrics import MetricReport, PredictionRecord
from .tensor import Tensor
from .training import RunConfig

__version__ = "0.1.0"

__all__ = [
    "AnswerSpan",
    "Dialogue",
    "EncoderWeights",
    "MetricReport",
    "ModelConfig",
    "PredictionRecord",
    "QAExample",
    "RunConfig",
    "Tensor",
    "Utterance",
    "__version__",
]
