"""Character-sequence correction with stacked BLSTMs, plus a vehicle-counting core."""

from . import alphabet, classify, cnn, corrupt, evaluation, postproc, rnn, seq2seq, tensor, traffic
from .classify import SoftmaxClassifier
from .cnn import CharSequenceCNN
from .seq2seq import SequenceCorrector

__all__ = [
    "CharSequenceCNN",
    "SequenceCorrector",
    "SoftmaxClassifier",
    "alphabet",
    "classify",
    "cnn",
    "corrupt",
    "evaluation",
    "postproc",
    "rnn",
    "seq2seq",
    "tensor",
    "traffic",
]
