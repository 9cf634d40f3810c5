"""cognatekit: trainable, language-agnostic cognate detection.

Shared character n-gram encoder, Siamese morphology pretraining, and a
cognate detector with supervised, weakly-supervised, and fully unsupervised
(clustering self-training) regimes, plus dataset and evaluation machinery.
"""

__version__ = "0.1.0"

from . import data, detector, encoder, evaluation, morphology, numerics, pipeline  # noqa: F401
