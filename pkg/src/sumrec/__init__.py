"""Sequential user matrix encoder, ranker, trainer and near-real-time serving."""

__version__ = "0.1.0"
