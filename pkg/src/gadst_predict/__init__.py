"""Visit-count forecasting on aligned Morton quadtrees with a geo-aware ConvLSTM."""

__version__ = "0.1.0"
