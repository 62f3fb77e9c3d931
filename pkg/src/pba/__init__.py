"""Population based augmentation: schedule search, replay and baselines."""

__version__ = "0.1.0"
