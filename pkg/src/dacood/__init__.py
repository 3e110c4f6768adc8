"""Out-of-distribution detection with an abstention class, plus baselines."""

__version__ = "0.1.0"
