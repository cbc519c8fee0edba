"""Edge-Boundary-Texture loss, its cross-entropy baselines and strict edge evaluation."""

__version__ = "0.1.0"
