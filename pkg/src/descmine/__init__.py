"""Local descriptor training with hard-negative mining and a list-wise AP loss."""

__version__ = "0.1.0"
