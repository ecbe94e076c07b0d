"""Multi-modal self-supervised pretraining and Cox survival prediction."""

__version__ = "0.1.0"
