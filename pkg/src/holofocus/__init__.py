"""Digital-holography autofocus: simulation, classical sweep, CNN/ViT classifiers."""

__version__ = "0.1.0"
