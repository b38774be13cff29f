"""densemae: dense masked-autoencoder pretraining and event-level
evaluation for single-band thermal anomaly segmentation, built on a
small numpy autograd engine."""

__version__ = "0.1.0"
