"""View-invariant latent-action pretraining and latent behavior cloning on
a synthetic multi-view control world."""

__version__ = "0.1.0"
