"""Memory-budgeted volumetric tumor segmentation with an autoencoder-regularized U-Net."""

__version__ = "0.1.0"
