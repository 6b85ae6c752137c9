"""Semi-supervised grasp detection with a vector-quantized autoencoder."""

__version__ = "0.1.0"
