"""TF-Locoformer: TF-domain dual-path Transformer with convolutional local modeling."""

__version__ = "0.1.0"
