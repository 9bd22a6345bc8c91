"""Transfer attacks with quantized substitute models, at desk scale."""

__version__ = "0.1.0"
