"""Zero-shot multimodal style transfer for upper-body gesture synthesis."""

__version__ = "0.1.0"
