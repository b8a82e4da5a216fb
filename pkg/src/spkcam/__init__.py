"""Speaker-ID CNNs, interference augmentation, and LayerCAM-based analyses."""

__version__ = "0.1.0"
