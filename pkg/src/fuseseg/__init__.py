"""Two-stream chained PET/RTCT fusion segmentation on synthetic phantoms."""

__version__ = "0.1.0"
