"""visf-export: dump vision-tower features and activation stacks to VISF files."""

__version__ = "0.1.0"

from .export import export, list_images, load_model, preprocess
from .visf import read_visf, write_visf

__all__ = ["export", "list_images", "load_model", "preprocess", "read_visf", "write_visf"]
