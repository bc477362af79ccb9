"""Cross-modality MRI translation, pooled segmentation, and tumor grade
prediction with contrastive pretraining."""

__version__ = "0.1.0"

from .volume import LabeledVolume, Modality, Slab, Volume, extract_slabs, load_volume, resample, save_volume

__all__ = [
    "LabeledVolume",
    "Modality",
    "Slab",
    "Volume",
    "extract_slabs",
    "load_volume",
    "resample",
    "save_volume",
    "__version__",
]
