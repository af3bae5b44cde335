from .augment import AugmentationPolicy, augment
from .corpus import Corpus, make_corpus, read_manifest
from .raster import read_image, read_labels, write_image, write_labels
from .synth import SceneSpec, generate_scene
from .tta import tta_predict

__all__ = [
    "AugmentationPolicy",
    "Corpus",
    "SceneSpec",
    "augment",
    "generate_scene",
    "make_corpus",
    "read_image",
    "read_labels",
    "read_manifest",
    "tta_predict",
    "write_image",
    "write_labels",
]
