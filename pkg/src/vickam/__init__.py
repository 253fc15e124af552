"""Prototype-guided action maps for weakly supervised group activity recognition."""

__version__ = "0.1.0"

from .errors import FormatError, NumericError, ShapeError, UsageError, VickamError  # noqa: E402
from .estimators import ActionMapTransformer, KnowledgeExtractor, VicKAMClassifier  # noqa: E402
from .fftcorr import gen_action_maps, xcorr_fft, xcorr_naive  # noqa: E402
from .prototypes import BoxAnnotation, PrototypeBank, build_prototypes, roi_pool  # noqa: E402
from .relmaps import AffineTransform, RelationMaps, stamp_relation_maps  # noqa: E402
from .tensors import read_tensor, seeded_fill, write_tensor  # noqa: E402

__all__ = [
    "ActionMapTransformer", "AffineTransform", "BoxAnnotation", "FormatError", "KnowledgeExtractor",
    "NumericError", "PrototypeBank", "RelationMaps", "ShapeError", "UsageError", "VicKAMClassifier",
    "VickamError", "build_prototypes", "gen_action_maps", "read_tensor", "roi_pool", "seeded_fill",
    "stamp_relation_maps", "write_tensor", "xcorr_fft", "xcorr_naive",
]
