"""Domain-adversarial density-map estimation for object counting.

Trains a counting network (encoder-decoder with skip connections) on a
labeled source domain while adapting, without target labels, to a shifted
target domain via a domain classifier behind a gradient reversal layer.
"""

from adacount.core import (
    Dataset,
    DensityMap,
    DomainTag,
    DotAnnotationSet,
    Image,
    Sample,
    split_train_val,
)

__version__ = "0.1.0"

__all__ = [
    "Image",
    "DotAnnotationSet",
    "DensityMap",
    "DomainTag",
    "Sample",
    "Dataset",
    "split_train_val",
    "__version__",
]
