"""Pixel-wise adversarial training for semantic segmentation with weight averaging.

A small, numpy-only stack: a tape-based autograd core, a toy encoder-decoder
segmentator and discriminator, the adversarial/segmentation losses, SGD/Adam/SWA,
synthetic shape data, confusion-matrix metrics and an alternating trainer.
"""
import os

# BLAS thread count must be pinned before numpy is first imported.
_threads = os.environ.get("ADVERSEG_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

IGNORE = 255
