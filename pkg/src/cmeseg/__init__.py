"""cmeseg: retinal-OCT edema segmentation built from first principles.

An FCN-8 network with hand-written forward/backward passes, fully
connected CRF refinement via mean-field inference, block-matching
speckle denoising, and a reproducible train/evaluate harness.
"""

__version__ = "0.1.0"

from .kernels import active_backend, use_backend

__all__ = ["active_backend", "use_backend", "__version__"]
