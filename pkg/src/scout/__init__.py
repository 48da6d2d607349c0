"""Zero-shot self-supervised denoising of 3D CT projection volumes."""
import os as _os

# the TBB layer shipped here is too old and numba warns on every import
_os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
