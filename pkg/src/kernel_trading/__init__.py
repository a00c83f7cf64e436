"""Path-dependent mean-variance trading with signature-type kernels."""
import os as _os

# the TBB layer shipped in this environment is too old and numba warns about it
_os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
