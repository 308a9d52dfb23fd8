"""Scale-confined Gaussian splats anchored on multi-scaffold UV maps."""

__version__ = "0.1.0"

import warnings as _warnings

# numba probes TBB first and warns when the installed runtime is too old; it
# then falls back to another threading layer, which is all we need.
_warnings.filterwarnings("ignore", message="The TBB threading layer requires")
