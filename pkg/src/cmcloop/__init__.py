"""Loop-group construction of constant mean curvature surfaces from weighted graphs."""

import os

# BLAS thread count; must be set before numpy is first imported
_threads = os.environ.get("CMCLOOP_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

from .graph import WeightedGraph  # noqa: E402
from .loopgroup import LoopMatrix, iwasawa  # noqa: E402
from .wiener import LoopScalar  # noqa: E402

__all__ = ["LoopMatrix", "LoopScalar", "WeightedGraph", "iwasawa"]
__version__ = "0.1.0"
