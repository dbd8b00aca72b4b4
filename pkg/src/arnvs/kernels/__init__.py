"""Hot-kernel dispatch: compiled extension vs numpy fallback, chosen at import.

Selection is per kernel, following benchmarks/bench_kernels.py on a single
core: ray casting is loop-bound and the compiled kernel wins by an order of
magnitude, while attention is BLAS/SIMD-bound and the numpy path wins. Set
ARNVS_PURE_PYTHON=1 to force the fallback for everything; BACKEND reports
what is active.
"""

import os

from . import _pure

_FORCE_PURE = os.environ.get("ARNVS_PURE_PYTHON", "0") not in ("", "0")
try:
    from . import _core
except ImportError:
    _core = None

if _FORCE_PURE or _core is None:
    BACKEND = "pure"
    attention_forward = _pure.attention_forward
    trace_rays = _pure.trace_rays
else:
    BACKEND = "mixed"
    attention_forward = _pure.attention_forward  # BLAS + SIMD exp wins here
    trace_rays = _core.trace_rays


def backends():
    """All importable backends, keyed by name. Used by the benchmark."""
    out = {"pure": _pure}
    if _core is not None:
        out["compiled"] = _core
    return out
