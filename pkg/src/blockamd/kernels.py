"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise, or when
``BLOCKAMD_PURE_PYTHON=1`` is set, the pure-Python versions are used.  Both
expose ``ctc_alpha_beta``, ``prefix_extend`` and ``edit_distance``.
"""

import os

from . import _pykernels

python_backend = _pykernels
compiled_backend = None

try:
    from . import _ckernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

if compiled_backend is not None and os.environ.get("BLOCKAMD_PURE_PYTHON", "") not in ("1", "true"):
    backend = compiled_backend
    BACKEND_NAME = "cython"
else:
    backend = _pykernels
    BACKEND_NAME = "python"

ctc_alpha_beta = backend.ctc_alpha_beta
prefix_extend = backend.prefix_extend
edit_distance = backend.edit_distance
