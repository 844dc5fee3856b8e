"""Backend selection for the convolution hot loops.

The compiled extension is preferred; set ``DEEN_PURE_PYTHON=1`` to force the
numpy fallback (the benchmark and the backend-parity tests do this).
"""

import os

from . import _im2col_py

BACKEND = "python"
im2col = _im2col_py.im2col
col2im = _im2col_py.col2im

if os.environ.get("DEEN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _im2col_c
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        im2col = _im2col_c.im2col
        col2im = _im2col_c.col2im
