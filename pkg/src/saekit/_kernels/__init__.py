"""Kernel backend selection.

The compiled Cython core is used when available; otherwise (or when
SAEKIT_PURE_PYTHON is set to a nonempty value) the pure-Python reference
implementation takes over.  Both backends implement the identical
algorithm and consume randomness in the same order, so they are
interchangeable draw for draw.
"""

import os

from . import _reference

if os.environ.get("SAEKIT_PURE_PYTHON"):
    _impl = _reference
    HAVE_COMPILED = False
else:
    try:
        from . import _core as _impl
        HAVE_COMPILED = True
    except ImportError:
        _impl = _reference
        HAVE_COMPILED = False

BACKEND = "compiled" if HAVE_COMPILED else "reference"

bb_cluster_logpmf = _impl.bb_cluster_logpmf
fill_cluster_loglik = _impl.fill_cluster_loglik
field_iteration = _impl.field_iteration
