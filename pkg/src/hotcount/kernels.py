"""Kernel selection.

The compiled extension is used when it imported cleanly; otherwise the
pure-Python kernels are used. Set ``HOTCOUNT_PURE_PYTHON=1`` to force the
fallback.
"""

from __future__ import annotations

import os

from hotcount import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("HOTCOUNT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from hotcount import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

fingerprint = _impl.fingerprint
fingerprints = _impl.fingerprints
locate_many = _impl.locate_many
update_many = _impl.update_many
estimate_many = _impl.estimate_many
mix64 = _pykernels.mix64
derive_seeds = _pykernels.derive_seeds

__all__ = [
    "BACKEND",
    "derive_seeds",
    "estimate_many",
    "fingerprint",
    "fingerprints",
    "locate_many",
    "mix64",
    "update_many",
]
