"""Kernel backend selection.

The compiled extension (``fairdiv._kernels``, built from Cython) is used when
importable; otherwise the pure-Python/numpy fallback takes over.  Set
``FAIRDIV_PURE=1`` to force the fallback, e.g. for benchmarking or debugging.
"""

from __future__ import annotations

import os

from fairdiv import _pure

if os.environ.get("FAIRDIV_PURE"):
    _impl = _pure
else:
    try:
        from fairdiv import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _pure


def backend_name() -> str:
    return _impl.BACKEND


pr_run = _impl.pr_run
assign_utilitarian = _impl.assign_utilitarian
assign_por = _impl.assign_por
assign_pocr = _impl.assign_pocr
assign_uniform = _impl.assign_uniform
assign_round_robin = _impl.assign_round_robin
