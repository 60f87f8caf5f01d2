"""Kernel backend selection.

Imports the compiled Cython kernels when they were built, otherwise the
NumPy implementations. Setting STATM_PURE_PYTHON=1 forces the fallback,
which is also what ``benchmarks/bench_kernels.py`` uses to time both
paths in one process (it imports the modules directly).
"""

from __future__ import annotations

import os

if os.environ.get("STATM_PURE_PYTHON") == "1":
    from statm._kernels import _npkernels as _impl
else:
    try:
        from statm._kernels import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:
        from statm._kernels import _npkernels as _impl  # type: ignore[no-redef]

BACKEND = _impl.BACKEND

softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
relu_fwd = _impl.relu_fwd
relu_bwd = _impl.relu_bwd
sigmoid_fwd = _impl.sigmoid_fwd
sigmoid_bwd = _impl.sigmoid_bwd
tanh_fwd = _impl.tanh_fwd
tanh_bwd = _impl.tanh_bwd
softplus_fwd = _impl.softplus_fwd
softplus_bwd = _impl.softplus_bwd
