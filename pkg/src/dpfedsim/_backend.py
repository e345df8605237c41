"""Numeric backend selection.

The package ships two interchangeable implementations of the quadratic
hot-path primitives and round loops:

* ``compiled`` -- a Cython extension (``dpfedsim._kernels``) that runs whole
  training loops without touching the interpreter; used automatically when
  the extension was built.
* ``pure`` -- numpy expressions, always available.

Each backend is internally bit-consistent: within one backend, a full run
equals stepping round by round, bitwise.  Across backends results agree to
rounding error only (BLAS and the naive C loops reduce in different
orders), which is why the backend is pinned per process, never mixed.

Set ``DPFEDSIM_BACKEND=pure`` or ``=compiled`` to override the default.
"""

from __future__ import annotations

import os
import types

import numpy as np


def _pure_quad_gradient(a_mat, b_vec, x):
    return a_mat @ x - b_vec


def _pure_quad_value(a_mat, b_vec, offset, x):
    return 0.5 * float(np.dot(x, a_mat @ x)) - float(np.dot(b_vec, x)) + offset


def _pure_sq_norm(v):
    return float(np.dot(v, v))


_PURE = types.SimpleNamespace(
    name="pure",
    quad_gradient=_pure_quad_gradient,
    quad_value=_pure_quad_value,
    sq_norm=_pure_sq_norm,
    run_fedavg_quad=None,
    run_scaffnew_quad=None,
)


def _compiled_namespace():
    from . import _kernels

    return types.SimpleNamespace(
        name="compiled",
        quad_gradient=_kernels.quad_gradient,
        quad_value=_kernels.quad_value,
        sq_norm=_kernels.sq_norm,
        run_fedavg_quad=_kernels.run_fedavg_quad,
        run_scaffnew_quad=_kernels.run_scaffnew_quad,
    )


def _select():
    forced = os.environ.get("DPFEDSIM_BACKEND", "").strip().lower()
    if forced not in ("", "pure", "compiled"):
        raise RuntimeError(
            f"DPFEDSIM_BACKEND={forced!r} not recognized (use 'pure' or 'compiled')"
        )
    if forced == "pure":
        return _PURE
    try:
        return _compiled_namespace()
    except ImportError:
        if forced == "compiled":
            raise RuntimeError(
                "DPFEDSIM_BACKEND=compiled but the _kernels extension is not built"
            ) from None
        return _PURE


impl = _select()
backend_name = impl.name
