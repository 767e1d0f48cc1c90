"""Central finite differences for checking the analytic gradients."""

import numpy as np

from .model import ModelParams

FD_STEP = 1e-5


def central_differences(loss_fn, params: ModelParams, h: float = FD_STEP,
                        extrapolate: bool = False) -> np.ndarray:
    """Numerical gradient of ``loss_fn(params) -> float``, one coordinate at a time.

    With ``extrapolate`` the O(h^2) truncation term is cancelled by Richardson
    extrapolation over steps ``h`` and ``h / 2``. Sharp softmaxes (small
    temperatures) have large third derivatives, which otherwise dominate.
    """
    if extrapolate:
        coarse = central_differences(loss_fn, params, h)
        fine = central_differences(loss_fn, params, h / 2)
        return (4 * fine - coarse) / 3
    base = params.vector
    out = np.zeros(params.size)
    for i in range(params.size):
        e = np.zeros(params.size)
        e[i] = h
        out[i] = (loss_fn(params.with_vector(base + e)) - loss_fn(params.with_vector(base - e))) / (2 * h)
    return out


def max_relative_error(analytic, numeric, floor_ratio: float = 1e-3) -> float:
    """Max over entries of ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` is ``floor_ratio`` times the largest gradient entry; round-off in
    the difference quotient is absolute, so entries far below the gradient's
    scale cannot be resolved relatively.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor_ratio * scale)
    return float(np.max(np.abs(analytic - numeric) / denom))
