from __future__ import annotations

from typing import Sequence

import numpy as np

from fcx.errors import EmptyInput, ShapeMismatch


def variance_of(features: Sequence[np.ndarray] | np.ndarray) -> float:
    """E_x ||x - E[x]||^2 with every non-sample axis flattened.

    Accepts a list of per-sample arrays or a single array whose first axis
    indexes samples.
    """
    if isinstance(features, np.ndarray):
        arr = features
    else:
        if len(features) == 0:
            raise EmptyInput("variance of an empty sample set")
        shapes = {np.shape(f) for f in features}
        if len(shapes) != 1:
            raise ShapeMismatch(f"samples have differing shapes {sorted(shapes)}")
        arr = np.stack([np.asarray(f, dtype=np.float64) for f in features])
    if arr.shape[0] == 0:
        raise EmptyInput("variance of an empty sample set")
    flat = np.asarray(arr, dtype=np.float64).reshape(arr.shape[0], -1)
    centred = flat - flat.mean(axis=0)
    return float(np.mean(np.sum(centred * centred, axis=1)))


GRID_EXPONENT = -40
_HEADROOM_BITS = 44


def dyadic_grid(*arrays: np.ndarray) -> float:
    """Common power-of-two quantum for ``arrays``.

    ``2**-40`` unless the magnitudes are large enough to need a coarser grid;
    values on the grid stay below ``2**44`` quanta, so sums and differences of
    a few hundred of them are exact in float64.
    """
    top = max((float(np.max(np.abs(a))) for a in arrays if np.size(a)), default=0.0)
    exp = GRID_EXPONENT
    if top > 0:
        exp = max(exp, int(np.ceil(np.log2(top))) - _HEADROOM_BITS)
    return float(2.0 ** exp)


def snap(a: np.ndarray, quantum: float) -> np.ndarray:
    """Round to the nearest multiple of ``quantum`` (a power of two)."""
    return np.round(np.asarray(a, dtype=np.float64) / quantum) * quantum
