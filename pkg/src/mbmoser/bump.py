"""Smooth radial cut-off built from ``w(t) = exp(-1/t)``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


# below this w is under 1e-304, and 1/t or t^2 would overflow or underflow
_T_MIN = 1.0 / 700


def _w(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > _T_MIN
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def _dw(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > _T_MIN
    out[pos] = np.exp(-1.0 / t[pos]) / t[pos] ** 2
    return out


def smoothstep(t):
    """``h(t) = w(t) / (w(t) + w(1-t))``: 0 for t <= 0, 1 for t >= 1."""
    a, b = _w(t), _w(1 - np.asarray(t, dtype=float))
    return a / (a + b)


def smoothstep_deriv(t):
    t = np.asarray(t, dtype=float)
    a, b = _w(t), _w(1 - t)
    da, db = _dw(t), _dw(1 - t)
    return (da * b + a * db) / (a + b) ** 2


@dataclass(frozen=True)
class BumpProfile:
    """Radial bump equal to 1 for ``r <= r_in`` and 0 for ``r >= r_out``."""

    r_in: float
    r_out: float

    def __post_init__(self):
        if not 0 <= self.r_in < self.r_out:
            raise ValueError("need 0 <= r_in < r_out")

    def _s(self, r):
        return (self.r_out - np.asarray(r, dtype=float)) / (self.r_out - self.r_in)

    def __call__(self, r):
        return smoothstep(self._s(r))

    def deriv(self, r):
        """d b / d r."""
        return -smoothstep_deriv(self._s(r)) / (self.r_out - self.r_in)
