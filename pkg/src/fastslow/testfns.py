"""Bounded smooth observables for weak-error measurements.

Unbounded observables void the weak-error statements, so polynomials enter
only through smooth saturation: the quadratic saturates at scale 1e6
(negligible modification below |y| ~ 1e2) and the linear one at 1e3.
All functions map a (n, d2) batch of slow states to (n,).
"""

from __future__ import annotations

import numpy as np

_B_QUAD = 1.0e6
_B_LIN = 1.0e3


def phi_tanh(y: np.ndarray) -> np.ndarray:
    return np.tanh(y.sum(axis=-1))


def phi_tanh_shift(y: np.ndarray) -> np.ndarray:
    return np.tanh(2.0 * y.sum(axis=-1) + 1.0)


def phi_gauss(y: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * np.sum(y * y, axis=-1))


def phi_bump(y: np.ndarray) -> np.ndarray:
    return np.exp(-np.sum((y - 1.0) ** 2, axis=-1))


def phi_quadratic(y: np.ndarray) -> np.ndarray:
    r = np.sum(y * y, axis=-1)
    return _B_QUAD * (1.0 - np.exp(-r / _B_QUAD))


def phi_linear(y: np.ndarray) -> np.ndarray:
    return _B_LIN * np.tanh(y.sum(axis=-1) / _B_LIN)


PHI_LIBRARY = {
    "tanh": phi_tanh,
    "tanh_shift": phi_tanh_shift,
    "gauss": phi_gauss,
    "bump": phi_bump,
    "quadratic": phi_quadratic,
    "linear": phi_linear,
}


def get_phi(name: str):
    try:
        return PHI_LIBRARY[name]
    except KeyError:
        raise KeyError(f"unknown test function {name!r}; "
                       f"known: {sorted(PHI_LIBRARY)}") from None


# Centered integrands for the fluctuation experiments, selectable by name.
FLUCT_LIBRARY = {
    "x_minus_y": lambda t, x, y: x - y,
}
