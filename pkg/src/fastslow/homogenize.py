"""Regime-dependent averaged drift and diffusion, packaged as a limit equation.

Depending on the regime, the averaged drift picks up corrector corrections
(the intermediate drift contracted with the state gradient of the auxiliary
solution, and/or the fast-varying slow drift contracted with its parameter
gradient), and the averaged squared diffusion is augmented by the
symmetrized stationary average of H (solution)^T before the matrix square
root is taken.

Field evaluation is lazy and memoized on a quantized lattice with
deterministic per-cell sub-seeds, because a limit simulation only visits a
narrow tube of slow states.
"""

from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import rng
from .corrector import (CorrectorQuery, grad_x_at, grad_y_at, gradients,
                        outer_product_HPhi, solve_poisson_fk, _field_at)
from .ergodic import (MeasureEnsemble, batch_se, centering_residual,
                      sample_invariant_measure)
from .errors import PSDFailure
from .model import CoupledSystem, Regime

Array = np.ndarray


@dataclass(frozen=True)
class Budgets:
    """Monte Carlo budgets for one averaged-coefficient evaluation."""

    invariant_samples: int = 20000
    invariant_burn_in: float = 10.0
    invariant_thinning: int = 5
    invariant_dt: float = 1e-3
    corrector_paths: int = 4000
    corrector_tmax: float = 8.0
    corrector_dt: float = 0.01
    grid_points: int = 21
    grid_pad: float = 0.75
    n_batches: int = 20
    delta_y: float | None = None


def psd_sqrt(M: Array, tol_psd: float | None = None) -> Array:
    """Symmetric PSD square root with small negative eigenvalues clamped.

    ``tol_psd`` defaults to 1e-6 * |trace|; an eigenvalue below -tol_psd
    raises :class:`PSDFailure` (the estimate is not a covariance).
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("expected a square matrix")
    scale = float(np.abs(M).max()) if M.size else 0.0
    if not np.allclose(M, M.T, atol=1e-8 * max(scale, 1.0)):
        raise ValueError("matrix is not symmetric")
    Ms = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(Ms)
    tol = 1e-6 * abs(float(np.trace(Ms))) if tol_psd is None else float(tol_psd)
    if w.min() < -tol:
        raise PSDFailure(
            f"eigenvalue {w.min():.3g} below -{tol:.3g}; increase the MC "
            "budget or check the diffusion non-degeneracy")
    wc = np.clip(w, 0.0, None)
    S = (V * np.sqrt(wc)) @ V.T
    return 0.5 * (S + S.T)


def _psd_sqrt_batch(cov: Array, tol_rel: float = 1e-6) -> Array:
    """Batched PSD square root for (n, d, d) covariance stacks."""
    d = cov.shape[-1]
    if d == 1:
        v = cov[..., 0, 0]
        tol = tol_rel * np.abs(v)
        if np.any(v < -tol):
            raise PSDFailure("negative scalar covariance in batch evaluation")
        return np.sqrt(np.clip(v, 0.0, None))[..., None, None]
    sym = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    w, V = np.linalg.eigh(sym)
    tr = np.trace(sym, axis1=-2, axis2=-1)
    if np.any(w[..., 0] < -tol_rel * np.abs(tr)):
        raise PSDFailure("negative covariance eigenvalue in batch evaluation")
    wc = np.sqrt(np.clip(w, 0.0, None))
    return (V * wc[..., None, :]) @ np.swapaxes(V, -1, -2)


def _needs(regime: Regime, want_drift: bool, want_diffusion: bool):
    gx = want_drift and regime in (Regime.R2, Regime.R4)
    gy = want_drift and regime in (Regime.R3, Regime.R4)
    vals = want_diffusion and regime in (Regime.R3, Regime.R4)
    return gx, gy, vals


def _phi_fields(system: CoupledSystem, f, t: float, y: Array,
                mu: MeasureEnsemble, budgets: Budgets, seed: int,
                need_gx: bool, need_gy: bool, need_vals: bool):
    """Solve the corrector for ``f`` on a sample-spanning grid and pull the
    requested fields back onto the stationary cloud."""
    if not (need_gx or need_gy or need_vals):
        return None
    if system.d1 > 3:
        raise NotImplementedError("corrector grids implemented for d1 <= 3")
    n_pts = budgets.grid_points if system.d1 == 1 else max(9, budgets.grid_points // 2)
    axes = tuple(
        np.linspace(mu.samples[:, j].min() - budgets.grid_pad,
                    mu.samples[:, j].max() + budgets.grid_pad, n_pts)
        for j in range(system.d1))
    query = CorrectorQuery.from_grid(
        axes, t=t, y=y, T_max=budgets.corrector_tmax,
        n_paths=budgets.corrector_paths, dt=budgets.corrector_dt,
        seed=seed, n_batches=budgets.n_batches)
    z = centering_residual(f, mu, t)
    fld = solve_poisson_fk(system, f, query, mode="corrector", centering_z=z)
    if need_gx or need_gy:
        fld = gradients(fld, want_grad_y=need_gy, delta_y=budgets.delta_y)
    out = {"field": fld, "z": z}
    if need_vals:
        out["phi_s"] = _field_at(fld, mu.samples)
    if need_gx:
        out["gx_s"] = grad_x_at(fld, mu.samples)
    if need_gy:
        out["gy_s"] = grad_y_at(fld, mu.samples)
    return out


def _drift_corrections(system: CoupledSystem, t: float, y: Array,
                       mu: MeasureEnsemble, phi: dict | None,
                       use_gx: bool, use_gy: bool) -> Array:
    n = mu.n_samples
    k = phi["field"].k if phi is not None else system.d2
    corr = np.zeros((n, k))
    if use_gx:
        cs = np.asarray(system.c(mu.samples, mu.y), dtype=np.float64)
        cs = np.broadcast_to(cs, (n, system.d1))
        corr = corr + np.einsum("nj,nkj->nk", cs, phi["gx_s"])
    if use_gy:
        Hs = np.asarray(system.H(t, mu.samples, mu.y), dtype=np.float64)
        Hs = np.broadcast_to(Hs, (n, system.d2))
        corr = corr + np.einsum("nj,nkj->nk", Hs, phi["gy_s"])
    return corr


@dataclass
class RegimeAverages:
    """Averaged coefficients at one (t, y) with Monte Carlo errors."""

    regime: Regime
    t: float
    y: Array
    fhat: Array | None
    fhat_se: Array | None
    ghat: Array | None
    cov: Array | None
    cov_se: Array | None
    diagnostics: dict


def regime_averages(system: CoupledSystem, regime: Regime, t: float, y,
                    budgets: Budgets = Budgets(), seed: int = 0,
                    want_drift: bool = True, want_diffusion: bool = True,
                    ) -> RegimeAverages:
    """Estimate the averaged drift/diffusion of the given regime at (t, y)."""
    if regime is Regime.UNCLASSIFIED:
        raise ValueError("cannot average an unclassified regime")
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    mu = sample_invariant_measure(
        system, y, burn_in=budgets.invariant_burn_in,
        n_samples=budgets.invariant_samples, thinning=budgets.invariant_thinning,
        dt=budgets.invariant_dt, seed=rng.derive_key(seed, rng.LANE_AUX, 11))
    need_gx, need_gy, need_vals = _needs(regime, want_drift, want_diffusion)
    phi = _phi_fields(system, system.H, t, y, mu, budgets,
                      rng.derive_key(seed, rng.LANE_AUX, 12),
                      need_gx, need_gy, need_vals)

    diags: dict = {"ess": mu.ess}
    if phi is not None:
        diags["centering_z"] = phi["z"]

    fhat = fhat_se = None
    if want_drift:
        Fv = np.asarray(system.F(t, mu.samples, mu.y), dtype=np.float64)
        Fv = np.broadcast_to(Fv, (mu.n_samples, system.d2)).copy()
        corr = _drift_corrections(system, t, y, mu, phi, need_gx, need_gy)
        vals = Fv + corr
        fhat = vals.mean(axis=0)
        se_mu = batch_se(vals)
        se_cor = np.zeros_like(fhat)
        if phi is not None and (need_gx or need_gy):
            se_cor = _correction_batch_se(system, t, mu, phi, need_gx, need_gy)
        fhat_se = np.sqrt(se_mu ** 2 + se_cor ** 2)

    ghat = cov = cov_se = None
    if want_diffusion:
        Gv = np.asarray(system.G(t, mu.samples, mu.y), dtype=np.float64)
        if Gv.ndim == 2:
            cov = Gv @ Gv.T
            cov_se = np.zeros_like(cov)
        else:
            GG = Gv @ np.swapaxes(Gv, -1, -2)
            cov = GG.mean(axis=0)
            cov_se = batch_se(GG.reshape(mu.n_samples, -1)).reshape(cov.shape)
        if need_vals:
            op = outer_product_HPhi(system, phi["field"], mu, t)
            cov = cov + op.matrix
            cov_se = np.sqrt(cov_se ** 2 + op.se ** 2)
            diags["antisym_norm"] = op.antisym_norm
        ghat = psd_sqrt(cov)

    return RegimeAverages(regime=regime, t=t, y=y, fhat=fhat, fhat_se=fhat_se,
                          ghat=ghat, cov=cov, cov_se=cov_se, diagnostics=diags)


def _correction_batch_se(system, t, mu, phi, use_gx, use_gy) -> Array:
    """Corrector-noise part of the drift SE via per-path-batch re-averaging."""
    fld = phi["field"]
    nb = fld.batch_means.shape[0]
    k = fld.k
    per_b = np.empty((nb, k))
    from dataclasses import replace  # noqa: PLC0415
    for b in range(nb):
        sub = {"field": fld}
        if use_gx:
            bf = replace(fld, values=fld.batch_means[b], grad_x=None,
                         grad_y=None, grad_y_batches=None)
            bf = _regrad(bf)
            sub["gx_s"] = grad_x_at(bf, mu.samples)
        if use_gy:
            bf2 = replace(fld, grad_y=fld.grad_y_batches[b])
            sub["gy_s"] = grad_y_at(bf2, mu.samples)
        per_b[b] = _drift_corrections(system, t, mu.y, mu, sub,
                                      use_gx, use_gy).mean(axis=0)
    return per_b.std(axis=0, ddof=1) / math.sqrt(nb)


def _regrad(fld):
    """Grid x-gradient of a batch-mean field (no coarseness re-check)."""
    from .corrector import _axis_central  # noqa: PLC0415
    gshape = fld.grid_shape
    d1 = len(gshape)
    vals_g = fld.values.reshape(gshape + (fld.k,))
    steps = [float(ax[1] - ax[0]) for ax in fld.query.grid_axes]
    gx = np.empty((fld.values.shape[0], fld.k, d1))
    for p in range(d1):
        gx[:, :, p] = _axis_central(vals_g, p, steps[p]).reshape(-1, fld.k)
    from dataclasses import replace  # noqa: PLC0415
    return replace(fld, grad_x=gx)


def averaged_drift(regime: Regime, system: CoupledSystem, t: float, y,
                   budgets: Budgets = Budgets(), seed: int = 0,
                   ) -> tuple[Array, Array]:
    """Averaged drift at (t, y) with its standard error."""
    ra = regime_averages(system, regime, t, y, budgets, seed,
                         want_drift=True, want_diffusion=False)
    return ra.fhat, ra.fhat_se


def averaged_diffusion(regime: Regime, system: CoupledSystem, t: float, y,
                       budgets: Budgets = Budgets(), seed: int = 0,
                       ) -> tuple[Array, Array]:
    """Averaged diffusion matrix at (t, y); the SE refers to the covariance."""
    ra = regime_averages(system, regime, t, y, budgets, seed,
                         want_drift=False, want_diffusion=True)
    return ra.ghat, ra.cov_se


def corrector_corrections(system: CoupledSystem, f, regime: Regime, t: float,
                          y, budgets: Budgets = Budgets(), seed: int = 0,
                          ) -> tuple[Array, Array]:
    """Stationary average of the regime's corrector functionals for a
    general centered integrand ``f`` (codomain k).

    Returns the (k,) vector that the rescaled time integral of ``f`` along
    coupled paths converges to per unit time, plus its standard error.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    use_gx = regime in (Regime.R2, Regime.R4)
    use_gy = regime in (Regime.R3, Regime.R4)
    if not (use_gx or use_gy):
        probe = np.asarray(f(t, np.zeros((2, system.d1)), y), dtype=np.float64)
        k = 1 if probe.ndim <= 1 else int(probe.shape[-1])
        return np.zeros(k), np.zeros(k)
    mu = sample_invariant_measure(
        system, y, burn_in=budgets.invariant_burn_in,
        n_samples=budgets.invariant_samples, thinning=budgets.invariant_thinning,
        dt=budgets.invariant_dt, seed=rng.derive_key(seed, rng.LANE_AUX, 11))
    phi = _phi_fields(system, f, t, y, mu, budgets,
                      rng.derive_key(seed, rng.LANE_AUX, 12),
                      use_gx, use_gy, False)
    vals = _drift_corrections(system, t, y, mu, phi, use_gx, use_gy)
    se_mu = batch_se(vals)
    se_cor = _correction_batch_se(system, t, mu, phi, use_gx, use_gy)
    return vals.mean(axis=0), np.sqrt(se_mu ** 2 + se_cor ** 2)


@dataclass(frozen=True)
class CachePolicy:
    """Quantization of the (t, y) plane for memoized field evaluation."""

    quantum: float = 1e-2
    interpolate: bool = False
    t_quantum: float | None = None

    @property
    def tq(self) -> float:
        return self.quantum if self.t_quantum is None else self.t_quantum


class CellField:
    """Thread-safe memo of a vector field on the quantized lattice.

    ``fn(t, y, cell_seed) -> 1-d array`` is evaluated once per cell at the
    cell center with a sub-seed derived from (master seed, cell index), so
    values do not depend on visit order or thread count.
    """

    def __init__(self, fn: Callable, d2: int, policy: CachePolicy, seed: int,
                 autonomous: bool):
        self._fn = fn
        self._d2 = d2
        self._policy = policy
        self._seed = seed
        self._autonomous = autonomous
        self._memo: dict[tuple, Array] = {}
        self._lock = threading.Lock()

    @property
    def n_cells(self) -> int:
        return len(self._memo)

    def _cell(self, key: tuple) -> Array:
        with self._lock:
            hit = self._memo.get(key)
            if hit is not None:
                return hit
            ti = 0 if self._autonomous else key[0]
            yi = key[1:]
            t_c = ti * self._policy.tq
            y_c = np.asarray(yi, dtype=np.float64) * self._policy.quantum
            cell_seed = rng.derive_key(self._seed, rng.LANE_CELL, ti, *yi)
            val = np.asarray(self._fn(t_c, y_c, cell_seed), dtype=np.float64)
            self._memo[key] = val
            return val

    def _keys_nearest(self, t: float, Y: Array) -> list[tuple]:
        ti = 0 if self._autonomous else int(round(t / self._policy.tq))
        yi = np.round(Y / self._policy.quantum).astype(np.int64)
        return [(ti, *map(int, row)) for row in yi]

    def eval_batch(self, t: float, Y: Array) -> Array:
        Y = np.asarray(Y, dtype=np.float64)
        if not self._policy.interpolate:
            keys = self._keys_nearest(t, Y)
            rows = [self._cell(k) for k in keys]
            return np.stack(rows, axis=0)
        return self._eval_interp(t, Y)

    def _eval_interp(self, t: float, Y: Array) -> Array:
        q = self._policy.quantum
        ti = 0 if self._autonomous else int(round(t / self._policy.tq))
        base = np.floor(Y / q).astype(np.int64)
        frac = Y / q - base
        out = None
        for offs in itertools.product((0, 1), repeat=Y.shape[1]):
            w = np.ones(Y.shape[0])
            for j, o in enumerate(offs):
                w = w * (frac[:, j] if o else 1.0 - frac[:, j])
            idx = base + np.asarray(offs, dtype=np.int64)
            rows = np.stack([self._cell((ti, *map(int, row))) for row in idx])
            contrib = w[:, None] * rows
            out = contrib if out is None else out + contrib
        return out

    def provenance(self) -> dict:
        return {
            "n_cells": self.n_cells,
            "quantum": self._policy.quantum,
            "interpolate": self._policy.interpolate,
            "seed": self._seed,
        }


class AveragedSDE:
    """Evaluable limit equation: drift and diffusion fields plus provenance."""

    def __init__(self, regime: Regime, d2: int, drift_batch: Callable,
                 diffusion_batch: Callable, provenance: Callable[[], dict]):
        self.regime = regime
        self.d2 = d2
        self._drift = drift_batch
        self._diffusion = diffusion_batch
        self._prov = provenance

    def drift_batch(self, t: float, Y: Array) -> Array:
        return self._drift(t, np.asarray(Y, dtype=np.float64))

    def diffusion_batch(self, t: float, Y: Array) -> Array:
        return self._diffusion(t, np.asarray(Y, dtype=np.float64))

    def Fhat(self, t: float, y) -> Array:
        return self.drift_batch(t, np.asarray(y, dtype=np.float64).reshape(1, -1))[0]

    def Ghat(self, t: float, y) -> Array:
        return self.diffusion_batch(t, np.asarray(y, dtype=np.float64).reshape(1, -1))[0]

    def provenance(self) -> dict:
        return self._prov()

    @classmethod
    def from_callables(cls, regime: Regime, d2: int, fhat, ghat) -> "AveragedSDE":
        """Wrap closed-form fields (mainly for tests and known limits)."""

        def drift(t, Y):
            return np.stack([np.asarray(fhat(t, y), dtype=np.float64).reshape(-1)
                             for y in Y])

        def diff(t, Y):
            return np.stack([np.asarray(ghat(t, y), dtype=np.float64)
                             .reshape(d2, d2) for y in Y])

        return cls(regime, d2, drift, diff, lambda: {"source": "callables"})


def build_limit_sde(regime: Regime, system: CoupledSystem,
                    budgets: Budgets = Budgets(),
                    cache_policy: CachePolicy = CachePolicy(),
                    seed: int = 0) -> AveragedSDE:
    """Limit equation whose fields lazily invoke the averaged estimators.

    Each lattice cell evaluates drift and covariance together (they share
    the invariant cloud and corrector solve) and caches the PSD square root.
    """
    d2 = system.d2

    def cell_fn(t_c: float, y_c: Array, cell_seed: int) -> Array:
        ra = regime_averages(system, regime, t_c, y_c, budgets, cell_seed)
        return np.concatenate([ra.fhat, ra.cov.ravel(), ra.ghat.ravel(),
                               ra.fhat_se, ra.cov_se.ravel()])

    field = CellField(cell_fn, d2, cache_policy, seed, system.autonomous)
    nF, nC = d2, d2 * d2

    def drift_batch(t, Y):
        rec = field.eval_batch(t, Y)
        return rec[:, :nF]

    def diffusion_batch(t, Y):
        rec = field.eval_batch(t, Y)
        if cache_policy.interpolate:
            cov = rec[:, nF:nF + nC].reshape(-1, d2, d2)
            return _psd_sqrt_batch(cov)
        return rec[:, nF + nC:nF + 2 * nC].reshape(-1, d2, d2)

    return AveragedSDE(regime, d2, drift_batch, diffusion_batch,
                       field.provenance)
