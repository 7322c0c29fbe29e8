"""End-to-end experiments: weak-error rate studies and fluctuation diagnostics.

The weak-error study simulates the coupled ensemble at each eps and the
limit ensemble once (it does not depend on eps), shares the slow-noise lane
between the two so the difference of means is low-variance, takes the sup
of |difference| over a fixed time grid, and fits a log-log slope over the
eps values whose error clears three standard errors.  Constants are not
reproducible, so everything here is about shapes: monotonicity and slope.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field as dc_field
from fractions import Fraction

import numpy as np

from . import __version__ as _pkg_version
from . import rng
from .errors import ConfigError, NotCentered, ThetaOutOfRange
from .ergodic import centering_residual, sample_invariant_measure
from .homogenize import Budgets, CachePolicy, CellField, build_limit_sde, \
    corrector_corrections
from .model import CoupledSystem, Regime, ScaleSchedule, classify_regime, \
    _as_fraction
from .presets import get_system
from .simulate import PathConfig, integrate_coupled, integrate_limit
from .testfns import FLUCT_LIBRARY, get_phi

Array = np.ndarray

CONVERGE_CSV_HEADER = ("eps,t,phi,err,se,sup_err,theoretical_exponent,"
                       "fitted_slope,slope_ci_lo,slope_ci_hi")
LLN_CSV_HEADER = "kind,eps,comp,value,se,bound_shape"
CLT_CSV_HEADER = "kind,eps,comp,lhs,correction,residual,se,bound_shape"


def _fmt(x) -> str:
    return repr(float(x))


@dataclass(frozen=True)
class RateResult:
    """Dominant eps-exponent of the weak-error bound plus its term breakdown."""

    regime: Regime
    exponent: Fraction
    terms: dict
    warning: str | None = None


def theoretical_rate(regime: Regime, schedule: ScaleSchedule, theta) -> RateResult:
    """Exponent of the dominant bound term for the regime at smoothness theta."""
    th = _as_fraction(theta)
    a, b, g = schedule.exponents
    if regime in (Regime.R1, Regime.R2):
        if not 0 < th <= 2:
            raise ThetaOutOfRange("theta must lie in (0, 2] for regimes 1-2")
    elif regime in (Regime.R3, Regime.R4):
        if not 0 < th <= 1:
            raise ThetaOutOfRange("theta must lie in (0, 1] for regimes 3-4")
    else:
        raise ValueError("cannot rate an unclassified regime")

    if regime is Regime.R1:
        terms = {"alpha^theta/gamma": th * a - g,
                 "alpha^2/gamma^2": 2 * a - 2 * g,
                 "alpha^2/(beta*gamma)": 2 * a - b - g}
    elif regime is Regime.R2:
        terms = {"alpha^theta/gamma": th * a - g,
                 "alpha^2/gamma^2": 2 * a - 2 * g,
                 "alpha^2/beta": 2 * a - b}
    elif regime is Regime.R3:
        terms = {"alpha^theta": th * a, "alpha/beta": a - b}
    else:
        terms = {"alpha^theta": th * a}

    warning = None
    if regime in (Regime.R1, Regime.R2) and th * a - g <= 0:
        warning = ("alpha^theta/gamma does not vanish for these exponents; "
                   "the bound is not guaranteed to shrink")
        warnings.warn(warning, stacklevel=2)
    return RateResult(regime=regime, exponent=min(terms.values()), terms=terms,
                      warning=warning)


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved configuration for the harness experiments."""

    system: CoupledSystem
    system_name: str
    schedule: ScaleSchedule
    theta: Fraction
    eps_list: tuple[float, ...]
    T: float = 1.0
    time_grid_n: int = 11
    phi_names: tuple[str, ...] = ("tanh",)
    x0: tuple[float, ...] = (0.0,)
    y0: tuple[float, ...] = (0.5,)
    dt_slow: float = 0.01
    micro_substeps: int = 10
    paths_coupled: int = 20000
    paths_limit: int | None = None
    budgets: Budgets = dc_field(default_factory=Budgets)
    cache: CachePolicy = dc_field(default_factory=CachePolicy)
    seed: int = 0
    out_dir: str | None = None
    chunk_size: int = 8192
    workers: int = 1

    def __post_init__(self):
        eps = tuple(float(e) for e in self.eps_list)
        if not eps or any(not 0 < e < 1 for e in eps):
            raise ConfigError("eps_list entries must lie in (0, 1)")
        if any(e2 >= e1 for e1, e2 in zip(eps, eps[1:])):
            raise ConfigError("eps_list must be strictly decreasing")
        object.__setattr__(self, "eps_list", eps)
        if self.T <= 0:
            raise ConfigError("T must be positive")
        if self.time_grid_n < 2:
            raise ConfigError("time_grid_n must be >= 2")
        for name in self.phi_names:
            get_phi(name)
        object.__setattr__(self, "theta", _as_fraction(self.theta))

    @property
    def time_grid(self) -> tuple[float, ...]:
        n = self.time_grid_n
        k = max(1, int(round(self.T / self.dt_slow)))
        nodes = [round(i * (k / (n - 1))) * (self.T / k) for i in range(n)]
        return tuple(nodes)

    @property
    def regime(self) -> Regime:
        return classify_regime(self.schedule)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        d = dict(d)
        name = d.pop("preset", None) or d.pop("system_id", None)
        if not name:
            raise ConfigError("config needs 'preset' or 'system_id'")
        try:
            system = get_system(name)
        except KeyError as e:
            raise ConfigError(str(e)) from None
        try:
            exps = d.pop("exponents")
            schedule = ScaleSchedule(*[_as_fraction(q) for q in exps])
        except KeyError:
            raise ConfigError("config needs 'exponents': [a, b, g]") from None
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad 'exponents': {e}") from None

        budgets_d = d.pop("budgets", {})
        if not isinstance(budgets_d, dict):
            raise ConfigError("'budgets' must be an object")
        paths_coupled = int(budgets_d.pop("paths_coupled", 20000))
        paths_limit = budgets_d.pop("paths_limit", None)
        bkw = {}
        if "paths_corrector" in budgets_d:
            bkw["corrector_paths"] = int(budgets_d.pop("paths_corrector"))
        if "invariant_samples" in budgets_d:
            bkw["invariant_samples"] = int(budgets_d.pop("invariant_samples"))
        for key in list(budgets_d):
            if key in Budgets.__dataclass_fields__:
                bkw[key] = budgets_d.pop(key)
        if budgets_d:
            raise ConfigError(f"unknown budget fields: {sorted(budgets_d)}")

        cache = CachePolicy(quantum=float(d.pop("quantum", 1e-2)),
                            interpolate=bool(d.pop("interpolate", False)))
        kwargs = dict(
            system=system, system_name=name, schedule=schedule,
            theta=d.pop("theta", 1), eps_list=tuple(d.pop("eps_list", ())),
            budgets=Budgets(**bkw), cache=cache,
            paths_coupled=paths_coupled,
            paths_limit=None if paths_limit is None else int(paths_limit),
        )
        if "phi" in d:
            kwargs["phi_names"] = tuple(d.pop("phi"))
        for key in ("T", "time_grid_n", "dt_slow", "micro_substeps", "x0", "y0",
                    "seed", "out_dir", "chunk_size", "workers"):
            if key in d:
                kwargs[key] = d.pop(key)
        if "x0" in kwargs:
            kwargs["x0"] = tuple(np.atleast_1d(kwargs["x0"]).astype(float))
        if "y0" in kwargs:
            kwargs["y0"] = tuple(np.atleast_1d(kwargs["y0"]).astype(float))
        if d:
            raise ConfigError(f"unknown config fields: {sorted(d)}")
        try:
            return cls(**kwargs)
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(f"bad config value: {e}") from None

    def provenance(self) -> dict:
        return {
            "system": self.system_name,
            "exponents": [str(q) for q in self.schedule.exponents],
            "theta": str(self.theta),
            "eps_list": list(self.eps_list),
            "seed": self.seed,
            "paths_coupled": self.paths_coupled,
            "paths_limit": self.paths_limit or self.paths_coupled,
            "budgets": {k: getattr(self.budgets, k)
                        for k in Budgets.__dataclass_fields__},
            "versions": {"fastslow": _pkg_version,
                         "numpy": np.__version__,
                         "rng_backend": rng.backend_name()},
        }


@dataclass
class WeakErrorReport:
    """Per-(eps, t, phi) weak errors plus the fitted log-log slope."""

    config: ExperimentConfig
    regime: Regime
    time_grid: tuple[float, ...]
    err: Array          # (n_eps, n_t, n_phi)
    se: Array
    sup_err: Array      # (n_eps,)
    sup_se: Array
    rate: RateResult
    fitted_slope: float
    slope_ci: tuple[float, float]
    n_qualifying: int
    insufficient_signal: bool

    def to_csv(self, path) -> None:
        cfg = self.config
        with open(path, "w", newline="") as fh:
            fh.write(CONVERGE_CSV_HEADER + "\n")
            for i, eps in enumerate(cfg.eps_list):
                for j, t in enumerate(self.time_grid):
                    for p, name in enumerate(cfg.phi_names):
                        fh.write(",".join([
                            _fmt(eps), _fmt(t), name,
                            _fmt(self.err[i, j, p]), _fmt(self.se[i, j, p]),
                            _fmt(self.sup_err[i]),
                            _fmt(float(self.rate.exponent)),
                            _fmt(self.fitted_slope),
                            _fmt(self.slope_ci[0]), _fmt(self.slope_ci[1]),
                        ]) + "\n")

    def summary(self) -> dict:
        return {
            "status": "ok",
            "regime": str(self.regime),
            "theoretical_exponent": float(self.rate.exponent),
            "rate_terms": {k: float(v) for k, v in self.rate.terms.items()},
            "rate_warning": self.rate.warning,
            "eps": list(self.config.eps_list),
            "time_grid": list(self.time_grid),
            "phi": list(self.config.phi_names),
            "err": self.err.tolist(),
            "se": self.se.tolist(),
            "sup_err": self.sup_err.tolist(),
            "sup_se": self.sup_se.tolist(),
            "fitted_slope": self.fitted_slope,
            "slope_ci": list(self.slope_ci),
            "n_qualifying": self.n_qualifying,
            "insufficient_signal": self.insufficient_signal,
            "provenance": self.config.provenance(),
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _fit_loglog(eps: Array, sup_err: Array, sup_se: Array):
    """Least-squares slope of log(err) vs log(eps) over qualifying points."""
    mask = (sup_err > 3.0 * sup_se) & (sup_err > 0.0)
    n = int(mask.sum())
    if n < 3:
        return math.nan, (math.nan, math.nan), n, True
    x = np.log(eps[mask])
    z = np.log(sup_err[mask])
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, res, *_ = np.linalg.lstsq(A, z, rcond=None)
    slope = float(coef[0])
    if n > 2:
        ssr = float(res[0]) if res.size else float(((A @ coef - z) ** 2).sum())
        sxx = float(((x - x.mean()) ** 2).sum())
        stderr = math.sqrt(ssr / (n - 2) / sxx) if sxx > 0 else math.nan
    else:
        stderr = math.nan
    ci = (slope - 1.96 * stderr, slope + 1.96 * stderr)
    return slope, ci, n, False


def weak_error_experiment(cfg: ExperimentConfig) -> WeakErrorReport:
    """Weak errors against the regime limit over eps, with a rate fit."""
    regime = cfg.regime
    if regime is Regime.UNCLASSIFIED:
        raise ConfigError("the configured exponents do not fall in a regime")
    rate = theoretical_rate(regime, cfg.schedule, cfg.theta)
    grid = cfg.time_grid
    phis = [get_phi(name) for name in cfg.phi_names]
    n_lim = cfg.paths_limit or cfg.paths_coupled

    limit = build_limit_sde(regime, cfg.system, cfg.budgets, cfg.cache,
                            seed=rng.derive_key(cfg.seed, rng.LANE_AUX, 21))
    lim_res = integrate_limit(
        limit, cfg.y0, cfg.T, cfg.dt_slow, seed=cfg.seed, n_paths=n_lim,
        snapshot_times=grid, chunk_size=cfg.chunk_size, n_workers=cfg.workers)
    lim_vals = np.stack([np.stack([phi(lim_res.snapshots_slow[j])
                                   for j in range(len(grid))])
                         for phi in phis], axis=-1)  # (n_t, n_paths, n_phi)

    n_eps = len(cfg.eps_list)
    err = np.empty((n_eps, len(grid), len(phis)))
    se = np.empty_like(err)
    paired = n_lim == cfg.paths_coupled
    for i, eps in enumerate(cfg.eps_list):
        pc = PathConfig(T=cfg.T, dt_slow=cfg.dt_slow,
                        micro_substeps_per_alpha2=cfg.micro_substeps,
                        seed=cfg.seed, n_paths=cfg.paths_coupled,
                        snapshot_times=grid, chunk_size=cfg.chunk_size,
                        n_workers=cfg.workers)
        res = integrate_coupled(cfg.system, cfg.schedule, eps, cfg.x0, cfg.y0, pc)
        for j in range(len(grid)):
            for p, phi in enumerate(phis):
                v_eps = phi(res.snapshots_slow[j])
                v_lim = lim_vals[j, :, p]
                if paired:
                    d = v_eps - v_lim
                    err[i, j, p] = abs(float(d.mean()))
                    se[i, j, p] = float(d.std(ddof=1) / math.sqrt(d.shape[0]))
                else:
                    err[i, j, p] = abs(float(v_eps.mean() - v_lim.mean()))
                    se[i, j, p] = math.hypot(
                        float(v_eps.std(ddof=1) / math.sqrt(v_eps.shape[0])),
                        float(v_lim.std(ddof=1) / math.sqrt(v_lim.shape[0])))

    flat = err.reshape(n_eps, -1)
    arg = flat.argmax(axis=1)
    sup_err = flat[np.arange(n_eps), arg]
    sup_se = se.reshape(n_eps, -1)[np.arange(n_eps), arg]
    slope, ci, nq, weak = _fit_loglog(np.asarray(cfg.eps_list), sup_err, sup_se)
    return WeakErrorReport(
        config=cfg, regime=regime, time_grid=grid, err=err, se=se,
        sup_err=sup_err, sup_se=sup_se, rate=rate, fitted_slope=slope,
        slope_ci=ci, n_qualifying=nq, insufficient_signal=weak)


def lln_bound_shape(schedule: ScaleSchedule, theta, eps: float) -> float:
    """Shape of the time-integral fluctuation bound at eps."""
    th = float(_as_fraction(theta))
    al, be, ga = schedule.scales(eps)
    return al ** th + al ** min(th, 1.0) * (al / ga) + al * al / be


def clt_bound_shape(regime: Regime, schedule: ScaleSchedule, theta,
                    eps: float) -> float:
    """Shape of the rescaled-integral residual bound at eps, per regime."""
    th = float(_as_fraction(theta))
    al, be, ga = schedule.scales(eps)
    if regime is Regime.R1:
        return al ** th / ga + (al / ga) ** 2 + al * al / (be * ga)
    if regime is Regime.R2:
        return al ** th / ga + (al / ga) ** 2 + al * al / be
    if regime is Regime.R3:
        return al ** th + al / be
    if regime is Regime.R4:
        return al ** th
    raise ValueError("unclassified regime")


@dataclass
class FluctuationReport:
    """Per-eps fluctuation estimates for one centered integrand."""

    kind: str                      # "lln" or "clt"
    config: ExperimentConfig
    eps: tuple[float, ...]
    values: Array                  # lln: mean integral; clt: residual  (n_eps, k)
    se: Array                      # (n_eps, k)
    bounds: Array                  # (n_eps,)
    lhs: Array | None = None       # clt only: rescaled integral mean
    correction: Array | None = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            if self.kind == "lln":
                fh.write(LLN_CSV_HEADER + "\n")
                for i, eps in enumerate(self.eps):
                    for c in range(self.values.shape[1]):
                        fh.write(",".join([
                            "lln", _fmt(eps), str(c + 1),
                            _fmt(self.values[i, c]), _fmt(self.se[i, c]),
                            _fmt(self.bounds[i])]) + "\n")
            else:
                fh.write(CLT_CSV_HEADER + "\n")
                for i, eps in enumerate(self.eps):
                    for c in range(self.values.shape[1]):
                        fh.write(",".join([
                            "clt", _fmt(eps), str(c + 1),
                            _fmt(self.lhs[i, c]), _fmt(self.correction[i, c]),
                            _fmt(self.values[i, c]), _fmt(self.se[i, c]),
                            _fmt(self.bounds[i])]) + "\n")

    def summary(self) -> dict:
        out = {
            "status": "ok",
            "kind": self.kind,
            "eps": list(self.eps),
            "values": self.values.tolist(),
            "se": self.se.tolist(),
            "bound_shape": self.bounds.tolist(),
            "provenance": self.config.provenance(),
        }
        if self.lhs is not None:
            out["lhs"] = self.lhs.tolist()
            out["correction"] = self.correction.tolist()
        return out

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _check_centered(cfg: ExperimentConfig, f) -> None:
    mu = sample_invariant_measure(
        cfg.system, cfg.y0, burn_in=cfg.budgets.invariant_burn_in,
        n_samples=min(cfg.budgets.invariant_samples, 20000),
        thinning=cfg.budgets.invariant_thinning, dt=cfg.budgets.invariant_dt,
        seed=rng.derive_key(cfg.seed, rng.LANE_AUX, 31))
    z = centering_residual(f, mu, 0.0)
    if z > 3.0:
        raise NotCentered(
            f"integrand fails the centering gate at the initial slow state "
            f"(z = {z:.3g})")


def fluctuation_lln(cfg: ExperimentConfig, f) -> FluctuationReport:
    """Ensemble mean of the plain time integral of ``f`` along coupled paths."""
    _check_centered(cfg, f)
    means, ses = [], []
    for eps in cfg.eps_list:
        pc = PathConfig(T=cfg.T, dt_slow=cfg.dt_slow,
                        micro_substeps_per_alpha2=cfg.micro_substeps,
                        seed=cfg.seed, n_paths=cfg.paths_coupled,
                        chunk_size=cfg.chunk_size, n_workers=cfg.workers)
        res = integrate_coupled(cfg.system, cfg.schedule, eps, cfg.x0, cfg.y0,
                                pc, integrand=f)
        ints = res.integrals
        means.append(ints.mean(axis=0))
        ses.append(ints.std(axis=0, ddof=1) / math.sqrt(ints.shape[0]))
    bounds = np.array([lln_bound_shape(cfg.schedule, cfg.theta, e)
                       for e in cfg.eps_list])
    return FluctuationReport(kind="lln", config=cfg, eps=cfg.eps_list,
                             values=np.stack(means), se=np.stack(ses),
                             bounds=bounds)


def fluctuation_clt(cfg: ExperimentConfig, f, regime: Regime | None = None,
                    ) -> FluctuationReport:
    """Residual of the rescaled time integral of ``f`` against the regime's
    corrector functional accumulated along the same paths."""
    regime = regime or cfg.regime
    if regime is Regime.UNCLASSIFIED:
        raise ConfigError("fluctuation_clt needs a classified regime")
    _check_centered(cfg, f)

    probe = np.asarray(f(0.0, np.zeros((2, cfg.system.d1)),
                         np.asarray(cfg.y0)), dtype=np.float64)
    k = 1 if probe.ndim <= 1 else int(probe.shape[-1])

    def cell_fn(t_c, y_c, cell_seed):
        val, _ = corrector_corrections(cfg.system, f, regime, t_c, y_c,
                                       cfg.budgets, cell_seed)
        return val

    field = CellField(cell_fn, cfg.system.d2, cfg.cache,
                      rng.derive_key(cfg.seed, rng.LANE_AUX, 32),
                      cfg.system.autonomous)

    def correction_fn(t, Y):
        return field.eval_batch(t, Y)[:, :k]

    lhs_m, corr_m, resid_m, ses = [], [], [], []
    for eps in cfg.eps_list:
        _, _, ga = cfg.schedule.scales(eps)
        pc = PathConfig(T=cfg.T, dt_slow=cfg.dt_slow,
                        micro_substeps_per_alpha2=cfg.micro_substeps,
                        seed=cfg.seed, n_paths=cfg.paths_coupled,
                        chunk_size=cfg.chunk_size, n_workers=cfg.workers)
        res = integrate_coupled(cfg.system, cfg.schedule, eps, cfg.x0, cfg.y0,
                                pc, integrand=f, macro_integrand=correction_fn)
        lhs = res.integrals / ga
        corr = res.macro_integrals
        resid = lhs - corr
        lhs_m.append(lhs.mean(axis=0))
        corr_m.append(corr.mean(axis=0))
        resid_m.append(resid.mean(axis=0))
        ses.append(resid.std(axis=0, ddof=1) / math.sqrt(resid.shape[0]))
    bounds = np.array([clt_bound_shape(regime, cfg.schedule, cfg.theta, e)
                       for e in cfg.eps_list])
    return FluctuationReport(kind="clt", config=cfg, eps=cfg.eps_list,
                             values=np.stack(resid_m), se=np.stack(ses),
                             bounds=bounds, lhs=np.stack(lhs_m),
                             correction=np.stack(corr_m))


def fluctuation_integrand(name: str):
    try:
        return FLUCT_LIBRARY[name]
    except KeyError:
        raise ConfigError(f"unknown fluctuation integrand {name!r}; "
                          f"known: {sorted(FLUCT_LIBRARY)}") from None
