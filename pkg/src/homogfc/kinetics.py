"""Arrhenius surface kinetics and nondimensional regime classification."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DomainError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KineticsParams:
    A: float = 1.0
    T_a: float = 1.0
    Q: float = 1.0

    def __post_init__(self):
        if not self.A >= 0:
            raise ConfigError(f"A must be >= 0 per (H1), got {self.A}")
        for name in ("T_a", "Q"):
            v = getattr(self, name)
            if not v > 0:
                raise ConfigError(f"{name} must be > 0 per (H1), got {v}")


def arrhenius_f(T, T_a):
    """f(T) = exp(-T_a/T), continuously extended by f(0) = 0."""
    T = np.asarray(T, dtype=float)
    if np.any(T < 0) or np.any(np.isnan(T)):
        raise DomainError("temperature must be >= 0 (absolute temperature)")
    with np.errstate(divide="ignore"):
        out = np.where(T > 0, np.exp(-T_a / np.where(T > 0, T, 1.0)), 0.0)
    return out if out.ndim else float(out)


def arrhenius_df(T, T_a):
    """f'(T) = (T_a/T^2) exp(-T_a/T), defined for T > 0."""
    T = np.asarray(T, dtype=float)
    if np.any(~(T > 0)):
        raise DomainError("f' requires T > 0")
    out = T_a / T**2 * np.exp(-T_a / T)
    return out if out.ndim else float(out)


def reaction_rate(T, C, params: KineticsParams):
    """W = A C f(T)."""
    C = np.asarray(C, dtype=float)
    if np.any(C < 0):
        raise DomainError("concentration must be >= 0")
    out = params.A * C * arrhenius_f(T, params.T_a)
    return out if np.ndim(out) else float(out)


def interface_coefficients(params: KineticsParams, T0: float, C0: float):
    """(a1, a2) = (Q A f'(T0) C0, Q A f(T0)): the only way (T0, C0) enters the cell problem."""
    if not T0 > 0:
        raise DomainError(f"T0 must be > 0, got {T0}")
    if C0 < 0:
        raise DomainError(f"C0 must be >= 0, got {C0}")
    qa = params.Q * params.A
    return qa * arrhenius_df(T0, params.T_a) * C0, qa * arrhenius_f(T0, params.T_a)


@dataclass(frozen=True)
class CharacteristicScales:
    L: float = 1.0
    b_c: float = 1.0
    D_c: float = 1.0
    lambda_gc: float = 1.0
    c_gc: float = 1.0
    c_sc: float = 1.0
    lambda_sc: float = 1.0
    A_c: float = 1.0
    Q_c: float = 1.0
    C_c: float = 1.0
    epsilon: float = 0.1
    T_a: float | None = None
    t_c: float | None = None

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k in ("T_a", "t_c") and v is None:
                continue
            if not (isinstance(v, (int, float)) and v > 0 and math.isfinite(v)):
                raise ConfigError(f"characteristic scale {k} must be a positive number, got {v!r}")
        if not self.epsilon < 1:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")


def regime_exponent(x: float, eps: float) -> int:
    """Nearest gamma in {-1, 0, 1} with x ~ eps**gamma; ties round toward 0."""
    r = -math.log(x) / math.log(1.0 / eps)
    n = math.ceil(abs(r) - 0.5)
    return int(math.copysign(min(n, 1), r)) if n else 0


def dimensionless_report(scales: CharacteristicScales) -> dict:
    alpha = scales.lambda_gc / scales.c_gc
    t_lambda = scales.c_gc * scales.L**2 / scales.lambda_gc
    t_c = scales.t_c if scales.t_c is not None else t_lambda
    pe = scales.b_c * scales.L / alpha
    da = scales.A_c * scales.L / alpha
    g_pe = regime_exponent(pe, scales.epsilon)
    g_da = regime_exponent(da, scales.epsilon)
    T_c = scales.Q_c * scales.C_c / scales.c_gc
    rep = {
        "alpha": alpha,
        "t_D": scales.L**2 / scales.D_c,
        "t_A": scales.L / scales.b_c,
        "t_lambda": t_lambda,
        "t_R": scales.L / scales.A_c,
        "Pe": pe,
        "Le": alpha / scales.D_c,
        "Da": da,
        "K": scales.lambda_sc / scales.lambda_gc,
        "m": scales.c_sc / scales.c_gc,
        "P_T": t_lambda / t_c,
        "T_c": T_c,
        "gamma_Pe": g_pe,
        "gamma_Da": g_da,
        "fast_regime": g_pe == -1 and g_da == -1,
        "warnings": [],
    }
    if scales.T_a is not None:
        ta = scales.T_a / T_c
        rep["T_a_star"] = ta
        if ta < 1:
            msg = (f"dimensionless activation temperature {ta:.4g} < 1: the bound f(T) <= T "
                   "is not guaranteed (it fails for all T_a < 1/e)")
            rep["warnings"].append(msg)
            log.warning(msg)
    return rep


def f_below_identity(T_a: float, T=None) -> bool:
    """Check f(T) <= T on a sampling grid (true for all T when T_a >= 1/e)."""
    T = np.linspace(1e-3, 10.0, 2001) if T is None else np.asarray(T)
    return bool(np.all(arrhenius_f(T, T_a) <= T))
