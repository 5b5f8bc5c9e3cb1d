"""Explicit constants of the approximation-error calculus."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class BoundSet:
    C_f: float
    C_kappa: float
    D: float
    h: float
    C_P: float
    C_Z: float

    def __post_init__(self):
        if not math.isclose(self.C_P, predictor_lipschitz(self.D, self.C_f), rel_tol=1e-12):
            raise ValueError("C_P inconsistent with (D, C_f)")
        if not math.isclose(self.C_Z, flow_lipschitz(self.h, self.C_f, self.C_kappa),
                            rel_tol=1e-12):
            raise ValueError("C_Z inconsistent with (h, C_f, C_kappa)")

    def delta_case1(self, eps: float) -> float:
        """Effective prediction error with the sampling-horizon operator learned."""
        return float(eps)

    def delta_case2(self, eps: float) -> float:
        """Effective prediction error when only the predictor is learned."""
        # an exact operator stays exact even when C_Z overflowed
        return float(eps) * self.C_Z if eps else 0.0

    def delta_case1_inv(self, r: float) -> float:
        return float(r)

    def delta_case2_inv(self, r: float) -> float:
        return float(r) / self.C_Z

    def to_dict(self) -> dict:
        return asdict(self)


def _exp(a: float) -> float:
    # stiff plants push the exponent past the float range
    try:
        return math.exp(a)
    except OverflowError:
        return math.inf


def predictor_lipschitz(D: float, C_f: float) -> float:
    return max(1.0, D * C_f) * _exp(D * C_f)


def flow_lipschitz(h: float, C_f: float, C_kappa: float) -> float:
    return _exp(h * C_f * (1.0 + C_kappa))


def build_bounds(C_f: float, C_kappa: float, D: float, h: float) -> BoundSet:
    for name, v in (("C_f", C_f), ("C_kappa", C_kappa), ("D", D), ("h", h)):
        if not (v > 0 and math.isfinite(v)):
            raise ValueError(f"{name} must be positive and finite, got {v}")
    return BoundSet(float(C_f), float(C_kappa), float(D), float(h),
                    predictor_lipschitz(D, C_f), flow_lipschitz(h, C_f, C_kappa))


def corollary_bound(bounds: BoundSet, eps: float) -> float:
    """Sup-gap over one inter-sample interval between the exact flow and the
    flow started from a predictor endpoint that is off by ``eps``."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    return bounds.delta_case2(eps)
