"""Congestion integrands f, their conjugates f* and derivatives (f*)'.

Every supported conjugate has the form ``f*(p) = alpha * max(p, 0)**q`` on a
region, which is what the exact cell integrals rely on:

=====================  ======================  =============
kind                   f(rho) on rho >= 0      (alpha, q)
=====================  ======================  =============
hard_cap               0 if rho <= cap         (cap, 1)
hard_cap_two_region    cap inside, m outside   (cap|m, 1)
power                  rho**m / m              (1/m', m')
quadratic              c rho**2 / 2            (1/(2c), 2)
=====================  ======================  =============

with ``m' = m / (m - 1)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("hard_cap", "hard_cap_two_region", "power", "quadratic")


class RegionError(ValueError):
    pass


@dataclass(frozen=True)
class CongestionModel:
    kind: str = "hard_cap"
    cap: float = 1.0
    outside_cap: float = 0.0
    exponent: float = 2.0
    strong_convexity: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown congestion kind {self.kind!r}")
        if self.kind in ("hard_cap", "hard_cap_two_region") and not self.cap > 0:
            raise ValueError("cap must be positive")
        if self.kind == "hard_cap_two_region" and not 0 <= self.outside_cap <= self.cap:
            raise ValueError("outside_cap must lie in [0, cap]")
        if self.kind == "power" and not self.exponent >= 2:
            raise ValueError("power congestion needs exponent >= 2")
        if self.kind == "quadratic" and not self.strong_convexity > 0:
            raise ValueError("strong_convexity must be positive")

    @property
    def two_region(self) -> bool:
        return self.kind == "hard_cap_two_region"

    @property
    def is_hard(self) -> bool:
        return self.kind in ("hard_cap", "hard_cap_two_region")

    def power_form(self, region: str = "inside") -> tuple[float, float]:
        """(alpha, q) with f*(p) = alpha * p_+**q on ``region``."""
        if region not in ("inside", "outside"):
            raise ValueError(f"unknown region {region!r}")
        if region == "outside" and not self.two_region:
            raise RegionError(f"{self.kind} has a single region")
        if self.kind == "hard_cap":
            return self.cap, 1.0
        if self.kind == "hard_cap_two_region":
            return (self.cap if region == "inside" else self.outside_cap), 1.0
        if self.kind == "power":
            mp = self.exponent / (self.exponent - 1.0)
            return 1.0 / mp, mp
        return 1.0 / (2.0 * self.strong_convexity), 2.0

    def integrand(self, rho, region: str = "inside"):
        """f(rho); +inf where the hard constraint is violated."""
        rho = np.asarray(rho, dtype=float)
        if self.is_hard:
            top = self.power_form(region)[0]
            return np.where((rho >= 0) & (rho <= top), 0.0, np.inf)
        if rho.ndim == 0 and rho < 0:
            return np.inf
        r = np.where(rho >= 0, rho, np.nan)
        if self.kind == "power":
            val = r**self.exponent / self.exponent
        else:
            val = 0.5 * self.strong_convexity * r**2
        return np.where(rho >= 0, val, np.inf)

    def peak_density(self, p, region: str = "inside"):
        return conjugate_deriv(self, p, region)


def conjugate(model: CongestionModel, p, region: str = "inside"):
    """Legendre conjugate f*(p) = sup_{rho >= 0} p rho - f(rho)."""
    alpha, q = model.power_form(region)
    pp = np.maximum(np.asarray(p, dtype=float), 0.0)
    return alpha * pp**q


def conjugate_deriv(model: CongestionModel, p, region: str = "inside"):
    """(f*)'(p), with the left value 0 at p = 0."""
    alpha, q = model.power_form(region)
    p = np.asarray(p, dtype=float)
    if q == 1.0:
        return np.where(p > 0, alpha, 0.0)
    return alpha * q * np.maximum(p, 0.0) ** (q - 1.0)


def capacity(model: CongestionModel, area: float, hull_area: float) -> float:
    """Largest mass the congestion constraint admits (inf for soft models)."""
    if model.kind == "hard_cap":
        return model.cap * area
    if model.kind == "hard_cap_two_region":
        return model.cap * area + model.outside_cap * (hull_area - area)
    return np.inf
