"""Residual statistics and the merge change-detection test.

Under Gaussian image noise the squared residual of an optimized map has
expectation sigma^2 (eta_res - d_dof): the residual count minus the
essential parameter count.  Merging maps re-imposes the constraints
between shared points and shared frames, so the excess

    a_tilde = a_bar^2 - sum_k a_k^2

follows a Gamma distribution whose shape counts the re-imposed degrees
of freedom.  A merge of inconsistent maps (a moved object, a failed
alignment) inflates a_tilde far beyond that distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammainc, gammaincinv

from .errors import InvalidDof, NonPositiveDof

__all__ = [
    "GammaParams",
    "ChangeTestResult",
    "estimate_sigma",
    "dof_delta",
    "gamma_params",
    "change_test",
]


@dataclass(frozen=True)
class GammaParams:
    """Rate/shape parametrization of the excess-residual distribution:
    alpha = 1/(2 sigma^2), nu = dof_delta / 2."""

    alpha: float
    nu: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.nu > 0:
            raise ValueError("nu must be positive")

    def mean(self) -> float:
        return self.nu / self.alpha

    def variance(self) -> float:
        return self.nu / self.alpha**2

    def cdf(self, x) -> float | np.ndarray:
        """Regularized lower incomplete gamma at rate-scaled x."""
        x = np.asarray(x, dtype=float)
        out = np.where(x > 0, gammainc(self.nu, self.alpha * np.maximum(x, 0)), 0.0)
        return float(out) if out.ndim == 0 else out

    def quantile(self, p: float) -> float:
        if not 0 <= p <= 1:
            raise ValueError("p must lie in [0, 1]")
        if p == 1:
            return np.inf
        return float(gammaincinv(self.nu, p) / self.alpha)


@dataclass(frozen=True)
class ChangeTestResult:
    """Outcome of testing one merge excess against its distribution."""

    a_tilde: float
    params: GammaParams
    p_value: float
    rejected: bool
    level: float

    def __post_init__(self):
        if not 0 <= self.p_value <= 1:
            raise ValueError("p_value must lie in [0, 1]")
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")


def estimate_sigma(cmaps) -> float:
    """Image-noise standard deviation pooled from footprints: the mean of
    a^(k) / sqrt(eta_res - d_dof) over the maps."""
    if not cmaps:
        raise ValueError("need at least one footprint")
    sigmas = []
    for cmap in cmaps:
        excess = cmap.eta_res - cmap.d_dof
        if excess <= 0:
            raise InvalidDof(
                f"footprint has eta_res={cmap.eta_res} <= d_dof={cmap.d_dof}"
            )
        sigmas.append(cmap.a / np.sqrt(excess))
    return float(np.mean(sigmas))


def dof_delta(corr, N: int) -> int:
    """Degrees of freedom re-imposed by a merge of N maps.

    Each global point seen by i maps locks 3(i-1) coordinates; aligning
    N frames into one removes 7(N-1) similarity parameters:
    sum_i 3 kappa_i (i-1) - 7(N-1), with kappa_i the number of global
    points seen in exactly i maps.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    multiplicity = np.zeros(len(corr.global_ids), dtype=np.int64)
    for positions in corr.projections:
        np.add.at(multiplicity, np.asarray(positions, dtype=np.int64), 1)
    locked = 3 * int(np.sum(multiplicity - 1, where=multiplicity > 0))
    return locked - 7 * (N - 1)


def gamma_params(sigma: float, dof_delta: int) -> GammaParams:
    """Distribution of the merge excess for known noise and dof count."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if dof_delta <= 0:
        raise NonPositiveDof(
            f"merge re-imposes {dof_delta} <= 0 degrees of freedom; "
            "the excess residual carries no testable signal"
        )
    return GammaParams(alpha=1.0 / (2.0 * sigma**2), nu=dof_delta / 2.0)


def change_test(a_tilde: float, params: GammaParams, level: float) -> ChangeTestResult:
    """Test the merge excess against its distribution.

    p_value = 1 - CDF(a_tilde); the merge is rejected exactly when
    a_tilde exceeds the ``level`` quantile (strictly).
    """
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    a_tilde = float(a_tilde)
    p_value = float(1.0 - params.cdf(a_tilde))
    rejected = a_tilde > params.quantile(level)
    return ChangeTestResult(
        a_tilde=a_tilde,
        params=params,
        p_value=p_value,
        rejected=rejected,
        level=level,
    )
