"""Binary link functions (logit, probit) with first and second derivatives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import ValidationError

__all__ = ["LinkFunction", "get_link"]

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class LinkFunction:
    """A symmetric CDF-type link ``L`` mapping an index to (0, 1).

    ``evaluate`` returns ``(L, L', L'')`` at the given index values.
    """

    kind: str = "logit"

    def __post_init__(self) -> None:
        if self.kind not in ("logit", "probit"):
            raise ValidationError(f"unknown link {self.kind!r}; expected 'logit' or 'probit'")

    def cdf(self, v):
        v = np.asarray(v, dtype=float)
        if self.kind == "logit":
            return special.expit(v)
        return special.ndtr(v)

    def pdf(self, v):
        v = np.asarray(v, dtype=float)
        if self.kind == "logit":
            p = special.expit(v)
            return p * (1.0 - p)
        return _INV_SQRT_2PI * np.exp(-0.5 * v * v)

    def dpdf(self, v):
        v = np.asarray(v, dtype=float)
        if self.kind == "logit":
            p = special.expit(v)
            return p * (1.0 - p) * (1.0 - 2.0 * p)
        return -v * _INV_SQRT_2PI * np.exp(-0.5 * v * v)

    def evaluate(self, v):
        return self.cdf(v), self.pdf(v), self.dpdf(v)

    def logcdf(self, v):
        v = np.asarray(v, dtype=float)
        if self.kind == "logit":
            return special.log_expit(v)
        return special.log_ndtr(v)

    def logsf(self, v):
        # symmetric links: 1 - L(v) = L(-v)
        return self.logcdf(-np.asarray(v, dtype=float))

    def inverse(self, p):
        p = np.asarray(p, dtype=float)
        if self.kind == "logit":
            return special.logit(p)
        return special.ndtri(p)


def get_link(link: str | LinkFunction) -> LinkFunction:
    if isinstance(link, LinkFunction):
        return link
    return LinkFunction(str(link).lower())
