"""Small term language for basis functions and index specifications.

A term is a product of factors, each factor a variable name with an optional
integer power: ``"1"``, ``"x"``, ``"x^2"``, ``"z1_educ"``, ``"x*z1_black"``.
The group names ``z1``, ``z2`` and ``z`` expand to every column of that group,
so ``["1", "z1", "z2"]`` is the default ``(1, z1', z2')'`` basis and
``"x*z1"`` is the interaction of ``x`` with each included instrument.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError

__all__ = ["Term", "TermSet", "parse_terms", "expand_degree"]

GROUPS = ("z1", "z2", "z")


@dataclass(frozen=True)
class Term:
    factors: tuple[tuple[str, int], ...]  # empty tuple = constant

    @property
    def label(self) -> str:
        if not self.factors:
            return "1"
        return "*".join(n if p == 1 else f"{n}^{p}" for n, p in self.factors)

    @property
    def x_power(self) -> int:
        return sum(p for n, p in self.factors if n == "x")

    def value(self, cols: Mapping[str, np.ndarray], n: int) -> np.ndarray:
        out = np.ones(n)
        for name, p in self.factors:
            out = out * cols[name] ** p
        return out

    def dx(self, cols: Mapping[str, np.ndarray], n: int) -> np.ndarray:
        """Partial derivative of the term with respect to ``x``."""
        k = self.x_power
        if k == 0:
            return np.zeros(n)
        out = k * cols["x"] ** (k - 1)
        for name, p in self.factors:
            if name != "x":
                out = out * cols[name] ** p
        return out

    def dxx(self, cols: Mapping[str, np.ndarray], n: int) -> np.ndarray:
        k = self.x_power
        if k < 2:
            return np.zeros(n)
        out = k * (k - 1) * cols["x"] ** (k - 2)
        for name, p in self.factors:
            if name != "x":
                out = out * cols[name] ** p
        return out


def _parse_factor(tok: str) -> tuple[str, int]:
    tok = tok.strip()
    if "^" in tok:
        name, _, pw = tok.partition("^")
        try:
            power = int(pw)
        except ValueError:
            raise ValidationError(f"bad power in term factor {tok!r}") from None
        if power < 1:
            raise ValidationError(f"power must be >= 1 in {tok!r}")
        return name.strip(), power
    return tok, 1


def parse_terms(
    spec: Sequence[str],
    z1_names: Sequence[str],
    z2_names: Sequence[str],
    allow_x: bool = False,
    allow_z2: bool = True,
) -> list[Term]:
    """Expand a term list against the available column names."""
    known = set(z1_names) | set(z2_names)
    groups = {"z1": list(z1_names), "z2": list(z2_names), "z": list(z1_names) + list(z2_names)}
    out: list[Term] = []
    for raw in spec:
        raw = str(raw).strip()
        if raw == "1":
            out.append(Term(()))
            continue
        choices: list[list[tuple[str, int]]] = []
        for tok in raw.split("*"):
            name, power = _parse_factor(tok)
            if name in groups:
                choices.append([(c, power) for c in groups[name]])
            elif name == "x":
                if not allow_x:
                    raise ValidationError(f"term {raw!r} uses x, which is not allowed here")
                choices.append([("x", power)])
            elif name in known:
                choices.append([(name, power)])
            else:
                raise ValidationError(f"unknown variable {name!r} in term {raw!r}")
        for combo in itertools.product(*choices):
            merged: dict[str, int] = {}
            for name, power in combo:
                merged[name] = merged.get(name, 0) + power
            if not allow_z2 and any(n in z2_names for n in merged):
                raise ValidationError(
                    f"term {raw!r} uses an excluded instrument; the outcome index may "
                    "only involve x and z1"
                )
            out.append(Term(tuple(sorted(merged.items()))))
    labels = [t.label for t in out]
    if len(set(labels)) != len(labels):
        dup = sorted({lab for lab in labels if labels.count(lab) > 1})
        raise ValidationError(f"duplicated terms after expansion: {dup}")
    return out


def expand_degree(spec: Sequence[str], degree: int) -> list[str]:
    """Add powers 2..degree of every single-factor, non-constant term."""
    if degree <= 1:
        return list(spec)
    extra = []
    for raw in spec:
        raw = str(raw).strip()
        if raw != "1" and "*" not in raw and "^" not in raw:
            extra.extend(f"{raw}^{p}" for p in range(2, degree + 1))
    return list(spec) + extra


class TermSet:
    """A parsed list of terms that builds design matrices from column dicts."""

    def __init__(self, terms: Sequence[Term]):
        if not terms:
            raise ValidationError("empty term list")
        self.terms = list(terms)

    @classmethod
    def from_spec(cls, spec, z1_names, z2_names, *, allow_x=False, allow_z2=True, degree=1):
        return cls(parse_terms(expand_degree(spec, degree), z1_names, z2_names, allow_x, allow_z2))

    def __len__(self) -> int:
        return len(self.terms)

    @property
    def labels(self) -> list[str]:
        return [t.label for t in self.terms]

    @property
    def has_constant(self) -> bool:
        return any(not t.factors for t in self.terms)

    @property
    def involves_x(self) -> bool:
        return any(t.x_power > 0 for t in self.terms)

    def design(self, cols: Mapping[str, np.ndarray], n: int) -> np.ndarray:
        return np.column_stack([t.value(cols, n) for t in self.terms])

    def design_dx(self, cols: Mapping[str, np.ndarray], n: int) -> np.ndarray:
        return np.column_stack([t.dx(cols, n) for t in self.terms])

    def design_dxx(self, cols: Mapping[str, np.ndarray], n: int) -> np.ndarray:
        return np.column_stack([t.dxx(cols, n) for t in self.terms])
