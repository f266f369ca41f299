"""Diagnostic checks, reports and default tolerances."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Optional

import numpy as np

from .errors import _plain

PASS = "PASS"
FAIL = "FAIL"
UNKNOWN = "UNKNOWN"
INDETERMINATE = "INDETERMINATE"

# Default tolerances; a scenario's [tolerances] block may override any of them.
TOL = {
    "grp": 1e-10,
    "eq": 1e-8,
    "rank": 1e-8,
    "det": 1e-8,
    "zero": 1e-8,
    "form": 1e-8,
    "pou": 1e-10,
    "omega": 1e-10,
    "dedup": 1e-6,
    "delta_U": 0.1,
    "delta_hd": 1e-3,
    "h_trace": 1e-2,
    "corrector": 1e-10,
    "newton": 1e-12,
    "cocycle": 1e-6,
    "struct": 1e-8,
}
NEWTON_MAXIT = 50
GL_ORDER = 16
MAX_RETRY = 16
MAX_SHRINK = 20
GRID = 9
SAMPLES = 32


def tol(name: str, overrides: Optional[dict] = None) -> float:
    if overrides and name in overrides:
        return float(overrides[name])
    return TOL[name]


def frac_str(q: Fraction) -> str:
    q = Fraction(q)
    return f"{q.numerator}/{q.denominator}"


def plain(obj: Any) -> Any:
    if isinstance(obj, Fraction):
        return frac_str(obj)
    if isinstance(obj, float):
        return obj if np.isfinite(obj) else str(obj)
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, (np.ndarray, np.generic)):
        return plain(_plain(obj))
    if hasattr(obj, "to_dict"):
        return plain(obj.to_dict())
    return obj


@dataclass
class Check:
    """One named verification outcome."""

    name: str
    status: str
    residual: Optional[float] = None
    witness: Any = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status != FAIL

    @classmethod
    def from_residual(cls, name: str, residual: float, threshold: float, witness=None, detail: str = "") -> "Check":
        residual = float(residual)
        status = PASS if residual <= threshold else FAIL
        return cls(name, status, residual, witness if status == FAIL else None, detail)

    def to_dict(self) -> dict:
        out = {"name": self.name, "status": self.status}
        if self.residual is not None:
            out["residual"] = float(self.residual)
        if self.witness is not None:
            out["witness"] = plain(self.witness)
        if self.detail:
            out["detail"] = self.detail
        return out


@dataclass
class Report:
    command: str
    checks: list = field(default_factory=list)
    results: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.checks)

    def add(self, check: Check) -> Check:
        self.checks.append(check)
        return check

    def extend(self, checks) -> None:
        for c in checks:
            self.add(c)

    def merge(self, other: "Report", prefix: str = "") -> None:
        for c in other.checks:
            self.add(Check(prefix + c.name, c.status, c.residual, c.witness, c.detail))
        for k, v in other.results.items():
            self.results[prefix + k] = v

    def check(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self) -> list:
        return [c for c in self.checks if c.status == FAIL]

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "passed": self.passed,
            **plain(self.meta),
            "checks": [c.to_dict() for c in self.checks],
            "results": plain(self.results),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)
