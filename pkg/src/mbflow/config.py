"""Strict JSON experiment configuration.

A config names one problem family and carries exactly one matching
parameter block.  Unknown keys are rejected, defaults are filled in on
parsing, and :func:`emit_config` writes the resolved document back out so
that ``parse_config_text(emit_config(c)) == c``.
"""

import json
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .exceptions import ConfigError

__all__ = [
    "ConstrainedBlock",
    "CustomBlock",
    "ExperimentConfig",
    "ObstacleBlock",
    "SolverBlock",
    "SparseBlock",
    "TimingBlock",
    "emit_config",
    "parse_config",
    "parse_config_text",
]

FAMILY_BLOCKS = {
    "sparse": "sparse",
    "constrained-qp": "constrained_qp",
    "obstacle-dd": "obstacle_dd",
    "custom": "custom",
}
DEFAULT_T = {"sparse": 5.0, "constrained-qp": 10.0, "obstacle-dd": 0.5}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _check_matrix(rows, name):
    if not rows or any(len(r) != len(rows[0]) for r in rows) or not rows[0]:
        raise ValueError(f"{name} must be a nonempty rectangular list of rows")


class SolverBlock(_Strict):
    method: Literal["auto", "exact", "implicit", "explicit"] = "auto"
    inner_step: Optional[float] = Field(default=None, gt=0)
    reference_step: Optional[float] = Field(default=None, gt=0)


class SparseBlock(_Strict):
    A: List[List[float]]
    b: List[float]
    lam: float = Field(ge=0)
    pi: List[float] = [0.5, 0.5]
    u0: Optional[List[float]] = None
    h: float = Field(default=0.01, gt=0)

    @model_validator(mode="after")
    def _shapes(self):
        _check_matrix(self.A, "A")
        if len(self.b) != len(self.A):
            raise ValueError(f"b has {len(self.b)} entries but A has {len(self.A)} rows")
        if self.u0 is not None and len(self.u0) != len(self.A[0]):
            raise ValueError(f"u0 has {len(self.u0)} entries but A has {len(self.A[0])} columns")
        if len(self.pi) != 2:
            raise ValueError("pi must have two entries")
        return self


class ConstrainedBlock(_Strict):
    A: List[List[float]] = [[5.0, 3.0], [4.0, 6.0], [1.0, -2.0], [-1.0, 0.0], [0.0, 1.0]]
    b: List[float] = [120.0, 150.0, 0.0, -7.0, 15.0]
    ud: float = 10.0
    yd: float = 10.0
    probs: List[float] = [0.5, 0.25, 0.25]
    starts: List[List[float]] = [[8.0, 4.0], [13.0, 8.0], [20.0, 14.0]]
    project_start: bool = False
    h: float = Field(default=0.01, gt=0)

    @model_validator(mode="after")
    def _shapes(self):
        _check_matrix(self.A, "A")
        if len(self.A[0]) != 2:
            raise ValueError("constraint rows must have two columns")
        if len(self.b) != len(self.A):
            raise ValueError(f"b has {len(self.b)} entries but A has {len(self.A)} rows")
        if not self.starts or any(len(s) != 2 for s in self.starts):
            raise ValueError("starts must be a nonempty list of 2-vectors")
        if len(self.probs) != 3:
            raise ValueError("probs must have three entries")
        return self


class ObstacleBlock(_Strict):
    N: int = Field(default=20, ge=4)
    delta: float = Field(default=1e-8, gt=0)
    s: float = Field(default=1e-10, gt=0)
    ramp_halfwidth: float = Field(default=0.1, gt=0, lt=1)
    batches: Optional[List[List[int]]] = None
    probs: Optional[List[float]] = None
    reference_step: Optional[float] = Field(default=None, gt=0)
    snapshots: Optional[List[float]] = None

    @model_validator(mode="after")
    def _batches(self):
        if (self.batches is None) != (self.probs is None):
            raise ValueError("batches and probs must be given together")
        if self.batches is not None and len(self.batches) != len(self.probs):
            raise ValueError("one probability per batch required")
        return self


class CustomTerm(_Strict):
    H: List[List[float]]
    c: Optional[List[float]] = None
    constant: float = 0.0
    l1_weights: Optional[List[float]] = None
    l1_centers: Optional[List[float]] = None

    @model_validator(mode="after")
    def _shapes(self):
        _check_matrix(self.H, "H")
        d = len(self.H)
        if len(self.H[0]) != d:
            raise ValueError("H must be square")
        for name in ("c", "l1_weights", "l1_centers"):
            v = getattr(self, name)
            if v is not None and len(v) != d:
                raise ValueError(f"{name} has {len(v)} entries, expected {d}")
        return self


class CustomBlock(_Strict):
    """Quadratic-plus-l1 sub-potentials with explicit weights and batches (1-based)."""

    sub_potentials: List[CustomTerm]
    weights: List[float]
    batches: List[List[int]]
    batch_probs: List[float]
    u0: List[float]

    @model_validator(mode="after")
    def _shapes(self):
        dims = {len(t.H) for t in self.sub_potentials}
        if len(dims) != 1:
            raise ValueError("all sub-potentials must share one dimension")
        if dims.pop() != len(self.u0):
            raise ValueError("u0 dimension differs from the sub-potentials")
        if len(self.weights) != len(self.sub_potentials):
            raise ValueError("one weight per sub-potential required")
        if len(self.batch_probs) != len(self.batches):
            raise ValueError("one probability per batch required")
        return self


class TimingBlock(_Strict):
    sizes: List[int] = [5, 50, 100, 200, 400]
    repeats: int = Field(default=3, ge=1)
    epsilon: float = Field(default=0.04, gt=0)
    T: float = Field(default=1.0, gt=0)
    h: float = Field(default=0.01, gt=0)


class ExperimentConfig(_Strict):
    family: Literal["custom", "constrained-qp", "sparse", "obstacle-dd"]
    scheme: Literal["flow", "mini-batch", "minimizing-movement"] = "mini-batch"
    epsilons: List[float] = [0.04]
    T: Optional[float] = Field(default=None, gt=0)
    R: int = Field(default=64, ge=1)
    seed: int = Field(default=0, ge=0)
    solver: SolverBlock = SolverBlock()
    output_dir: str = "runs"
    sparse: Optional[SparseBlock] = None
    constrained_qp: Optional[ConstrainedBlock] = None
    obstacle_dd: Optional[ObstacleBlock] = None
    custom: Optional[CustomBlock] = None
    timing: Optional[TimingBlock] = None

    @model_validator(mode="after")
    def _resolve(self):
        present = [k for k in FAMILY_BLOCKS.values() if getattr(self, k) is not None]
        wanted = FAMILY_BLOCKS[self.family]
        if self.family == "constrained-qp" and not present:
            object.__setattr__(self, "constrained_qp", ConstrainedBlock())
            present = [wanted]
        if self.family == "obstacle-dd" and not present:
            object.__setattr__(self, "obstacle_dd", ObstacleBlock())
            present = [wanted]
        if present != [wanted]:
            raise ValueError(f"family {self.family!r} needs exactly the block {wanted!r}, found {present}")
        if not self.epsilons or any(e <= 0 for e in self.epsilons):
            raise ValueError("epsilons must be positive")
        if any(b >= a for a, b in zip(self.epsilons, self.epsilons[1:])):
            raise ValueError("epsilons must be strictly decreasing")
        if self.T is None:
            if self.family not in DEFAULT_T:
                raise ValueError("T is required for the custom family")
            object.__setattr__(self, "T", DEFAULT_T[self.family])
        if self.epsilons[0] > self.T:
            raise ValueError("epsilons must not exceed T")
        if self.family == "obstacle-dd" and self.scheme == "mini-batch":
            object.__setattr__(self, "scheme", "minimizing-movement")
        return self

    @property
    def block(self):
        return getattr(self, FAMILY_BLOCKS[self.family])


def _loc(err):
    return ".".join(str(p) for p in err["loc"]) or "<root>"


def parse_config_text(text, source="<string>"):
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", source) from exc
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a JSON object", source)
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(f"{_loc(first)}: {first['msg']}", source) from exc


def parse_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config file not found", str(path))
    return parse_config_text(path.read_text(), str(path))


def emit_config(config):
    """Resolved config as canonical JSON (unset blocks omitted)."""
    return json.dumps(config.model_dump(exclude_none=True), indent=2, sort_keys=True)
