"""Source and distortion models for two-constraint lossy compression.

A hidden source S is observed only through a correlated data source X.
Codes must reconstruct both: S within a per-letter distortion budget and
X within another.  Everything downstream (the numeric solver, the closed
forms, the blocklength bounds) consumes the two objects defined here:

* :class:`JointSource` -- the finite joint law of (S, X), with the data
  marginal and the reverse conditional P(S|X) derived from it.
* :class:`DistortionSpec` -- the per-letter distortion tables plus the
  surrogate table that averages the hidden-source distortion over S given
  the observed letter, which reduces the hidden problem to a two-budget
  observable one.

All probabilities are stored linear-scale; log-domain arithmetic is done
by the consumers that need it.  Rates are in nats throughout the library;
only the CLI converts units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MASS_TOL = 1e-12


class ModelError(ValueError):
    """Invalid source/distortion input (maps to CLI exit code 2)."""


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != ndim:
        raise ModelError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class JointSource:
    """Joint pmf of (hidden letter, data letter), shape (n_semantic, n_data).

    Construction never rejects a bad table; run :func:`validate_source` to
    collect violations.  Columns with zero data-marginal mass are excluded
    from every expectation computed downstream.
    """

    joint_pmf: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "joint_pmf", _frozen_array(self.joint_pmf, 2, "joint_pmf"))

    @property
    def semantic_alphabet_size(self) -> int:
        return self.joint_pmf.shape[0]

    @property
    def data_alphabet_size(self) -> int:
        return self.joint_pmf.shape[1]

    @property
    def data_marginal(self) -> np.ndarray:
        px = self.joint_pmf.sum(axis=0)
        px.setflags(write=False)
        return px

    @property
    def support(self) -> np.ndarray:
        """Boolean mask over data letters with positive marginal mass."""
        return self.data_marginal > 0.0

    @property
    def semantic_given_data(self) -> np.ndarray:
        """P(S=s | X=x), NaN on zero-probability data columns."""
        px = self.data_marginal
        with np.errstate(invalid="ignore", divide="ignore"):
            cond = self.joint_pmf / px[None, :]
        cond[:, ~self.support] = np.nan
        cond.setflags(write=False)
        return cond

    def reweighted(self, new_px: np.ndarray) -> "JointSource":
        """Same reverse conditional P(S|X), different data marginal."""
        new_px = np.asarray(new_px, dtype=float)
        cond = np.nan_to_num(self.semantic_given_data, nan=0.0)
        return JointSource(cond * new_px[None, :])


def validate_source(source: JointSource) -> list[str]:
    """Return every invariant violation (empty list means valid)."""
    pmf = source.joint_pmf
    violations = []
    if not np.all(np.isfinite(pmf)):
        bad = np.argwhere(~np.isfinite(pmf))
        violations.append(f"non-finite entries at cells {bad.tolist()}")
        return violations
    negative = np.argwhere(pmf < 0.0)
    for s, x in negative:
        violations.append(f"negative probability at cell (s={s}, x={x}): {pmf[s, x]!r}")
    mass = float(pmf.sum())
    if abs(mass - 1.0) > MASS_TOL:
        violations.append(f"mass = {mass!r}")
    return violations


@dataclass(frozen=True)
class DistortionSpec:
    """Per-letter distortion tables and the derived surrogate table.

    ``ds_table[s, z]`` scores hidden-letter reconstructions, ``dx_table[x, y]``
    data reconstructions.  ``surrogate_ds[x, z]`` is the conditional mean of
    ``ds_table[S, z]`` given X=x; rows for zero-probability data letters are
    NaN and must not enter expectations.
    """

    ds_table: np.ndarray
    dx_table: np.ndarray
    surrogate_ds: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ds_table", _frozen_array(self.ds_table, 2, "ds_table"))
        object.__setattr__(self, "dx_table", _frozen_array(self.dx_table, 2, "dx_table"))
        object.__setattr__(self, "surrogate_ds", _frozen_array(self.surrogate_ds, 2, "surrogate_ds"))

    @classmethod
    def build(cls, source: JointSource, ds_table, dx_table) -> "DistortionSpec":
        ds_table = np.asarray(ds_table, dtype=float)
        dx_table = np.asarray(dx_table, dtype=float)
        for name, tab in (("ds_table", ds_table), ("dx_table", dx_table)):
            if not np.all(np.isfinite(tab)) or np.any(tab < 0.0):
                raise ModelError(f"{name} entries must be finite and nonnegative")
        if dx_table.shape[0] != source.data_alphabet_size:
            raise ModelError(
                f"dx_table has {dx_table.shape[0]} rows, source has "
                f"{source.data_alphabet_size} data letters"
            )
        return cls(ds_table, dx_table, surrogate_distortion(source, ds_table))

    @property
    def n_semantic_hat(self) -> int:
        return self.ds_table.shape[1]

    @property
    def n_data_hat(self) -> int:
        return self.dx_table.shape[1]


@dataclass(frozen=True)
class DistortionPair:
    """Budgets (ds, dx) on expected surrogate and data distortion."""

    ds: float
    dx: float

    def __post_init__(self):
        if not (np.isfinite(self.ds) and np.isfinite(self.dx)):
            raise ModelError(f"distortion budgets must be finite, got ({self.ds}, {self.dx})")
        if self.ds < 0.0 or self.dx < 0.0:
            raise ModelError(f"distortion budgets must be nonnegative, got ({self.ds}, {self.dx})")


def surrogate_distortion(source: JointSource, ds_table) -> np.ndarray:
    """Conditional expectation of the hidden-letter distortion given X.

    Returns a table over (data letter x, reconstruction z).  Rows for data
    letters with zero marginal probability are NaN: the conditional is
    undefined there and those letters carry no mass anyway.
    """
    ds_table = np.asarray(ds_table, dtype=float)
    if ds_table.shape[0] != source.semantic_alphabet_size:
        raise ModelError(
            f"ds_table has {ds_table.shape[0]} rows, source has "
            f"{source.semantic_alphabet_size} hidden letters"
        )
    cond = source.semantic_given_data  # (n_semantic, n_data), NaN off support
    surrogate = np.nan_to_num(cond, nan=0.0).T @ ds_table
    surrogate[~source.support, :] = np.nan
    return surrogate


def admissible_bounds(source: JointSource, spec: DistortionSpec) -> tuple[float, float]:
    """Smallest achievable expected distortions (ds_min, dx_min).

    A budget pair is admissible iff it dominates these componentwise.
    """
    px = source.data_marginal
    on = source.support
    ds_min = float(px[on] @ np.min(spec.surrogate_ds[on, :], axis=1))
    dx_min = float(px[on] @ np.min(spec.dx_table[on, :], axis=1))
    return ds_min, dx_min


def slack_thresholds(source: JointSource, spec: DistortionSpec) -> tuple[float, float]:
    """Budgets above which a constant reconstruction already suffices.

    Componentwise: min over a single reconstruction letter of its expected
    distortion.  Both budgets at or above these thresholds force rate zero.
    """
    px = source.data_marginal
    on = source.support
    ds_slack = float(np.min(px[on] @ spec.surrogate_ds[on, :]))
    dx_slack = float(np.min(px[on] @ spec.dx_table[on, :]))
    return ds_slack, dx_slack


# ---------------------------------------------------------------------------
# File format: one JSON document holding the joint pmf and both tables.
# ---------------------------------------------------------------------------

def _as_table(raw, rows: int, cols: int, name: str) -> np.ndarray:
    arr = np.array(raw, dtype=float)
    if arr.ndim == 1:
        if arr.size != rows * cols:
            raise ModelError(f"{name}: flat length {arr.size} != {rows}x{cols}")
        arr = arr.reshape(rows, cols)
    if arr.shape != (rows, cols):
        raise ModelError(f"{name}: shape {arr.shape} != ({rows}, {cols})")
    return arr


def load_source_file(path) -> tuple[JointSource, DistortionSpec, dict]:
    """Read a source/distortion JSON document.

    Required fields: ``semantic_alphabet``, ``data_alphabet``,
    ``reconstruction_alphabets`` (object with ``semantic`` and ``data``
    lists), ``joint_pmf`` (row-major, semantic index major), ``ds_table``,
    ``dx_table``.  The joint pmf may be nested rows or a flat list.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelError(f"cannot read source file {path}: {exc}") from exc
    try:
        sem = list(doc["semantic_alphabet"])
        dat = list(doc["data_alphabet"])
        recon = doc["reconstruction_alphabets"]
        sem_hat = list(recon["semantic"])
        dat_hat = list(recon["data"])
    except (KeyError, TypeError) as exc:
        raise ModelError(f"source file missing field: {exc}") from exc
    pmf = _as_table(doc.get("joint_pmf"), len(sem), len(dat), "joint_pmf")
    ds_table = _as_table(doc.get("ds_table"), len(sem), len(sem_hat), "ds_table")
    dx_table = _as_table(doc.get("dx_table"), len(dat), len(dat_hat), "dx_table")
    source = JointSource(pmf)
    problems = validate_source(source)
    if problems:
        raise ModelError("; ".join(problems))
    spec = DistortionSpec.build(source, ds_table, dx_table)
    alphabets = {
        "semantic": sem,
        "data": dat,
        "semantic_hat": sem_hat,
        "data_hat": dat_hat,
    }
    return source, spec, alphabets


def dump_source_file(path, source: JointSource, spec: DistortionSpec, alphabets: dict | None = None) -> None:
    """Write the JSON document read back by :func:`load_source_file`."""
    if alphabets is None:
        alphabets = {
            "semantic": list(range(source.semantic_alphabet_size)),
            "data": list(range(source.data_alphabet_size)),
            "semantic_hat": list(range(spec.n_semantic_hat)),
            "data_hat": list(range(spec.n_data_hat)),
        }
    doc = {
        "semantic_alphabet": alphabets["semantic"],
        "data_alphabet": alphabets["data"],
        "reconstruction_alphabets": {
            "semantic": alphabets["semantic_hat"],
            "data": alphabets["data_hat"],
        },
        "joint_pmf": source.joint_pmf.tolist(),
        "ds_table": spec.ds_table.tolist(),
        "dx_table": spec.dx_table.tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
