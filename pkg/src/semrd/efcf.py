"""Closed forms for the erased-fair-coin-flips instance.

A fair bit S is observed through a binary erasure channel with erasure
rate ``delta``; the data letter X lives on {0, 1, e} and both distortions
are Hamming.  Index convention everywhere in this module: hidden letters
and their reconstructions are [0, 1]; data letters and their
reconstructions are [0, 1, e] with the erasure symbol at index 2.

The admissible budget plane splits into five closed regions D1..D5, each
with an explicit rate formula and optimal channel:

* D1 -- small data budget: the data reconstruction does the work and the
  hidden reconstruction copies it (guessing on erasures).
* D2 -- medium data budget, generous hidden budget: no erasure symbol is
  ever emitted.
* D3 -- data budget so large it never binds: a pure hidden-source problem.
* D4 -- both budgets bind: the genuinely two-dimensional region.
* D5 -- both budgets past their saturation points: rate zero.

The region formulas agree on shared boundaries; when a pair sits on a
boundary the D4-side values are reported and the extra memberships are
kept in the region's member set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import DistortionPair, DistortionSpec, JointSource, ModelError
from .rd_numeric import TestChannel

E = 2  # index of the erasure symbol in the data alphabet [0, 1, e]

REGION_PRIORITY = ("D4", "D1", "D2", "D3", "D5")


class RegionError(ModelError):
    """Budget pair outside the admissible plane or the wrong region."""


@dataclass(frozen=True)
class EfcfParams:
    """Erasure rate and budget pair, validated against the preconditions."""

    delta: float
    pair: DistortionPair

    def __post_init__(self):
        d = self.delta
        if not (0.0 < d < 1.0 / 3.0):
            raise ModelError(f"erasure rate must satisfy 0 < delta < 1/3, got {d}")
        if self.pair.ds < d / 2.0:
            raise ModelError(
                f"hidden budget {self.pair.ds} below its floor delta/2 = {d / 2.0}"
            )
        # dx >= 0 already enforced by DistortionPair

    @property
    def ds(self) -> float:
        return self.pair.ds

    @property
    def dx(self) -> float:
        return self.pair.dx


@dataclass(frozen=True)
class Region:
    """Primary region label plus every region whose closed set contains the pair."""

    label: str
    members: frozenset[str]

    @property
    def on_boundary(self) -> bool:
        return len(self.members) > 1


@dataclass(frozen=True)
class EfcfPoint:
    """All closed-form quantities at one (delta, ds, dx) point.

    ``j0`` is the tilted value of a non-erased data letter, ``je`` of the
    erased letter; ``v`` / ``v_tilde`` are the two dispersions in nats^2;
    ``p_y_erasure`` is the chance the optimal data reconstruction emits the
    erasure symbol.
    """

    region: Region
    rate: float
    lambda_s: float
    lambda_x: float
    j0: float
    je: float
    v: float
    v_tilde: float
    p_y_erasure: float
    channel: TestChannel

    def to_dict(self) -> dict:
        return {
            "region": self.region.label,
            "region_members": sorted(self.region.members),
            "rate": self.rate,
            "lambda_s": self.lambda_s,
            "lambda_x": self.lambda_x,
            "j0": self.j0,
            "je": self.je,
            "v": self.v,
            "v_tilde": self.v_tilde,
            "p_y_erasure": self.p_y_erasure,
        }


def efcf_source(delta: float) -> tuple[JointSource, DistortionSpec]:
    """The joint law and Hamming tables of the instance at erasure rate delta."""
    if not (0.0 < delta < 1.0):
        raise ModelError(f"erasure rate must be in (0, 1), got {delta}")
    half = 0.5 * (1.0 - delta)
    pmf = np.array([[half, 0.0, delta / 2.0], [0.0, half, delta / 2.0]])
    source = JointSource(pmf)
    ds_table = 1.0 - np.eye(2)
    dx_table = 1.0 - np.eye(3)
    return source, DistortionSpec.build(source, ds_table, dx_table)


def _memberships(delta: float, ds: float, dx: float) -> frozenset[str]:
    half = 0.5
    members = set()
    if 0.0 <= dx <= 2.0 * delta and ds >= dx / 2.0 + delta / 2.0:
        members.add("D1")
    if 2.0 * delta <= dx <= half + delta / 2.0 and ds >= dx - delta / 2.0:
        members.add("D2")
    if dx >= ds + delta / 2.0 and delta / 2.0 <= ds <= half:
        members.add("D3")
    if 2.0 * ds - delta <= dx <= ds + delta / 2.0 and delta / 2.0 <= ds <= 1.5 * delta:
        members.add("D4")
    if dx >= half + delta / 2.0 and ds >= half:
        members.add("D5")
    return frozenset(members)


def classify_region(params: EfcfParams) -> Region:
    members = _memberships(params.delta, params.ds, params.dx)
    if not members:
        raise RegionError(
            f"pair ({params.ds}, {params.dx}) matches no region at delta={params.delta}"
        )
    for label in REGION_PRIORITY:
        if label in members:
            return Region(label, members)
    raise AssertionError("unreachable")


def _h(p: float) -> float:
    """Binary entropy in nats with 0 log 0 = 0."""
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -p * math.log(p) - (1.0 - p) * math.log(1.0 - p)


def _entropy3(a: float, b: float, c: float) -> float:
    return sum(-p * math.log(p) for p in (a, b, c) if p > 0.0)


def efcf_rate(params: EfcfParams, region: Region | None = None) -> float:
    """Rate in nats by the primary region's closed form."""
    region = region or classify_region(params)
    d, ds, dx = params.delta, params.ds, params.dx
    label = region.label
    if label == "D1":
        return _h(d) + (1.0 - d) * math.log(2.0) - _h(dx) - dx * math.log(2.0)
    if label == "D2":
        return (1.0 - d) * (math.log(2.0) - _h((dx - d) / (1.0 - d)))
    if label == "D3":
        return (1.0 - d) * (math.log(2.0) - _h((ds - d / 2.0) / (1.0 - d)))
    if label == "D4":
        return (
            _h(d)
            + (1.0 - d) * math.log(2.0)
            - _entropy3(ds - d / 2.0, dx - ds + d / 2.0, 1.0 - dx)
        )
    return 0.0  # D5


def _channel_from_reverse(py: np.ndarray, px_given_y: np.ndarray, pz_given_y: np.ndarray,
                          px: np.ndarray) -> np.ndarray:
    """Conditional law p(z, y | x) of a chain X - Y - Z given its reverse pieces.

    ``px_given_y`` is indexed (x, y), ``pz_given_y`` is indexed (y, z).
    """
    py_given_x = py[None, :] * px_given_y / px[:, None]
    return py_given_x[:, None, :] * pz_given_y.T[None, :, :]


def efcf_channel(params: EfcfParams, region: Region | None = None) -> TestChannel:
    """Optimal test channel (and edge law) of the primary region."""
    region = region or classify_region(params)
    d, ds, dx = params.delta, params.ds, params.dx
    px = np.array([(1.0 - d) / 2.0, (1.0 - d) / 2.0, d])
    label = region.label

    if label == "D1":
        pye = (2.0 * d - dx) / (2.0 - 3.0 * dx)
        py = np.array([(1.0 - d - dx) / (2.0 - 3.0 * dx)] * 2 + [pye])
        px_given_y = np.full((3, 3), dx / 2.0)
        np.fill_diagonal(px_given_y, 1.0 - dx)
        pz_given_y = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
        cond = _channel_from_reverse(py, px_given_y, pz_given_y, px)
    elif label == "D2":
        py = np.array([0.5, 0.5, 0.0])
        px_given_y = np.zeros((3, 3))
        for y in (0, 1):
            for x in (0, 1):
                px_given_y[x, y] = 1.0 - dx if x == y else dx - d
            px_given_y[E, y] = d
        pz_given_y = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
        cond = _channel_from_reverse(py, px_given_y, pz_given_y, px)
    elif label == "D3":
        pz = np.array([0.5, 0.5])
        px_given_z = np.zeros((3, 2))
        for z in (0, 1):
            for x in (0, 1):
                px_given_z[x, z] = 1.0 - ds - d / 2.0 if x == z else ds - d / 2.0
            px_given_z[E, z] = d
        pz_given_x = pz[None, :] * px_given_z / px[:, None]
        cond = np.zeros((3, 2, 3))
        for z in (0, 1):
            cond[:, z, z] = pz_given_x[:, z]  # Y copies Z
    elif label == "D4":
        den = d + 4.0 * dx - 2.0 * ds - 2.0
        edge = np.zeros((2, 3))
        edge[0, 0] = edge[1, 1] = (d + dx - 1.0) / den
        edge[0, E] = edge[1, E] = (dx - ds - d / 2.0) / den
        g = np.array([2.0 * (1.0 - dx) / (1.0 - d)] * 2 + [(1.0 - dx) / d])
        c_same = 1.0
        c_flip = (ds - d / 2.0) / (1.0 - dx)
        c_erase = (d / 2.0 + dx - ds) / (1.0 - dx)
        c = np.zeros((2, 3, 3))
        for z, y, x in [(0, 0, 0), (0, E, E), (1, 1, 1), (1, E, E)]:
            c[z, y, x] = c_same
        for z, y, x in [(0, 0, 1), (0, E, 1), (1, 1, 0), (1, E, 0)]:
            c[z, y, x] = c_flip
        for z, y, x in [(0, 0, E), (0, E, 0), (1, 1, E), (1, E, 1)]:
            c[z, y, x] = c_erase
        cond = np.einsum("zy,x,zyx->xzy", edge, g, c)
    else:  # D5: constant reconstruction, rate zero
        cond = np.zeros((3, 2, 3))
        cond[:, 0, 0] = 1.0
    return TestChannel(cond, px)


def _multipliers(params: EfcfParams, region: Region) -> tuple[float, float]:
    """Budget multipliers: derivatives of the region's closed-form rate.

    Only D4 has both constraints active.  In D1/D2 the hidden budget is
    slack; in D3 the data budget is slack; D5 has both slack.  Values may
    be +inf at the distortion floors (dx = 0, or ds = delta/2 in D4/D3).
    """
    d, ds, dx = params.delta, params.ds, params.dx
    label = region.label
    if label == "D1":
        lam_x = math.inf if dx == 0.0 else math.log(2.0 * (1.0 - dx) / dx)
        return 0.0, lam_x
    if label == "D2":
        lam_x = math.inf if dx == d else math.log((1.0 - dx) / (dx - d))
        return 0.0, lam_x
    if label == "D3":
        lam_s = math.inf if ds == d / 2.0 else math.log((1.0 - d / 2.0 - ds) / (ds - d / 2.0))
        return lam_s, 0.0
    if label == "D4":
        lam_s = math.inf if ds == d / 2.0 else math.log((dx - ds + d / 2.0) / (ds - d / 2.0))
        lam_x = math.inf if dx == ds - d / 2.0 else math.log((1.0 - dx) / (dx - ds + d / 2.0))
        return lam_s, lam_x
    return 0.0, 0.0


def _tilted_pair_from_edge(channel: TestChannel, params: EfcfParams,
                           lam_s: float, lam_x: float) -> tuple[float, float]:
    """(j0, je) evaluated from the edge law; exact outside D4.

    The weight of a reconstruction cell is exp of the multiplier-tilted
    budget slack; infinite multipliers keep only cells within budget.
    """
    d, ds, dx = params.delta, params.ds, params.dx
    edge = channel.edge
    dbar = np.array([  # surrogate Hamming table over (x, z)
        [0.0, 1.0],
        [1.0, 0.0],
        [0.5, 0.5],
    ])
    dxm = 1.0 - np.eye(3)
    out = []
    for x in (0, E):
        total = 0.0
        for z in (0, 1):
            for y in (0, 1, E):
                if edge[z, y] <= 0.0:
                    continue
                if math.isinf(lam_s):
                    if dbar[x, z] > ds:
                        continue
                    ws = 0.0
                else:
                    ws = lam_s * (ds - dbar[x, z])
                if math.isinf(lam_x):
                    if dxm[x, y] > dx:
                        continue
                    wx = 0.0
                else:
                    wx = lam_x * (dx - dxm[x, y])
                total += edge[z, y] * math.exp(ws + wx)
        out.append(-math.log(total))
    return out[0], out[1]


def efcf_point(params: EfcfParams) -> EfcfPoint:
    """Assemble every closed-form quantity at one budget pair.

    D4 uses the explicit multiplier/tilted/dispersion formulas; the other
    regions use their rate derivatives as multipliers and evaluate the
    tilted values through the region's optimal edge law, which the mean
    identity (delta*je + (1-delta)*j0 = rate) then certifies.
    """
    region = classify_region(params)
    d, ds, dx = params.delta, params.ds, params.dx
    rate = efcf_rate(params, region)
    channel = efcf_channel(params, region)
    lam_s, lam_x = _multipliers(params, region)

    if region.label == "D4" and not (math.isinf(lam_s) or math.isinf(lam_x)):
        a = ds - d / 2.0
        b = dx - ds + d / 2.0
        j0 = -lam_s * ds - lam_x * dx - math.log((1.0 - d) / (2.0 * (1.0 - dx)))
        je = -lam_s * ds - lam_x * dx - math.log(math.sqrt(a / b) * d / (1.0 - dx))
        v = d * (1.0 - d) * math.log(math.sqrt(a / b) * 2.0 * d / (1.0 - d)) ** 2
    elif region.label == "D5":
        j0 = je = 0.0
        v = 0.0
    else:
        j0, je = _tilted_pair_from_edge(channel, params, lam_s, lam_x)
        v = d * (1.0 - d) * (je - j0) ** 2

    v_tilde = v + (d / 4.0) * lam_s**2 if not math.isinf(lam_s) else math.inf
    p_y_erasure = float(channel.edge[:, E].sum())
    return EfcfPoint(
        region=region,
        rate=rate,
        lambda_s=lam_s,
        lambda_x=lam_x,
        j0=j0,
        je=je,
        v=v,
        v_tilde=v_tilde,
        p_y_erasure=p_y_erasure,
        channel=channel,
    )
