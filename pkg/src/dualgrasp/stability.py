"""Dual-arm force closure under bounded contact forces.

Each contact's friction cone is discretized into ``k`` unit edges.  The grasp
wrench matrix ``W`` maps nonnegative edge magnitudes ``alpha`` to object
wrenches ``[f; tau / lam]``, with torque taken about a reference point and
divided by ``lam`` so both halves share force units.  Force limits cap the
summed magnitudes within each contact group (by default one group per
gripper).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gripper import Contact
from .simplex import NumericalFailure, linprog

GRAVITY = 9.81


class DegenerateNormal(ValueError):
    pass


@dataclass(frozen=True)
class StabilityParams:
    mu: float = 0.5
    edges: int = 8
    f_max: float = 40.0  # newtons per group
    probe: float = 1.0  # basis-wrench magnitude that must be resisted
    beta_min: float = 1.0
    per_contact_caps: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def closure(self, cs: "ContactSet") -> "ClosureResult":
        return dual_arm_force_closure(cs, self.mu, self.edges, self.f_max, probe=self.probe,
                                      beta_min=self.beta_min, per_contact_caps=self.per_contact_caps)

    def gravity(self, cs: "ContactSet", mass: float) -> bool:
        return gravity_resistance(cs, mass, self.mu, self.edges, self.f_max,
                                  per_contact_caps=self.per_contact_caps)


@dataclass(frozen=True)
class ContactSet:
    contacts: tuple[Contact, ...]  # [g1c1, g1c2, g2c1, g2c2]
    reference_point: np.ndarray
    torque_scale: float

    def __post_init__(self):
        if len(self.contacts) != 4:
            raise ValueError(f"a dual-arm contact set has 4 contacts, got {len(self.contacts)}")
        if not self.torque_scale > 0:
            raise ValueError("torque_scale must be positive")


@dataclass(frozen=True)
class ClosureResult:
    stable: bool
    margin: float
    capacities: np.ndarray = field(repr=False)  # max resisted magnitude per signed basis direction


def friction_cone_edges(normal: np.ndarray, mu: float, k: int) -> np.ndarray:
    """Unit force directions on the boundary of the friction cone around ``normal``."""
    n = np.asarray(normal, dtype=float)
    if abs(np.linalg.norm(n) - 1.0) > 1e-6:
        raise DegenerateNormal(f"normal has length {np.linalg.norm(n):.3g}")
    if mu < 0:
        raise ValueError("friction coefficient must be nonnegative")
    if mu == 0:
        return n[None].copy()
    if k < 3:
        raise ValueError("need at least 3 cone edges")
    helper = np.array([1.0, 0, 0]) if abs(n[0]) < 0.9 else np.array([0, 1.0, 0])
    u = np.cross(n, helper)
    u /= np.linalg.norm(u)
    w = np.cross(n, u)
    theta = 2 * np.pi * np.arange(k) / k
    f = n + mu * (np.cos(theta)[:, None] * u + np.sin(theta)[:, None] * w)
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def wrench_basis(cs: ContactSet, mu: float, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``W`` (6 x 4k) and the contact index of each column."""
    cols, owner = [], []
    for i, c in enumerate(cs.contacts):
        f = friction_cone_edges(c.normal, mu, k)
        tau = np.cross(c.position - cs.reference_point, f) / cs.torque_scale
        cols.append(np.hstack([f, tau]))
        owner += [i] * len(f)
    return np.vstack(cols).T, np.asarray(owner)


def _groups(owner: np.ndarray, f_max: float, per_contact: bool) -> tuple[np.ndarray, np.ndarray]:
    if per_contact:
        return owner, np.full(4, float(f_max))
    return owner // 2, np.full(2, float(f_max))


def _cap_rows(groups: np.ndarray, caps: np.ndarray, extra_cols: int = 0):
    A = np.zeros((len(caps), len(groups) + extra_cols))
    for g in range(len(caps)):
        A[g, : len(groups)] = groups == g
    return A, np.asarray(caps, dtype=float)


def lp_feasible(W: np.ndarray, target: np.ndarray, groups: np.ndarray, caps: np.ndarray) -> bool:
    """Is there ``alpha >= 0`` with ``W alpha = -target`` and per-group sums within ``caps``?

    Raises:
        NumericalFailure: if the simplex exceeds its iteration budget.
    """
    W = np.asarray(W, dtype=float)
    if W.shape[1] < 1:
        raise ValueError("W needs at least one column")
    if np.any(np.asarray(caps) <= 0):
        raise ValueError("caps must be positive")
    A_ub, b_ub = _cap_rows(np.asarray(groups), caps)
    res = linprog(np.zeros(W.shape[1]), W, -np.asarray(target, dtype=float), A_ub, b_ub)
    return res.status == "optimal"


def max_resisted(W: np.ndarray, direction: np.ndarray, groups: np.ndarray, caps: np.ndarray) -> float:
    """Largest ``b >= 0`` such that the external wrench ``b * direction`` can be resisted."""
    W = np.asarray(W, dtype=float)
    m = W.shape[1]
    A_eq = np.hstack([W, np.asarray(direction, dtype=float)[:, None]])
    A_ub, b_ub = _cap_rows(np.asarray(groups), caps, extra_cols=1)
    c = np.zeros(m + 1)
    c[-1] = -1.0
    res = linprog(c, A_eq, np.zeros(W.shape[0]), A_ub, b_ub)
    if res.status != "optimal":
        raise NumericalFailure(f"capacity LP ended {res.status}")
    return float(res.x[-1])


def basis_capacities(W: np.ndarray, groups: np.ndarray, caps: np.ndarray) -> np.ndarray:
    """Capacity along ``+e_1, -e_1, ..., +e_6, -e_6``."""
    out = np.empty(12)
    for i in range(6):
        for s, sign in enumerate((1.0, -1.0)):
            e = np.zeros(6)
            e[i] = sign
            out[2 * i + s] = max_resisted(W, e, groups, caps)
    return out


def dual_arm_force_closure(cs: ContactSet, mu: float = 0.5, k: int = 8, f_max: float = 40.0, *,
                           probe: float = 1.0, beta_min: float = 1.0,
                           per_contact_caps: bool = False) -> ClosureResult:
    """Bounded-force closure test by the 12 signed basis wrenches.

    ``margin`` is the largest magnitude for which all 12 probes stay
    resistible, computed exactly as the smallest per-direction capacity (0
    when below ``beta_min``).  ``stable`` holds when all probes of size
    ``probe`` are resistible.
    """
    W, owner = wrench_basis(cs, mu, k)
    groups, caps = _groups(owner, f_max, per_contact_caps)
    cap = basis_capacities(W, groups, caps)
    margin = float(cap.min())
    if margin < beta_min * (1 - 1e-9):
        margin = 0.0
    stable = margin > 0 and margin >= probe * (1 - 1e-9)
    return ClosureResult(bool(stable), margin, cap)


def probes_feasible(cs: ContactSet, beta: float, mu: float = 0.5, k: int = 8, f_max: float = 40.0,
                    per_contact_caps: bool = False) -> bool:
    """Direct form of the closure test: all 12 probes of size ``beta`` pass ``lp_feasible``."""
    W, owner = wrench_basis(cs, mu, k)
    groups, caps = _groups(owner, f_max, per_contact_caps)
    for i in range(6):
        for sign in (1.0, -1.0):
            e = np.zeros(6)
            e[i] = sign * beta
            if not lp_feasible(W, e, groups, caps):
                return False
    return True


def gravity_resistance(cs: ContactSet, mass: float, mu: float = 0.5, k: int = 8, f_max: float = 40.0,
                       per_contact_caps: bool = False) -> bool:
    """Can the contacts hold the object's weight acting at the reference point?"""
    if not mass > 0:
        raise ValueError("mass must be positive")
    W, owner = wrench_basis(cs, mu, k)
    groups, caps = _groups(owner, f_max, per_contact_caps)
    return lp_feasible(W, np.array([0, 0, -GRAVITY * mass, 0, 0, 0]), groups, caps)
