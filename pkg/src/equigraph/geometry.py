"""Distances, angles, group-element samplers and coordinate transforms."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .graph import GraphSample

FAMILIES = ("orthogonal", "orthogonal-dilation", "non-orthogonal", "local")
DEGENERACY = 1e-9
TRANSLATION_RANGE = 5.0
DEFAULT_GAMMA_RANGE = (0.5, 2.0)
CALIBRATION_DRAWS = 10_000


class DegenerateGeometryError(ValueError):
    """A distance or angle is undefined because points coincide."""


class ConfigurationError(ValueError):
    pass


def squared_distance(xi, xj) -> float:
    xi, xj = np.asarray(xi, dtype=float), np.asarray(xj, dtype=float)
    if xi.shape != xj.shape:
        raise ValueError(f"dimension mismatch {xi.shape} vs {xj.shape}")
    d = xi - xj
    return float(d @ d)


def angle(xj, xi, xk, triple: tuple | None = None) -> float:
    """Angle at ``xi`` between the rays towards ``xj`` and ``xk``, in radians."""
    a = np.asarray(xj, dtype=float) - np.asarray(xi, dtype=float)
    b = np.asarray(xk, dtype=float) - np.asarray(xi, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= DEGENERACY or nb <= DEGENERACY:
        raise DegenerateGeometryError(f"degenerate ray in angle triple {triple or '(j, i, k)'}")
    c = np.clip(a @ b / (na * nb), -1.0, 1.0)
    return float(np.arccos(c))


def edge_lengths(coords: np.ndarray, edges: np.ndarray) -> np.ndarray:
    d = coords[edges[:, 0]] - coords[edges[:, 1]]
    return np.sqrt(np.einsum("ij,ij->i", d, d))


def angles_of(coords: np.ndarray, triples: np.ndarray) -> np.ndarray:
    """Vectorised :func:`angle` over ``(j, i, k)`` rows."""
    if len(triples) == 0:
        return np.zeros(0)
    a = coords[triples[:, 0]] - coords[triples[:, 1]]
    b = coords[triples[:, 2]] - coords[triples[:, 1]]
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    bad = np.flatnonzero((na <= DEGENERACY) | (nb <= DEGENERACY))
    if bad.size:
        raise DegenerateGeometryError(
            f"degenerate ray in angle triple {tuple(int(v) for v in triples[bad[0]])}")
    c = np.einsum("ij,ij->i", a, b) / (na * nb)
    return np.arccos(np.clip(c, -1.0, 1.0))


# --- samplers -----------------------------------------------------------------

def sample_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed element of O(n) (QR of a Gaussian matrix, sign-fixed)."""
    if n < 1:
        raise ValueError("n must be positive")
    z = rng.standard_normal((n, n))
    q, r = np.linalg.qr(z)
    return q * np.sign(np.diag(r))


def _frobenius_deviation(eps: float, m: np.ndarray) -> np.ndarray:
    n = m.shape[-1]
    b = np.eye(n) + eps * m
    g = np.einsum("tki,tkj->tij", b, b) - np.eye(n)
    return np.sqrt(np.einsum("tij,tij->t", g, g))


def mean_orthogonality_defect(mats: np.ndarray) -> float:
    """Empirical mean of ``||A^T A - I||_F`` over a stack of matrices."""
    n = mats.shape[-1]
    g = np.einsum("tki,tkj->tij", mats, mats) - np.eye(n)
    return float(np.sqrt(np.einsum("tij,tij->t", g, g)).mean())


@lru_cache(maxsize=None)
def calibrate_perturbation(n: int, mu: float, draws: int = CALIBRATION_DRAWS) -> float:
    """Scale ``eps`` so that ``A = Q (I + eps M)`` has ``E||A^T A - I||_F = mu``.

    Bisection on ``[0, 10]`` against a fixed Monte-Carlo sample of ``M``.
    """
    if mu < 0:
        raise ConfigurationError("mu must be non-negative")
    if mu == 0:
        return 0.0
    m = np.random.default_rng([n, 7919]).standard_normal((draws, n, n))
    lo, hi = 0.0, 10.0
    if _frobenius_deviation(hi, m).mean() < mu:
        raise ConfigurationError(f"cannot reach mu={mu} with eps <= 10 in n={n}")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _frobenius_deviation(mid, m).mean() < mu:
            lo = mid
        else:
            hi = mid
    eps = 0.5 * (lo + hi)
    if abs(_frobenius_deviation(eps, m).mean() - mu) > 1e-6 * max(mu, 1.0):
        raise ConfigurationError(f"calibration for mu={mu}, n={n} did not converge")
    return eps


@dataclass
class TransformSpec:
    """``x -> gamma * A x + q``, optionally applied only to the rows in ``mask``."""

    A: np.ndarray
    q: np.ndarray
    gamma: float = 1.0
    family: str = "orthogonal"
    mu: float | None = None
    mask: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown transform family {self.family!r}")
        if self.gamma <= 0:
            raise ConfigurationError("gamma must be positive")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.int64).reshape(-1)

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    def orthogonality_defect(self) -> float:
        g = self.A.T @ self.A - np.eye(self.dim)
        return float(np.linalg.norm(g))

    def to_dict(self) -> dict:
        d = {"family": self.family, "gamma": self.gamma, "A": self.A.tolist(),
             "q": self.q.tolist(), "mu": self.mu}
        if self.mask is not None:
            d["mask"] = self.mask.tolist()
        d.update(self.extra)
        return d

    @classmethod
    def identity(cls, n: int) -> "TransformSpec":
        return cls(np.eye(n), np.zeros(n))


def _sample_gamma(rng, gamma_range, dist: str) -> float:
    lo, hi = gamma_range
    if not 0 < lo <= hi:
        raise ConfigurationError(f"gamma range must lie in (0, inf), got {gamma_range}")
    if dist == "log-uniform":
        return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    if dist == "uniform":
        return float(rng.uniform(lo, hi))
    raise ConfigurationError(f"unknown gamma distribution {dist!r}")


def sample_transform(family: str, n: int, rng: np.random.Generator, mu: float = 0.0,
                     gamma_range: Sequence[float] = DEFAULT_GAMMA_RANGE,
                     random_gamma: bool = True, gamma_dist: str = "uniform",
                     translation: float = TRANSLATION_RANGE) -> TransformSpec:
    """Draw a global transform from one of the test families.

    ``random_gamma`` only matters for the non-orthogonal family, where it
    decides whether a dilation is drawn alongside the distorted matrix.
    """
    if mu < 0:
        raise ConfigurationError("mu must be non-negative")
    q = rng.uniform(-translation, translation, size=n)
    Q = sample_orthogonal(n, rng)
    if family == "orthogonal":
        return TransformSpec(Q, q, 1.0, family)
    if family == "orthogonal-dilation":
        return TransformSpec(Q, q, _sample_gamma(rng, gamma_range, gamma_dist), family)
    if family == "non-orthogonal":
        eps = calibrate_perturbation(n, float(mu))
        A = Q @ (np.eye(n) + eps * rng.standard_normal((n, n)))
        gamma = _sample_gamma(rng, gamma_range, gamma_dist) if random_gamma else 1.0
        return TransformSpec(A, q, gamma, family, mu=float(mu))
    raise ConfigurationError(f"sample_transform does not draw family {family!r}")


def rotation_about_axis(p: np.ndarray, r: np.ndarray, theta: float,
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Rotation by ``theta`` fixing the line through ``p`` and ``r``.

    The rotation plane is a random plane orthogonal to the axis (needs
    ``n >= 3``).  Returns ``(A, q)`` with ``x -> A x + q``.
    """
    p, r = np.asarray(p, float), np.asarray(r, float)
    n = p.size
    axis = r - p
    norm = np.linalg.norm(axis)
    if norm <= DEGENERACY:
        raise DegenerateGeometryError("rotation axis endpoints coincide")
    if n < 3:
        raise ConfigurationError("an axis rotation needs at least 3 dimensions")
    basis = np.linalg.qr(np.column_stack([axis / norm, rng.standard_normal((n, 2))]))[0]
    u, w = basis[:, 1], basis[:, 2]
    A = (np.eye(n) + (np.cos(theta) - 1.0) * (np.outer(u, u) + np.outer(w, w))
         + np.sin(theta) * (np.outer(w, u) - np.outer(u, w)))
    return A, p - A @ p


def bridge_sites(g: GraphSample) -> list[tuple[int, int, np.ndarray]]:
    """Hinges for local transforms: ``(a, b, mask)`` for every bridge ``a - b``.

    ``mask`` is the side containing ``b`` once the bridge is cut; rotating it
    about the line through ``x_a`` and ``x_b`` preserves every edge length and
    every angle of the angle set.
    """
    pairs = {tuple(sorted((int(s), int(d)))) for s, d in g.edges}
    adj: dict[int, set[int]] = {i: set() for i in range(g.num_nodes)}
    for a, b in pairs:
        adj[a].add(b)
        adj[b].add(a)
    sites = []
    for a, b in sorted(pairs):
        for lo, hi in ((a, b), (b, a)):
            seen, stack = {hi}, [hi]
            while stack:
                cur = stack.pop()
                for nxt in adj[cur]:
                    if (cur, nxt) in ((hi, lo),) or nxt in seen:
                        continue
                    seen.add(nxt)
                    stack.append(nxt)
            if lo not in seen:
                sites.append((lo, hi, np.asarray(sorted(seen), dtype=np.int64)))
    return sites


def check_local_mask(g: GraphSample, mask: Sequence[int], axis: tuple[int, int]) -> None:
    """Raise unless ``mask`` is separated from the rest of ``g`` by the hinge ``axis``."""
    inside = set(int(v) for v in mask)
    if not inside:
        raise ConfigurationError("local transform needs a non-empty mask")
    a, b = axis
    for s, d in g.edges:
        s, d = int(s), int(d)
        crossing = (s in inside) != (d in inside)
        if crossing and {s, d} != {a, b}:
            raise ConfigurationError(f"edge ({s}, {d}) crosses the mask boundary off the hinge")


def sample_local_transform(g: GraphSample, rng: np.random.Generator,
                           site: tuple[int, int, np.ndarray] | None = None) -> TransformSpec:
    """Rigidly rotate one side of a bridge about the bridge line."""
    sites = bridge_sites(g) if site is None else [site]
    if not sites:
        raise ConfigurationError("graph has no bridge to hinge a local transform on")
    a, b, mask = sites[int(rng.integers(len(sites)))]
    check_local_mask(g, mask, (a, b))
    theta = float(rng.uniform(0.1, 2 * np.pi - 0.1))
    A, q = rotation_about_axis(g.coords[a], g.coords[b], theta, rng)
    return TransformSpec(A, q, 1.0, "local", mask=mask, extra={"axis": [a, b], "theta": theta})


def apply_transform(spec: TransformSpec, coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=float)
    if coords.shape[1] != spec.dim or spec.q.size != spec.dim:
        raise ValueError(f"transform of dimension {spec.dim} on coordinates {coords.shape}")
    moved = spec.gamma * coords @ spec.A.T + spec.q
    if spec.mask is None:
        return moved
    out = coords.copy()
    out[spec.mask] = moved[spec.mask]
    return out


def transform_sample(spec: TransformSpec, g: GraphSample) -> GraphSample:
    return g.with_coords(apply_transform(spec, g.coords))


# --- fixed-parameter coordinate maps ----------------------------------------------

def psi_identity(coords: np.ndarray) -> np.ndarray:
    return np.array(coords, dtype=float)


def psi_scale(coords: np.ndarray, a: float) -> np.ndarray:
    return a * np.asarray(coords, dtype=float)


def psi_shift(coords: np.ndarray, shift) -> np.ndarray:
    return np.asarray(coords, dtype=float) + np.asarray(shift, dtype=float)


def psi_rigid(coords: np.ndarray, Q: np.ndarray, shift) -> np.ndarray:
    return np.asarray(coords, dtype=float) @ np.asarray(Q).T + np.asarray(shift, dtype=float)


def psi_neighbour_difference(coords: np.ndarray, edges: np.ndarray, weights) -> np.ndarray:
    """``x_i + sum_{j in N_i} a_ji (x_j - x_i)`` for fixed per-edge weights ``a_ji``."""
    coords = np.asarray(coords, dtype=float)
    w = np.broadcast_to(np.asarray(weights, dtype=float), (len(edges),))
    out = coords.copy()
    np.add.at(out, edges[:, 1], w[:, None] * (coords[edges[:, 0]] - coords[edges[:, 1]]))
    return out


def figure_one_graph() -> tuple[GraphSample, tuple[int, int, np.ndarray]]:
    """Two triangles joined by a single bond, plus the hinge that rotates one of them."""
    coords = np.array([
        [0.0, 0.0, 0.0], [-0.8, 0.9, 0.1], [1.0, 0.2, -0.1],
        [2.4, 0.1, 0.3], [3.1, 1.0, -0.4], [3.0, -0.9, 0.5],
    ])
    und = [(0, 1), (0, 2), (1, 2), (2, 3), (3, 4), (3, 5), (4, 5)]
    edges = [(a, b) for a, b in und] + [(b, a) for a, b in und]
    g = GraphSample(coords, edges)
    return g, (2, 3, np.array([3, 4, 5]))
