"""Regular polytope graphs and the transformed classification benchmark."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .geometry import (DEFAULT_GAMMA_RANGE, ConfigurationError, sample_transform,
                       transform_sample)
from .graph import Dataset, GraphSample
from .seeding import child_rng

PHI = (1.0 + np.sqrt(5.0)) / 2.0

FIXED_DIM = {"dodecahedron": 3, "icosahedron": 3, "cell24": 4, "cell120": 4, "cell600": 4}
ANY_DIM = ("simplex", "hypercube", "orthoplex")
FAMILY_NAMES = ANY_DIM + tuple(FIXED_DIM)

CLASSES = {
    3: ("simplex", "hypercube", "orthoplex", "dodecahedron", "icosahedron"),
    4: ("simplex", "hypercube", "orthoplex", "cell24", "cell120", "cell600"),
    5: ("simplex", "hypercube", "orthoplex"),
}

# Test columns of the benchmark tables: (transform family, mu).
TEST_COLUMNS = {
    "test_orth": ("orthogonal", 0.0),
    "test_orth_dil": ("orthogonal-dilation", 0.0),
    "test_mu0.5": ("non-orthogonal", 0.5),
    "test_mu1.5": ("non-orthogonal", 1.5),
    "test_mu3.0": ("non-orthogonal", 3.0),
}
DEFAULT_COPIES = 20


@dataclass(frozen=True)
class PolytopeFamily:
    name: str
    dim: int

    def __post_init__(self):
        if self.name not in FAMILY_NAMES:
            raise ConfigurationError(f"unknown polytope family {self.name!r}")
        fixed = FIXED_DIM.get(self.name)
        if fixed is not None and self.dim != fixed:
            raise ConfigurationError(f"{self.name} exists only in dimension {fixed}")
        if fixed is None and self.dim < 2:
            raise ConfigurationError(f"{self.name} needs dimension >= 2")


def _signed(values) -> list[tuple[float, ...]]:
    """All sign choices of ``values`` (zeros are not doubled)."""
    choices = [(v,) if v == 0 else (v, -v) for v in values]
    return list(itertools.product(*choices))


def _all_perms(values) -> set[tuple[float, ...]]:
    out = set()
    for signed in _signed(values):
        out.update(itertools.permutations(signed))
    return out


def _even_perms(values) -> set[tuple[float, ...]]:
    out = set()
    n = len(values)
    for perm in itertools.permutations(range(n)):
        inversions = sum(perm[a] > perm[b] for a in range(n) for b in range(a + 1, n))
        if inversions % 2:
            continue
        for signed in _signed(values):
            out.add(tuple(signed[p] for p in perm))
    return out


def _cyclic(values) -> set[tuple[float, ...]]:
    out = set()
    for signed in _signed(values):
        for s in range(3):
            out.add(tuple(signed[(k + s) % 3] for k in range(3)))
    return out


def _unique(points) -> np.ndarray:
    arr = np.asarray(sorted(points), dtype=float)
    keys = np.round(arr, 9)
    _, first = np.unique(keys, axis=0, return_index=True)
    return arr[np.sort(first)]


def _simplex(n: int) -> np.ndarray:
    # standard basis of R^{n+1} expressed in an orthonormal basis of the plane sum(x)=1
    e = np.eye(n + 1) - 1.0 / (n + 1)
    basis = np.linalg.svd(e)[2][:n]
    return (e @ basis.T) / np.sqrt(2.0)


def vertices(family: PolytopeFamily | str, dim: int | None = None) -> np.ndarray:
    """Canonical vertex coordinates.

    Simplex: unit edge, centred.  Hypercube: ``{+-1}^n``.  Orthoplex: ``+-e_d``.
    The 3-D and 4-D exceptional polytopes use the usual golden-ratio families.
    """
    if isinstance(family, str):
        family = PolytopeFamily(family, FIXED_DIM.get(family, dim) if dim is None else dim)
    name, n = family.name, family.dim
    if name == "simplex":
        return _simplex(n)
    if name == "hypercube":
        return np.asarray(list(itertools.product((1.0, -1.0), repeat=n)))
    if name == "orthoplex":
        eye = np.eye(n)
        return np.concatenate([eye, -eye])
    if name == "icosahedron":
        return _unique(_cyclic((0.0, 1.0, PHI)))
    if name == "dodecahedron":
        pts = set(_signed((1.0, 1.0, 1.0))) | _cyclic((0.0, 1.0 / PHI, PHI))
        return _unique(pts)
    if name == "cell24":
        return _unique(_all_perms((1.0, 1.0, 0.0, 0.0)))
    if name == "cell600":
        pts = _all_perms((1.0, 0.0, 0.0, 0.0)) | set(_signed((0.5, 0.5, 0.5, 0.5)))
        pts |= _even_perms((PHI / 2, 0.5, 1.0 / (2 * PHI), 0.0))
        return _unique(pts)
    if name == "cell120":
        s5, ip = np.sqrt(5.0), 1.0 / PHI
        pts = _all_perms((2.0, 2.0, 0.0, 0.0))
        pts |= _all_perms((1.0, 1.0, 1.0, s5))
        pts |= _all_perms((ip * ip, PHI, PHI, PHI))
        pts |= _all_perms((ip, ip, ip, PHI * PHI))
        pts |= _even_perms((0.0, ip * ip, 1.0, PHI * PHI))
        pts |= _even_perms((0.0, ip, PHI, s5))
        pts |= _even_perms((ip, 1.0, PHI, 2.0))
        return _unique(pts)
    raise ConfigurationError(f"unsupported polytope {name!r} in dimension {n}")


def edges_by_min_distance(coords: np.ndarray, rtol: float = 1e-9) -> np.ndarray:
    """Directed edges (both orientations) between vertex pairs at minimal distance."""
    coords = np.asarray(coords, dtype=float)
    if len(coords) < 2:
        raise ConfigurationError("need at least two vertices")
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    iu = np.triu_indices(len(coords), k=1)
    pair = dist[iu]
    positive = pair[pair > 0]
    if positive.size == 0:
        raise ConfigurationError("all vertices coincide")
    shortest = positive.min()
    keep = np.abs(pair - shortest) <= rtol * shortest
    a, b = iu[0][keep], iu[1][keep]
    und = np.column_stack([a, b])
    return np.concatenate([und, und[:, ::-1]])


def normalise(coords: np.ndarray) -> np.ndarray:
    """Centre on the vertex mean and scale to unit circumradius."""
    c = coords - coords.mean(axis=0)
    return c / np.linalg.norm(c, axis=1).max()


def polytope_graph(name: str, dim: int, label: int | None = None,
                   normalised: bool = True, node_features: np.ndarray | None = None) -> GraphSample:
    pts = vertices(PolytopeFamily(name, dim))
    if normalised:
        pts = normalise(pts)
    return GraphSample(pts, edges_by_min_distance(pts), node_features=node_features, label=label)


def class_names(dim: int) -> tuple[str, ...]:
    if dim not in CLASSES:
        raise ConfigurationError(f"benchmark dimension must be one of {sorted(CLASSES)}")
    return CLASSES[dim]


def base_graphs(dim: int, seed: int = 0, node_features: bool = False) -> list[GraphSample]:
    """One untransformed graph per class, labelled by class position.

    With ``node_features`` every vertex gets a scalar feature drawn once per
    (class, vertex); transformed copies inherit it.
    """
    out = []
    for label, name in enumerate(class_names(dim)):
        feats = None
        if node_features:
            n = len(vertices(PolytopeFamily(name, dim)))
            feats = child_rng(seed, f"features:{name}").uniform(0.0, 1.0, size=(n, 1))
        out.append(polytope_graph(name, dim, label, node_features=feats))
    return out


def transformed_copies(graphs: list[GraphSample], family: str, copies: int, rng,
                       mu: float = 0.0, gamma_range=DEFAULT_GAMMA_RANGE,
                       random_gamma: bool = True) -> list[GraphSample]:
    out = []
    for g in graphs:
        for _ in range(copies):
            spec = sample_transform(family, g.coords.shape[1], rng, mu=mu,
                                    gamma_range=gamma_range, random_gamma=random_gamma)
            out.append(transform_sample(spec, g))
    return out


def _metadata(dim, family, mu, gamma_range, seed, copies, random_gamma, **extra) -> dict:
    return {"provenance": f"regular polytopes n={dim}", "dim": dim,
            "classes": list(class_names(dim)), "num_classes": len(class_names(dim)),
            "family": family, "mu": mu, "gamma_range": list(gamma_range), "seed": seed,
            "copies": copies, "random_gamma": random_gamma, "normalisation": "unit circumradius",
            **extra}


def make_dataset(dim: int, family: str = "orthogonal", mu: float = 0.0,
                 gamma_range=DEFAULT_GAMMA_RANGE, copies: int = DEFAULT_COPIES, seed: int = 0,
                 random_gamma: bool = True, node_features: bool = False) -> tuple[Dataset, Dataset]:
    """Train split (one untransformed graph per class) and a transformed test split."""
    if mu < 0:
        raise ConfigurationError("mu must be non-negative")
    if copies < 0:
        raise ConfigurationError("copies must be non-negative")
    train = base_graphs(dim, seed, node_features)
    rng = child_rng(seed, f"test:{family}:{mu}")
    test = transformed_copies(train, family, copies, rng, mu, gamma_range, random_gamma)
    meta = _metadata(dim, family, mu, gamma_range, seed, copies, random_gamma,
                     node_features=node_features)
    return (Dataset(train, {**meta, "split": "train", "augment_k": 0}),
            Dataset(test, {**meta, "split": "test"}))


def make_augmented_trainset(dim: int, family: str = "orthogonal", k: int = 0, seed: int = 0,
                            mu: float = 0.0, gamma_range=DEFAULT_GAMMA_RANGE,
                            random_gamma: bool = True,
                            node_features: bool = False) -> Dataset:
    """``k`` transformed copies per class on top of the untransformed graphs."""
    if k < 0:
        raise ConfigurationError("k must be non-negative")
    base = base_graphs(dim, seed, node_features)
    rng = child_rng(seed, f"augment:{family}:{mu}")
    extra = transformed_copies(base, family, k, rng, mu, gamma_range, random_gamma)
    meta = _metadata(dim, family, mu, gamma_range, seed, k, random_gamma,
                     node_features=node_features)
    return Dataset(base + extra, {**meta, "split": "train", "augment_k": k})


def make_table_splits(dim: int, copies: int = DEFAULT_COPIES, seed: int = 0,
                      gamma_range=DEFAULT_GAMMA_RANGE, random_gamma: bool = True,
                      node_features: bool = False) -> dict[str, Dataset]:
    """Train split plus one test split per table column."""
    splits = {}
    for column, (family, mu) in TEST_COLUMNS.items():
        train, test = make_dataset(dim, family, mu, gamma_range, copies, seed, random_gamma,
                                   node_features)
        splits.setdefault("train", train)
        test.metadata["column"] = column
        splits[column] = test
    return splits
