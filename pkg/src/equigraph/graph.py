"""Attributed geometric graphs, their angle sets, batching and JSON interchange."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .nn import format_floats
from .tensor import Index


class GraphFormatError(ValueError):
    """A graph document violates the interchange schema."""

    def __init__(self, location: str, message: str):
        super().__init__(f"{location}: {message}")
        self.location = location


def _matrix(values, rows: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((rows, arr.shape[1] if arr.ndim == 2 else 0))
    if arr.ndim == 1 and rows == arr.size and rows > 0:
        arr = arr.reshape(rows, 1)
    if arr.ndim != 2 or arr.shape[0] != rows:
        raise ValueError(f"{name} must have {rows} rows, got shape {arr.shape}")
    return arr


def build_angle_set(edges: Iterable[Sequence[int]], num_nodes: int) -> np.ndarray:
    """All ordered triples ``(j, i, k)`` with ``j != k`` both undirected neighbours of ``i``.

    Rows are sorted by ``i``, then ``j``, then ``k``.  Returns an ``(A, 3)``
    integer array.
    """
    neigh: list[set[int]] = [set() for _ in range(num_nodes)]
    for j, i in edges:
        j, i = int(j), int(i)
        if j == i:
            continue
        neigh[i].add(j)
        neigh[j].add(i)
    rows = []
    for i in range(num_nodes):
        ns = sorted(neigh[i])
        for j in ns:
            for k in ns:
                if j != k:
                    rows.append((j, i, k))
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


def per_vertex_angle_index(angles: Iterable[Sequence[int]]) -> dict[int, list[tuple[int, int]]]:
    """Partition angle triples by their middle vertex: ``i -> [(j, k), ...]``."""
    out: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for j, i, k in angles:
        out[int(i)].append((int(j), int(k)))
    return dict(out)


@dataclass(eq=False)
class GraphSample:
    """One attributed graph with node coordinates.

    ``edges`` holds directed ``(src, dst)`` pairs; undirected graphs store both
    directions.  Missing attribute families are zero-width matrices.
    """

    coords: np.ndarray
    edges: np.ndarray
    node_features: np.ndarray | None = None
    edge_features: np.ndarray | None = None
    angles: np.ndarray | None = None
    angle_features: np.ndarray | None = None
    global_features: np.ndarray | None = None
    label: int | None = None

    def __post_init__(self):
        self.coords = np.atleast_2d(np.asarray(self.coords, dtype=np.float64))
        n = self.coords.shape[0]
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.edges.size:
            if self.edges.min() < 0 or self.edges.max() >= n:
                raise ValueError(f"edge endpoint outside [0, {n})")
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise ValueError("self-loops are not allowed")
        self.node_features = _matrix(
            [] if self.node_features is None else self.node_features, n, "node_features")
        self.edge_features = _matrix(
            [] if self.edge_features is None else self.edge_features, len(self.edges),
            "edge_features")
        if self.angles is None:
            self.angles = build_angle_set(self.edges, n)
        self.angles = np.asarray(self.angles, dtype=np.int64).reshape(-1, 3)
        self.angle_features = _matrix(
            [] if self.angle_features is None else self.angle_features, len(self.angles),
            "angle_features")
        self.global_features = np.asarray(
            [] if self.global_features is None else self.global_features,
            dtype=np.float64).reshape(-1)
        if self.label is not None:
            self.label = int(self.label)

    @property
    def num_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def dims(self) -> "GraphDims":
        return GraphDims(self.node_features.shape[1], self.edge_features.shape[1],
                         self.coords.shape[1], self.angle_features.shape[1],
                         self.global_features.size)

    def with_coords(self, coords: np.ndarray) -> "GraphSample":
        return GraphSample(coords, self.edges, self.node_features, self.edge_features,
                           self.angles, self.angle_features, self.global_features, self.label)

    def same_as(self, other: "GraphSample") -> bool:
        return (self.label == other.label
                and all(np.array_equal(a, b) for a, b in zip(self._arrays(), other._arrays())))

    def _arrays(self):
        return (self.coords, self.edges, self.node_features, self.edge_features, self.angles,
                self.angle_features, self.global_features)


@dataclass(frozen=True)
class GraphDims:
    node: int
    edge: int
    coord: int
    angle: int
    glob: int

    def to_dict(self) -> dict:
        return {"n_v": self.node, "n_e": self.edge, "n_x": self.coord,
                "n_alpha": self.angle, "n_u": self.glob}

    @classmethod
    def from_dict(cls, d: Mapping) -> "GraphDims":
        return cls(d["n_v"], d["n_e"], d["n_x"], d["n_alpha"], d["n_u"])


def undirected_degrees(edges: np.ndarray, num_nodes: int) -> np.ndarray:
    pairs = {tuple(sorted((int(a), int(b)))) for a, b in edges}
    deg = np.zeros(num_nodes, dtype=np.int64)
    for a, b in pairs:
        deg[a] += 1
        deg[b] += 1
    return deg


def permute_nodes(g: GraphSample, perm: Sequence[int]) -> GraphSample:
    """Relabel node ``i`` as ``perm[i]``; edge and angle order is kept."""
    perm = np.asarray(perm, dtype=np.int64)
    n = g.num_nodes
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError("perm must be a permutation of range(num_nodes)")
    inv = np.empty(n, dtype=np.int64)
    inv[perm] = np.arange(n)
    return GraphSample(
        coords=g.coords[inv], edges=perm[g.edges], node_features=g.node_features[inv],
        edge_features=g.edge_features, angles=perm[g.angles] if len(g.angles) else g.angles,
        angle_features=g.angle_features, global_features=g.global_features, label=g.label)


# --- batching -------------------------------------------------------------------

class GraphBatch:
    """Disjoint union of samples with the index maps used by message passing."""

    def __init__(self, samples: Sequence[GraphSample]):
        if not samples:
            raise ValueError("cannot batch zero graphs")
        dims = samples[0].dims
        for s in samples[1:]:
            if s.dims != dims:
                raise ValueError(f"inconsistent sample dimensions {s.dims} vs {dims}")
        self.dims = dims
        self.num_graphs = len(samples)
        offsets = np.cumsum([0] + [s.num_nodes for s in samples])
        self.num_nodes = int(offsets[-1])
        self.coords = np.concatenate([s.coords for s in samples])
        self.node_features = np.concatenate([s.node_features for s in samples])
        self.edge_features = np.concatenate([s.edge_features for s in samples])
        self.angle_features = np.concatenate([s.angle_features for s in samples])
        self.global_features = np.stack([s.global_features for s in samples])
        edges = np.concatenate([s.edges + o for s, o in zip(samples, offsets)])
        angles = np.concatenate([s.angles + o for s, o in zip(samples, offsets)])
        self.edges = edges.reshape(-1, 2)
        self.angles = angles.reshape(-1, 3)
        self.labels = np.asarray([-1 if s.label is None else s.label for s in samples])
        n, g = self.num_nodes, self.num_graphs
        node_graph = np.repeat(np.arange(g), [s.num_nodes for s in samples])
        # node relabelling reorders rows within a graph; pool in a canonical order
        self.node_graph = Index(node_graph, g, canonical=True)
        self.edge_src = Index(self.edges[:, 0], n)
        self.edge_dst = Index(self.edges[:, 1], n)
        self.edge_graph = Index(node_graph[self.edges[:, 1]], g)
        self.angle_j = Index(self.angles[:, 0], n)
        self.angle_i = Index(self.angles[:, 1], n)
        self.angle_k = Index(self.angles[:, 2], n)
        self.angle_graph = Index(node_graph[self.angles[:, 1]], g)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_angles(self) -> int:
        return len(self.angles)


# --- JSON interchange -------------------------------------------------------------

def _floats(value: Any, location: str, width: int | None = None) -> list[float]:
    if not isinstance(value, list):
        raise GraphFormatError(location, "expected a list of numbers")
    for k, v in enumerate(value):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise GraphFormatError(f"{location}[{k}]", "expected a number")
    if width is not None and len(value) != width:
        raise GraphFormatError(location, f"expected {width} values, got {len(value)} (ragged rows)")
    return [float(v) for v in value]


def _int(value: Any, location: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise GraphFormatError(location, "expected an integer")
    return value


def read_graph_json(doc: Mapping | str | Path) -> GraphSample:
    """Parse a graph document (a mapping, JSON text or a path to a file)."""
    if isinstance(doc, Path) or (isinstance(doc, str) and not doc.lstrip().startswith("{")):
        doc = json.loads(Path(doc).read_text())
    elif isinstance(doc, str):
        doc = json.loads(doc)
    if not isinstance(doc, Mapping):
        raise GraphFormatError("$", "document must be an object")
    nodes = doc.get("nodes")
    if not isinstance(nodes, list) or not nodes:
        raise GraphFormatError("nodes", "expected a non-empty list")
    coords, feats = [], []
    n_x = n_v = None
    for k, node in enumerate(nodes):
        if not isinstance(node, Mapping) or "coords" not in node:
            raise GraphFormatError(f"nodes[{k}]", "expected an object with 'coords'")
        c = _floats(node["coords"], f"nodes[{k}].coords", n_x)
        f = _floats(node.get("features", []), f"nodes[{k}].features", n_v)
        n_x, n_v = len(c), len(f)
        coords.append(c)
        feats.append(f)
    n = len(nodes)
    edges, efeats = [], []
    n_e = None
    for k, edge in enumerate(doc.get("edges", [])):
        if not isinstance(edge, Mapping):
            raise GraphFormatError(f"edges[{k}]", "expected an object")
        for key in ("src", "dst"):
            if key not in edge:
                raise GraphFormatError(f"edges[{k}]", f"missing '{key}'")
        src = _int(edge["src"], f"edges[{k}].src")
        dst = _int(edge["dst"], f"edges[{k}].dst")
        for key, val in (("src", src), ("dst", dst)):
            if not 0 <= val < n:
                raise GraphFormatError(f"edges[{k}].{key}", f"index {val} outside [0, {n})")
        if src == dst:
            raise GraphFormatError(f"edges[{k}]", "self-loop")
        f = _floats(edge.get("features", []), f"edges[{k}].features", n_e)
        n_e = len(f)
        edges.append((src, dst))
        efeats.append(f)
    angles_doc = doc.get("angles", "auto")
    angle_feats = None
    if angles_doc == "auto":
        angles = None
    elif isinstance(angles_doc, list):
        angles = []
        for k, t in enumerate(angles_doc):
            if not isinstance(t, list) or len(t) != 3:
                raise GraphFormatError(f"angles[{k}]", "expected [j, i, k]")
            tri = [_int(v, f"angles[{k}]") for v in t]
            if not all(0 <= v < n for v in tri):
                raise GraphFormatError(f"angles[{k}]", f"index outside [0, {n})")
            angles.append(tri)
        if "angle_features" in doc:
            angle_feats = [_floats(r, f"angle_features[{k}]")
                           for k, r in enumerate(doc["angle_features"])]
    else:
        raise GraphFormatError("angles", "expected \"auto\" or a list of triples")
    glob = _floats(doc.get("global", []), "global")
    label = doc.get("label")
    if label is not None:
        label = _int(label, "label")
    return GraphSample(
        coords=np.asarray(coords).reshape(n, n_x), edges=np.asarray(edges).reshape(-1, 2),
        node_features=np.asarray(feats).reshape(n, n_v),
        edge_features=np.asarray(efeats).reshape(len(edges), n_e or 0),
        angles=angles, angle_features=angle_feats, global_features=glob, label=label)


def write_graph_json(g: GraphSample) -> str:
    """Serialise ``g``; floats carry 17 significant digits so reading back is exact."""
    nodes = ",\n  ".join(
        f'{{"coords": {format_floats(c)}, "features": {format_floats(f)}}}'
        for c, f in zip(g.coords, g.node_features))
    edges = ",\n  ".join(
        f'{{"src": {int(s)}, "dst": {int(d)}, "features": {format_floats(f)}}}'
        for (s, d), f in zip(g.edges, g.edge_features))
    auto = build_angle_set(g.edges, g.num_nodes)
    same = (len(auto) == len(g.angles)
            and {tuple(r) for r in auto.tolist()} == {tuple(r) for r in g.angles.tolist()})
    parts = [f'"nodes": [\n  {nodes}\n]', f'"edges": [\n  {edges}\n]',
             f'"global": {format_floats(g.global_features)}']
    if g.label is not None:
        parts.append(f'"label": {int(g.label)}')
    if same and g.angle_features.shape[1] == 0:
        parts.append('"angles": "auto"')
    else:
        parts.append(f'"angles": {json.dumps(g.angles.tolist())}')
        if g.angle_features.shape[1]:
            rows = ", ".join(format_floats(r) for r in g.angle_features)
            parts.append(f'"angle_features": [{rows}]')
    return "{" + ",\n".join(parts) + "}\n"


# --- datasets -----------------------------------------------------------------------

@dataclass
class Dataset:
    samples: list[GraphSample]
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.asarray([s.label for s in self.samples])

    def check(self) -> None:
        """Raise if any sample disagrees with the dimensions in the metadata."""
        if not self.samples:
            return
        dims = self.samples[0].dims
        for k, s in enumerate(self.samples):
            if s.dims != dims:
                raise ValueError(f"sample {k} has dims {s.dims}, expected {dims}")
        meta_dims = {key: self.metadata[key] for key in dims.to_dict() if key in self.metadata}
        for key, val in meta_dims.items():
            if dims.to_dict()[key] != val:
                raise ValueError(f"metadata {key}={val} disagrees with samples ({dims})")
        n_cls = self.metadata.get("num_classes")
        if n_cls is not None:
            bad = [s.label for s in self.samples if s.label is not None and not 0 <= s.label < n_cls]
            if bad:
                raise ValueError(f"labels {bad[:5]} outside [0, {n_cls})")


def save_dataset(ds: Dataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(ds.samples):
        (directory / f"sample_{k:05d}.json").write_text(write_graph_json(s))
    meta = dict(ds.metadata)
    if ds.samples:
        meta.update(ds.samples[0].dims.to_dict())
    meta["num_samples"] = len(ds.samples)
    (directory / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    meta_path = directory / "metadata.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"{directory} has no metadata.json")
    meta = json.loads(meta_path.read_text())
    samples = []
    for path in sorted(directory.glob("sample_*.json")):
        try:
            samples.append(read_graph_json(path))
        except GraphFormatError as exc:
            raise GraphFormatError(f"{path.name}:{exc.location}", str(exc)) from exc
    ds = Dataset(samples, meta)
    ds.check()
    return ds
