"""Graph network blocks (GN, DGN, AGN, combined), the scaling layer and the readout.

Every block maps a :class:`State` (coordinates, node, edge, angle and global
embeddings of a :class:`~equigraph.graph.GraphBatch`) to an updated state.
Geometry enters the blocks only through squared edge lengths (DGN), angles
over the angle set (AGN) or both (combined); the GN block sees coordinates as
plain node features.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .geometry import DEGENERACY, DegenerateGeometryError
from .graph import GraphBatch, GraphDims
from .nn import DropoutStream, Mlp
from .seeding import child_rng
from .tensor import Index, Tensor

BLOCK_KINDS = ("gn", "dgn", "agn", "combined")
AGGREGATIONS = ("sum", "mean")
PSI_KINDS = ("identity", "weighted")
PSI_INPUTS = ("edge", "src", "dst", "global")


@dataclass
class PsiChoice:
    """Coordinate update: identity, or ``x_i + sum_j a_ji (x_j - x_i)``.

    ``inputs`` selects what the weight network sees: the updated edge
    embedding, the updated source and target node embeddings and the incoming
    global embedding.  ``("edge",)`` gives the EGNN-style coordinate update.
    """

    kind: str = "identity"
    inputs: tuple[str, ...] = PSI_INPUTS

    def __post_init__(self):
        if self.kind not in PSI_KINDS:
            raise ValueError(f"unknown psi kind {self.kind!r}")
        self.inputs = tuple(self.inputs)
        bad = set(self.inputs) - set(PSI_INPUTS)
        if bad or not self.inputs:
            raise ValueError(f"psi inputs must be a non-empty subset of {PSI_INPUTS}")


@dataclass
class BlockConfig:
    kind: str
    aggregation: str = "sum"
    hidden: int = 64
    edge_dim: int = 32
    node_dim: int = 32
    angle_dim: int = 32
    global_dim: int = 32
    psi: PsiChoice = field(default_factory=PsiChoice)

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if isinstance(self.psi, Mapping):
            self.psi = PsiChoice(**self.psi)


@dataclass
class ReadoutConfig:
    num_classes: int
    node_widths: tuple[int, ...] = (64, 32)
    pooling: str = "sum"
    head_widths: tuple[int, ...] = (64,)

    def __post_init__(self):
        if self.pooling not in AGGREGATIONS:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        self.node_widths = tuple(self.node_widths)
        self.head_widths = tuple(self.head_widths)


@dataclass
class ModelConfig:
    blocks: list[BlockConfig]
    readout: ReadoutConfig
    scaling_layer: bool = False
    alpha_scale: float = 1.0
    dropout: float = 0.0
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        self.blocks = [b if isinstance(b, BlockConfig) else BlockConfig(**b) for b in self.blocks]
        if isinstance(self.readout, Mapping):
            self.readout = ReadoutConfig(**self.readout)
        if not self.blocks:
            raise ValueError("a model needs at least one block")

    def to_dict(self) -> dict:
        d = asdict(self)
        for b in d["blocks"]:
            b["psi"]["inputs"] = list(b["psi"]["inputs"])
        d["readout"]["node_widths"] = list(d["readout"]["node_widths"])
        d["readout"]["head_widths"] = list(d["readout"]["head_widths"])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))

    def with_seed(self, seed: int) -> "ModelConfig":
        return ModelConfig.from_dict({**self.to_dict(), "seed": int(seed)})

    @property
    def label(self) -> str:
        return self.name or preset_label(self)


def preset(block: str, rho: str = "sum", psi: str = "identity", num_classes: int = 5,
           seed: int = 0, embed: int = 32, hidden: int = 64) -> ModelConfig:
    """Polytope-experiment configurations.

    ``block`` is one of ``gn``, ``dgn``, ``sdgn``, ``agn``, ``combined`` or
    ``dgn*`` (sum aggregation with an edge-driven weighted coordinate update).
    AGN stacks two blocks, the others three; all MLPs have one hidden layer.
    """
    block = block.lower()
    scaling = block == "sdgn"
    if block == "dgn*":
        kind, rho, psi_choice = "dgn", "sum", PsiChoice("weighted", ("edge",))
    else:
        kind = {"sdgn": "dgn"}.get(block, block)
        psi_choice = PsiChoice("weighted" if psi in ("weighted", "eq_map") else "identity")
    if kind not in BLOCK_KINDS:
        raise ValueError(f"unknown preset block {block!r}")
    depth = 2 if kind == "agn" else 3
    blocks = [BlockConfig(kind, rho, hidden, embed, embed, embed, embed, psi_choice)
              for _ in range(depth)]
    readout = ReadoutConfig(num_classes, (hidden, embed), rho, (hidden,))
    return ModelConfig(blocks, readout, scaling_layer=scaling, seed=seed, name=block)


def preset_label(cfg: ModelConfig) -> str:
    kind = cfg.blocks[0].kind
    if cfg.scaling_layer and kind == "dgn":
        return "sdgn"
    return kind


# --- geometric features ---------------------------------------------------------

def edge_squared_lengths(x: Tensor, batch: GraphBatch) -> Tensor:
    """``||x_i - x_j||^2`` per directed edge, shape ``(E, 1)``."""
    diff = T.gather(x, batch.edge_src) - T.gather(x, batch.edge_dst)
    return T.sum(T.square(diff), axis=1, keepdims=True)


def triple_angles(x: Tensor, batch: GraphBatch) -> Tensor:
    """Angle at ``i`` of every ``(j, i, k)`` in the angle set, shape ``(A, 1)``."""
    xi = T.gather(x, batch.angle_i)
    rj = T.gather(x, batch.angle_j) - xi
    rk = T.gather(x, batch.angle_k) - xi
    nj = T.sqrt(T.sum(T.square(rj), axis=1, keepdims=True))
    nk = T.sqrt(T.sum(T.square(rk), axis=1, keepdims=True))
    bad = np.flatnonzero((nj.data[:, 0] <= DEGENERACY) | (nk.data[:, 0] <= DEGENERACY))
    if bad.size:
        j, i, k = (int(v) for v in batch.angles[bad[0]])
        raise DegenerateGeometryError(f"degenerate ray in angle triple ({j}, {i}, {k})")
    cos = T.sum(rj * rk, axis=1, keepdims=True) / (nj * nk)
    return T.safe_acos(cos)


def scale_coordinates(coords: np.ndarray, batch: GraphBatch, alpha: float) -> np.ndarray:
    """Rescale each graph so that its longest edge has length ``alpha``."""
    if batch.num_edges == 0:
        raise DegenerateGeometryError("scaling layer needs at least one edge")
    d = coords[batch.edges[:, 0]] - coords[batch.edges[:, 1]]
    lengths = np.sqrt(np.einsum("ij,ij->i", d, d))
    longest = np.zeros(batch.num_graphs)
    np.maximum.at(longest, batch.edge_graph.idx, lengths)
    if np.any(longest <= 0.0):
        bad = int(np.flatnonzero(longest <= 0.0)[0])
        raise DegenerateGeometryError(f"graph {bad} has no edge of positive length")
    gamma = alpha / longest
    return coords * gamma[batch.node_graph.idx][:, None]


def aggregate(values: Tensor, index: Index, how: str) -> Tensor:
    return T.segment_sum(values, index) if how == "sum" else T.segment_mean(values, index)


# --- blocks -----------------------------------------------------------------------

@dataclass
class State:
    x: Tensor
    v: Tensor
    e: Tensor
    a: Tensor
    u: Tensor

    def dims(self) -> GraphDims:
        return GraphDims(self.v.shape[1], self.e.shape[1], self.x.shape[1],
                         self.a.shape[1], self.u.shape[1])


class Block:
    """Shared plumbing: MLP construction and the coordinate map."""

    def __init__(self, cfg: BlockConfig, dims: GraphDims, rng: np.random.Generator, name: str):
        self.cfg = cfg
        self.dims = dims
        self.name = name
        self.mlps: dict[str, Mlp] = {}
        self._build(rng)
        if cfg.kind != "gn" and cfg.psi.kind == "weighted":
            widths = {"edge": cfg.edge_dim, "src": cfg.node_dim, "dst": cfg.node_dim,
                      "global": dims.glob}
            n_in = sum(widths[k] for k in cfg.psi.inputs)
            self._mlp("phi_x", n_in, 1, rng)

    def _mlp(self, key: str, n_in: int, n_out: int, rng, dropout: float = 0.0) -> None:
        self.mlps[key] = Mlp([n_in, self.cfg.hidden, n_out], rng, f"{self.name}.{key}",
                             dropout=dropout)

    def _build(self, rng) -> None:
        raise NotImplementedError

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for m in self.mlps.values():
            out.update(m.parameters())
        return out

    def output_dims(self) -> GraphDims:
        c = self.cfg
        angle = c.angle_dim if c.kind in ("agn", "combined") else self.dims.angle
        return GraphDims(c.node_dim, c.edge_dim, self.dims.coord, angle, c.global_dim)

    def psi(self, s: State, e_new: Tensor, v_new: Tensor, batch: GraphBatch,
            ctx: "Context") -> Tensor:
        if self.cfg.psi.kind == "identity":
            return s.x
        sources = {"edge": (e_new, None), "src": (v_new, batch.edge_src),
                   "dst": (v_new, batch.edge_dst), "global": (s.u, batch.edge_graph)}
        parts = [sources[k] for k in self.cfg.psi.inputs]
        weight = self.mlps["phi_x"].apply_parts(parts, batch.num_edges, *ctx.args)
        step = weight * (T.gather(s.x, batch.edge_src) - T.gather(s.x, batch.edge_dst))
        return s.x + T.segment_sum(step, batch.edge_dst)


@dataclass
class Context:
    training: bool = False
    stream: DropoutStream | None = None

    @property
    def args(self):
        return (self.training, self.stream)


class GNBlock(Block):
    def _build(self, rng):
        d, c = self.dims, self.cfg
        self._mlp("phi_e", 2 * d.node + d.edge + d.glob, c.edge_dim, rng)
        self._mlp("phi_v", d.node + c.edge_dim + d.glob, c.node_dim, rng)
        self._mlp("phi_u", c.node_dim + c.edge_dim + d.glob, c.global_dim, rng)

    def __call__(self, s: State, batch: GraphBatch, ctx: Context) -> State:
        rho, m = self.cfg.aggregation, self.mlps
        e = m["phi_e"].apply_parts(
            [(s.v, batch.edge_src), (s.v, batch.edge_dst), (s.e, None), (s.u, batch.edge_graph)],
            batch.num_edges, *ctx.args)
        v = m["phi_v"].apply_parts(
            [(s.v, None), (aggregate(e, batch.edge_dst, rho), None), (s.u, batch.node_graph)],
            batch.num_nodes, *ctx.args)
        u = m["phi_u"].apply_parts(
            [(aggregate(v, batch.node_graph, rho), None),
             (aggregate(e, batch.edge_graph, rho), None), (s.u, None)],
            batch.num_graphs, *ctx.args)
        return State(s.x, v, e, s.a, u)


class DGNBlock(Block):
    def _build(self, rng):
        d, c = self.dims, self.cfg
        self._mlp("phi_e", d.edge + 2 * d.node + 1 + d.glob, c.edge_dim, rng)
        self._mlp("phi_v", c.edge_dim + d.node + d.glob, c.node_dim, rng)
        self._mlp("phi_u", c.edge_dim + c.node_dim + 1 + d.glob, c.global_dim, rng)

    def __call__(self, s: State, batch: GraphBatch, ctx: Context) -> State:
        rho, m = self.cfg.aggregation, self.mlps
        dist = edge_squared_lengths(s.x, batch)
        e = m["phi_e"].apply_parts(
            [(s.e, None), (s.v, batch.edge_dst), (s.v, batch.edge_src), (dist, None),
             (s.u, batch.edge_graph)], batch.num_edges, *ctx.args)
        v = m["phi_v"].apply_parts(
            [(aggregate(e, batch.edge_dst, rho), None), (s.v, None), (s.u, batch.node_graph)],
            batch.num_nodes, *ctx.args)
        x = self.psi(s, e, v, batch, ctx)
        dist_new = dist if x is s.x else edge_squared_lengths(x, batch)
        u = m["phi_u"].apply_parts(
            [(aggregate(e, batch.edge_graph, rho), None),
             (aggregate(v, batch.node_graph, rho), None),
             (aggregate(dist_new, batch.edge_graph, rho), None), (s.u, None)],
            batch.num_graphs, *ctx.args)
        return State(x, v, e, s.a, u)


class AGNBlock(Block):
    def _build(self, rng):
        d, c = self.dims, self.cfg
        self._mlp("phi_a", 3 * d.node + d.angle + 1 + d.glob, c.angle_dim, rng)
        self._mlp("phi_e", 2 * d.node + d.edge + d.glob, c.edge_dim, rng)
        self._mlp("phi_v", d.node + c.edge_dim + c.angle_dim + d.glob, c.node_dim, rng)
        self._mlp("phi_u", c.node_dim + c.edge_dim + c.angle_dim + d.glob, c.global_dim, rng)

    def _angles_and_edges(self, s: State, batch: GraphBatch, ctx: Context, dist: Tensor | None):
        m = self.mlps
        theta = triple_angles(s.x, batch)
        a = m["phi_a"].apply_parts(
            [(s.v, batch.angle_i), (s.v, batch.angle_j), (s.v, batch.angle_k), (s.a, None),
             (theta, None), (s.u, batch.angle_graph)], batch.num_angles, *ctx.args)
        parts = [(s.v, batch.edge_src), (s.v, batch.edge_dst), (s.e, None)]
        if dist is not None:
            parts.append((dist, None))
        parts.append((s.u, batch.edge_graph))
        e = m["phi_e"].apply_parts(parts, batch.num_edges, *ctx.args)
        return a, e

    def _nodes(self, s, a, e, batch, ctx):
        rho = self.cfg.aggregation
        return self.mlps["phi_v"].apply_parts(
            [(s.v, None), (aggregate(e, batch.edge_dst, rho), None),
             (aggregate(a, batch.angle_i, rho), None), (s.u, batch.node_graph)],
            batch.num_nodes, *ctx.args)

    def __call__(self, s: State, batch: GraphBatch, ctx: Context) -> State:
        rho = self.cfg.aggregation
        a, e = self._angles_and_edges(s, batch, ctx, None)
        v = self._nodes(s, a, e, batch, ctx)
        x = self.psi(s, e, v, batch, ctx)
        u = self.mlps["phi_u"].apply_parts(
            [(aggregate(v, batch.node_graph, rho), None),
             (aggregate(e, batch.edge_graph, rho), None),
             (aggregate(a, batch.angle_graph, rho), None), (s.u, None)],
            batch.num_graphs, *ctx.args)
        return State(x, v, e, a, u)


class CombinedBlock(AGNBlock):
    """Angle update of the AGN with a distance-aware edge update."""

    def _build(self, rng):
        d, c = self.dims, self.cfg
        self._mlp("phi_a", 3 * d.node + d.angle + 1 + d.glob, c.angle_dim, rng)
        self._mlp("phi_e", 2 * d.node + d.edge + 1 + d.glob, c.edge_dim, rng)
        self._mlp("phi_v", d.node + c.edge_dim + c.angle_dim + d.glob, c.node_dim, rng)
        self._mlp("phi_u", c.node_dim + c.edge_dim + d.glob, c.global_dim, rng)

    def __call__(self, s: State, batch: GraphBatch, ctx: Context) -> State:
        rho = self.cfg.aggregation
        a, e = self._angles_and_edges(s, batch, ctx, edge_squared_lengths(s.x, batch))
        v = self._nodes(s, a, e, batch, ctx)
        x = self.psi(s, e, v, batch, ctx)
        u = self.mlps["phi_u"].apply_parts(
            [(aggregate(v, batch.node_graph, rho), None),
             (aggregate(e, batch.edge_graph, rho), None), (s.u, None)],
            batch.num_graphs, *ctx.args)
        return State(x, v, e, a, u)


BLOCK_TYPES = {"gn": GNBlock, "dgn": DGNBlock, "agn": AGNBlock, "combined": CombinedBlock}


class Readout:
    """Node MLP, per-graph pooling, head MLP producing class logits."""

    def __init__(self, cfg: ReadoutConfig, node_width: int, rng, dropout: float = 0.0):
        self.cfg = cfg
        self.node_mlp = Mlp([node_width, *cfg.node_widths], rng, "readout.node", dropout=dropout)
        self.head = Mlp([cfg.node_widths[-1], *cfg.head_widths, cfg.num_classes], rng,
                        "readout.head", dropout=dropout)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.node_mlp.parameters(), **self.head.parameters()}

    def __call__(self, v: Tensor, batch: GraphBatch, ctx: Context) -> Tensor:
        h = self.node_mlp(v, *ctx.args)
        pooled = aggregate(h, batch.node_graph, self.cfg.pooling)
        return self.head(pooled, *ctx.args)


class Model:
    """A stack of blocks followed by the classification readout."""

    def __init__(self, config: ModelConfig, dims: GraphDims):
        self.config = config
        self.dims = dims
        rng = child_rng(config.seed, "init")
        self.coords_as_features = config.blocks[0].kind == "gn"
        cur = dims
        if self.coords_as_features:
            cur = GraphDims(dims.node + dims.coord, dims.edge, dims.coord, dims.angle, dims.glob)
        self.blocks: list[Block] = []
        for k, bcfg in enumerate(config.blocks):
            block = BLOCK_TYPES[bcfg.kind](bcfg, cur, rng, f"block{k}")
            self.blocks.append(block)
            cur = block.output_dims()
        self.readout = Readout(config.readout, cur.node, rng, config.dropout)
        if config.dropout:
            for b in self.blocks:
                for mlp in b.mlps.values():
                    mlp.dropout = config.dropout

    @property
    def num_classes(self) -> int:
        return self.config.readout.num_classes

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for b in self.blocks:
            out.update(b.parameters())
        out.update(self.readout.parameters())
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def initial_state(self, batch: GraphBatch) -> State:
        if batch.dims != self.dims:
            raise T.ShapeError(f"batch dims {batch.dims} do not match model dims {self.dims}")
        coords = batch.coords
        if self.config.scaling_layer:
            coords = scale_coordinates(coords, batch, self.config.alpha_scale)
        v = batch.node_features
        if self.coords_as_features:
            v = np.concatenate([v, coords], axis=1)
        return State(Tensor(coords), Tensor(v), Tensor(batch.edge_features),
                     Tensor(batch.angle_features), Tensor(batch.global_features))

    def run_blocks(self, batch: GraphBatch, training: bool = False,
                   stream: DropoutStream | None = None) -> list[State]:
        """Initial state followed by the output state of every block."""
        ctx = Context(training, stream)
        states = [self.initial_state(batch)]
        for block in self.blocks:
            states.append(block(states[-1], batch, ctx))
        return states

    def __call__(self, batch: GraphBatch, training: bool = False,
                 stream: DropoutStream | None = None) -> Tensor:
        final = self.run_blocks(batch, training, stream)[-1]
        return self.readout(final.v, batch, Context(training, stream))

    def logits(self, batch: GraphBatch) -> np.ndarray:
        return self(batch).data
