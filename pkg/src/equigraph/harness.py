"""Training, evaluation, equivariance and gradient checks, multi-seed experiments."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .blocks import Model, ModelConfig
from .geometry import (ConfigurationError, figure_one_graph, sample_local_transform,
                       sample_transform, transform_sample)
from .graph import Dataset, GraphBatch, GraphDims, GraphSample, permute_nodes
from .nn import Adam, DropoutStream, cross_entropy, dump_params, load_params
from .polytopes import TEST_COLUMNS
from .seeding import child_rng, child_seed

RESULT_COLUMNS = ("block", "rho", "psi", "dim", "train_acc", *TEST_COLUMNS, "seed_count",
                  "augment_k")
GROUPS = ("e3", "co", "conf", "perm", "local")
EVAL_CHUNK_ROWS = 200_000


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunResult:
    config: dict
    seed: int
    epochs: int
    lr: float
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    train_acc: float = float("nan")
    test_acc: dict[str, float] = field(default_factory=dict)
    seconds_per_step: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


# --- batching helpers ---------------------------------------------------------------

def batches(samples: Sequence[GraphSample], max_rows: int = EVAL_CHUNK_ROWS) -> Iterable[GraphBatch]:
    """Consecutive batches whose node+edge+angle row count stays under ``max_rows``."""
    chunk, rows = [], 0
    for s in samples:
        r = s.num_nodes + s.num_edges + len(s.angles)
        if chunk and rows + r > max_rows:
            yield GraphBatch(chunk)
            chunk, rows = [], 0
        chunk.append(s)
        rows += r
    if chunk:
        yield GraphBatch(chunk)


def predict_logits(model: Model, samples: Sequence[GraphSample]) -> np.ndarray:
    if not samples:
        return np.zeros((0, model.num_classes))
    return np.concatenate([model.logits(b) for b in batches(samples)])


def predictions(logits: np.ndarray) -> np.ndarray:
    # np.argmax breaks ties towards the lowest class index
    return np.argmax(logits, axis=1)


def evaluate(model: Model, dataset: Dataset | Sequence[GraphSample]) -> float:
    samples = list(dataset)
    if not samples:
        return float("nan")
    labels = np.asarray([s.label for s in samples])
    return float(np.mean(predictions(predict_logits(model, samples)) == labels))


def class_counts(model: Model, dataset: Dataset) -> np.ndarray:
    preds = predictions(predict_logits(model, list(dataset)))
    return np.bincount(preds, minlength=model.num_classes)


# --- training -----------------------------------------------------------------------

def build_model(config: ModelConfig, dims: GraphDims) -> Model:
    return Model(config, dims)


def train(config: ModelConfig, dataset: Dataset, epochs: int = 1000, lr: float = 1e-3,
          seed: int | None = None, batch_size: int | None = None,
          log: Callable[[int, float, float], None] | None = None) -> tuple[Model, RunResult]:
    """Adam on mean softmax cross-entropy; full batch unless ``batch_size`` is given."""
    if seed is not None:
        config = config.with_seed(seed)
    samples = list(dataset)
    if not samples:
        raise ValueError("empty training set")
    model = Model(config, samples[0].dims)
    n_cls = model.num_classes
    bad = [s.label for s in samples if s.label is None or not 0 <= s.label < n_cls]
    if bad:
        raise ValueError(f"training labels {bad[:3]} incompatible with {n_cls} classes")
    params = model.parameters()
    opt = Adam(params, lr=lr)
    stream = DropoutStream(child_seed(config.seed, "dropout"))
    order_rng = child_rng(config.seed, "shuffle")
    full = GraphBatch(samples) if batch_size is None else None
    result = RunResult(config.to_dict(), config.seed, epochs, lr)
    steps, start = 0, time.perf_counter()
    for epoch in range(epochs):
        if full is not None:
            groups = [full]
        else:
            perm = order_rng.permutation(len(samples))
            groups = [GraphBatch([samples[k] for k in perm[a:a + batch_size]])
                      for a in range(0, len(samples), batch_size)]
        total, correct = 0.0, 0
        for batch in groups:
            with T.Tape() as tape:
                logits = model(batch, training=True, stream=stream)
                loss = cross_entropy(logits, batch.labels)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"loss became {loss.item()} at epoch {epoch}")
            grads = tape.backward(loss, params)
            opt.step(grads)
            steps += 1
            total += loss.item() * batch.num_graphs
            correct += int(np.sum(predictions(logits.data) == batch.labels))
        result.losses.append(total / len(samples))
        result.accuracies.append(correct / len(samples))
        if log is not None:
            log(epoch, result.losses[-1], result.accuracies[-1])
    result.seconds_per_step = (time.perf_counter() - start) / max(steps, 1)
    result.train_acc = evaluate(model, samples)
    return model, result


# --- checkpoints --------------------------------------------------------------------

def checkpoint_text(model: Model) -> str:
    head = json.dumps({"config": model.config.to_dict(), "dims": model.dims.to_dict()})
    return head[:-1] + ', "params": ' + dump_params(model.parameters()) + "}\n"


def save_checkpoint(model: Model, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(checkpoint_text(model))
    return path


def load_checkpoint(path: str | Path) -> Model:
    doc = json.loads(Path(path).read_text())
    model = Model(ModelConfig.from_dict(doc["config"]), GraphDims.from_dict(doc["dims"]))
    load_params(doc["params"], model.parameters())
    return model


# --- equivariance -------------------------------------------------------------------

@dataclass
class EquivarianceReport:
    group: str
    trials: int
    max_deviation: float
    tolerance: float
    passed: bool
    worst: dict | None = None
    deviations: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("deviations")
        return d

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} group={self.group} trials={self.trials} "
                f"max|dlogit|={self.max_deviation:.3e} tol={self.tolerance:.1e}")


def _draw(group: str, g: GraphSample, rng, gamma_range) -> tuple[GraphSample, dict]:
    n = g.coords.shape[1]
    if group == "perm":
        perm = rng.permutation(g.num_nodes)
        return permute_nodes(g, perm), {"family": "permutation", "perm": perm.tolist()}
    if group == "local":
        spec = sample_local_transform(g, rng)
    elif group == "e3":
        spec = sample_transform("orthogonal", n, rng)
    elif group in ("co", "conf"):
        spec = sample_transform("orthogonal-dilation", n, rng, gamma_range=gamma_range,
                                gamma_dist="log-uniform")
        if group == "co":
            spec.q = np.zeros(n)
    else:
        raise ConfigurationError(f"unknown group tag {group!r}; expected one of {GROUPS}")
    return transform_sample(spec, g), spec.to_dict()


def check_equivariance(model: Model, graphs: Sequence[GraphSample], group: str,
                       trials: int = 100, tol: float = 1e-9, seed: int = 0,
                       gamma_range=(1e-2, 1e2)) -> EquivarianceReport:
    """Compare logits of each graph with those of transformed copies.

    ``e3``: rotations/reflections with translations; ``co``: ``gamma Q x``;
    ``conf``: ``gamma Q x + q``; ``perm``: node relabelling; ``local``: rigid
    rotation of one side of a bridge about the bridge.  Dilations are drawn
    log-uniformly from ``gamma_range``.
    """
    if group not in GROUPS:
        raise ConfigurationError(f"unknown group tag {group!r}; expected one of {GROUPS}")
    if trials < 1:
        raise ConfigurationError("trials must be positive")
    graphs = list(graphs)
    rng = child_rng(seed, f"equivariance:{group}")
    base = predict_logits(model, graphs)
    worst_dev, worst, devs = -1.0, None, []
    for _ in range(trials):
        moved, specs = [], []
        for g in graphs:
            h, spec = _draw(group, g, rng, gamma_range)
            moved.append(h)
            specs.append(spec)
        diff = np.abs(predict_logits(model, moved) - base).max(axis=1)
        k = int(np.argmax(diff))
        devs.append(float(diff[k]))
        if diff[k] > worst_dev:
            worst_dev, worst = float(diff[k]), {"graph": k, **specs[k]}
    max_dev = max(devs)
    return EquivarianceReport(group, trials, max_dev, tol, bool(max_dev < tol), worst, devs)


# --- gradient check ---------------------------------------------------------------------

@dataclass
class GradCheckReport:
    checked: int
    skipped_small: int
    skipped_unstable: int
    max_rel_error: float
    tol: float
    passed: bool
    worst: str = ""

    @property
    def skipped(self) -> int:
        return self.skipped_small + self.skipped_unstable

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} checked={self.checked} skipped={self.skipped} "
                f"(below resolution {self.skipped_small}, unstable difference "
                f"{self.skipped_unstable}) max_rel_error={self.max_rel_error:.3e} "
                f"tol={self.tol:.1e} worst={self.worst}")


def gradcheck_samples(dim: int = 3, num_classes: int = 5, seed: int = 0) -> list[GraphSample]:
    """Small labelled graphs for gradient checks.

    A single bond, a triangle, two triangles joined by a bond and a random
    seven-node ring with chords.  Small graphs keep the loss of an untrained
    sum-aggregation model moderate, which keeps finite differences accurate.
    """
    if dim < 3:
        raise ConfigurationError("gradient-check graphs need dimension >= 3")
    rng = child_rng(seed, "gradcheck-graphs")

    def pad(coords):
        coords = np.asarray(coords, dtype=float)
        return np.hstack([coords, 0.1 * rng.standard_normal((len(coords), dim - 3))])

    def both(und):
        return [(a, b) for a, b in und] + [(b, a) for a, b in und]

    pair = GraphSample(pad([[0.0, 0.0, 0.0], [0.9, 0.3, -0.2]]), both([(0, 1)]))
    tri = GraphSample(pad([[0.0, 0.0, 0.0], [1.0, 0.1, 0.0], [0.3, 0.8, 0.2]]),
                      both([(0, 1), (1, 2), (0, 2)]))
    hinge = figure_one_graph()[0]
    hinge = GraphSample(pad(hinge.coords), hinge.edges)
    ring = [(k, (k + 1) % 7) for k in range(7)] + [(0, 3), (2, 5)]
    rand = GraphSample(rng.standard_normal((7, dim)), both(ring))
    graphs = [pair, tri, hinge, rand]
    for k, g in enumerate(graphs):
        g.label = k % num_classes
    return graphs


def grad_check(model: Model, samples: Sequence[GraphSample], h: float = 1e-6, tol: float = 1e-4,
               coords: int = 200, seed: int = 0, floor: float = 1e-8,
               noise_factor: float = 10.0, max_draws: int | None = None) -> GradCheckReport:
    """Reverse-mode gradients vs central differences on sampled parameter coordinates.

    Coordinates are drawn without replacement until ``coords`` of them have
    been compared.  A coordinate is skipped, and counted as such, when the
    finite difference cannot resolve it: either both gradients are below
    ``max(floor, noise_factor * eps * |L| / (h * tol))`` (rounding noise of the
    loss would dominate), or the differences at steps ``h`` and ``10 h``
    disagree by more than ``tol``.  Neither test looks at the analytic value
    alone, so a wrong gradient cannot hide in the skipped set.  At most
    ``max_draws`` coordinates (default ``20 * coords``) are drawn.
    """
    batch = GraphBatch(list(samples))
    params = model.parameters()

    def loss_value() -> float:
        return cross_entropy(model(batch), batch.labels).item()

    with T.Tape() as tape:
        loss = cross_entropy(model(batch), batch.labels)
    grads = tape.backward(loss, params)
    resolution = max(floor, noise_factor * np.finfo(float).eps * max(1.0, abs(loss.item()))
                     / (h * tol))
    names = [k for k in params if params[k].size]
    sizes = np.asarray([params[k].size for k in names])
    bounds = np.cumsum(sizes)
    order = child_rng(seed, "gradcheck").permutation(int(bounds[-1]))
    order = order[:20 * coords if max_draws is None else max_draws]

    def central(p, i, step):
        old = p[i]
        p[i] = old + step
        plus = loss_value()
        p[i] = old - step
        minus = loss_value()
        p[i] = old
        return (plus - minus) / (2 * step)

    worst, max_err, checked, small, unstable = "", 0.0, 0, 0, 0
    for flat in order:
        if checked >= coords:
            break
        p_idx = int(np.searchsorted(bounds, flat, side="right"))
        name = names[p_idx]
        local = int(flat - (bounds[p_idx] - sizes[p_idx]))
        p = params[name].data.reshape(-1)
        numeric = central(p, local, h)
        analytic = float(grads[name].reshape(-1)[local])
        scale = max(abs(numeric), abs(analytic))
        if scale < resolution:
            small += 1
            continue
        coarse = central(p, local, 10 * h)
        if abs(numeric - coarse) > tol * max(abs(numeric), abs(coarse)):
            unstable += 1
            continue
        checked += 1
        err = abs(numeric - analytic) / scale
        if err > max_err:
            max_err, worst = err, f"{name}[{local}]"
    passed = checked >= coords and max_err < tol
    return GradCheckReport(checked, small, unstable, max_err, tol, bool(passed), worst)


# --- multi-seed experiments -------------------------------------------------------------

def _describe(config: ModelConfig) -> tuple[str, str, str]:
    b = config.blocks[0]
    return config.label, b.aggregation, "-" if b.kind == "gn" else b.psi.kind


def run_seed(config: ModelConfig, splits: Mapping[str, Dataset], seed: int, epochs: int,
             lr: float) -> tuple[Model, RunResult]:
    model, result = train(config, splits["train"], epochs=epochs, lr=lr, seed=seed)
    for column in TEST_COLUMNS:
        if column in splits:
            result.test_acc[column] = evaluate(model, splits[column])
    return model, result


def _run_seed_worker(args) -> tuple[RunResult, str]:
    config_dict, splits, seed, epochs, lr = args
    model, result = run_seed(ModelConfig.from_dict(config_dict), splits, seed, epochs, lr)
    return result, checkpoint_text(model)


def worker_count() -> int:
    env = os.environ.get("EQUIGRAPH_THREADS")
    n = os.cpu_count() or 1
    if env:
        n = min(n, max(1, int(env)))
    return n


def run_seeds(config: ModelConfig, splits: Mapping[str, Dataset], seeds: Sequence[int],
              epochs: int = 1000, lr: float = 1e-3,
              workers: int | None = None) -> list[tuple[RunResult, str]]:
    """Independent runs per seed, returned with their checkpoint text in seed order.

    Runs fan out over processes when more than one worker is allowed.
    """
    workers = worker_count() if workers is None else workers
    jobs = [(config.to_dict(), dict(splits), int(s), epochs, lr) for s in seeds]
    if workers <= 1 or len(jobs) == 1:
        return [_run_seed_worker(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_run_seed_worker, jobs))


def aggregate_row(config: ModelConfig, results: Sequence[RunResult], dim: int,
                  augment_k: int = 0) -> dict:
    block, rho, psi = _describe(config)
    row = {"block": block, "rho": rho, "psi": psi, "dim": dim,
           "seed_count": len(results), "augment_k": augment_k}
    row["train_acc"] = format_cell([r.train_acc for r in results])
    for column in TEST_COLUMNS:
        vals = [r.test_acc[column] for r in results if column in r.test_acc]
        row[column] = format_cell(vals) if vals else ""
    return row


def multi_seed_experiment(config: ModelConfig, splits: Mapping[str, Dataset], n_seeds: int = 10,
                          epochs: int = 1000, lr: float = 1e-3, first_seed: int = 0,
                          workers: int | None = None) -> tuple[dict, list[RunResult]]:
    if n_seeds < 2:
        raise ValueError("a multi-seed experiment needs at least two seeds")
    seeds = range(first_seed, first_seed + n_seeds)
    results = [r for r, _ in run_seeds(config, splits, seeds, epochs, lr, workers)]
    meta = splits["train"].metadata
    row = aggregate_row(config, results, meta.get("dim", 0), meta.get("augment_k", 0))
    return row, results


def format_cell(values: Sequence[float]) -> str:
    vals = np.asarray(values, dtype=float)
    return f"{vals.mean():.4f}±{vals.std():.4f}"


def parse_cell(cell: str) -> tuple[float, float]:
    if not cell:
        return float("nan"), float("nan")
    mean, _, std = cell.partition("±")
    return float(mean), float(std or 0.0)


def rows_to_csv(rows: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k, "") for k in RESULT_COLUMNS})
    return buf.getvalue()


def read_results_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or not {"block", "rho", "train_acc"} <= set(reader.fieldnames):
        raise ValueError("results CSV lacks the block/rho/train_acc columns")
    rows = []
    for k, row in enumerate(reader):
        for col in ("train_acc", *TEST_COLUMNS):
            if row.get(col):
                try:
                    parse_cell(row[col])
                except ValueError:
                    raise ValueError(f"row {k + 1}, column {col}: malformed cell {row[col]!r}")
        rows.append(row)
    return rows
