from __future__ import annotations

import numpy as np
import pytest

from equigraph import tensor as T
from equigraph.blocks import Model, preset
from equigraph.geometry import ConfigurationError, figure_one_graph
from equigraph.graph import Dataset, GraphBatch
from equigraph.harness import (RESULT_COLUMNS, TrainingDiverged, aggregate_row, batches,
                               check_equivariance, checkpoint_text, class_counts, evaluate,
                               format_cell, grad_check, gradcheck_samples, load_checkpoint,
                               multi_seed_experiment, parse_cell, predict_logits, predictions,
                               read_results_csv, rows_to_csv, run_seeds, save_checkpoint, train,
                               worker_count)
from equigraph.polytopes import base_graphs, make_dataset, make_table_splits

from conftest import random_graph


@pytest.fixture(scope="module")
def orth_data():
    return make_dataset(3, "orthogonal", copies=4, seed=0)


def test_training_is_bit_reproducible(orth_data):
    train_ds, _ = orth_data
    _, a = train(preset("dgn", "mean"), train_ds, epochs=15, lr=1e-3, seed=2)
    _, b = train(preset("dgn", "mean"), train_ds, epochs=15, lr=1e-3, seed=2)
    _, c = train(preset("dgn", "mean"), train_ds, epochs=15, lr=1e-3, seed=3)
    assert a.losses == b.losses and a.losses != c.losses
    assert a.losses[-1] < a.losses[0]


def test_zero_epochs_gives_reproducible_init_accuracy(orth_data):
    train_ds, test_ds = orth_data
    m1, r1 = train(preset("agn", "sum"), train_ds, epochs=0, seed=5)
    m2, r2 = train(preset("agn", "sum"), train_ds, epochs=0, seed=5)
    assert r1.losses == [] and r1.train_acc == r2.train_acc
    assert evaluate(m1, test_ds) == evaluate(m2, test_ds)


@pytest.mark.parametrize("block", ["dgn", "sdgn", "agn"])
def test_trained_orthogonal_test_logits_equal_training_logits(block, orth_data):
    train_ds, test_ds = orth_data
    model, _ = train(preset(block, "sum"), train_ds, epochs=20, lr=1e-3, seed=0)
    ref = predict_logits(model, list(train_ds))
    got = predict_logits(model, list(test_ds))
    assert np.abs(got - ref[test_ds.labels]).max() < 1e-9


def test_class_counts_sum_to_test_size(orth_data):
    train_ds, test_ds = orth_data
    model, _ = train(preset("gn", "sum"), train_ds, epochs=5, seed=0)
    counts = class_counts(model, test_ds)
    assert counts.shape == (5,) and counts.sum() == len(test_ds)


def test_argmax_ties_go_to_lowest_index():
    logits = np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0], [3.0, 3.0, 3.0]])
    assert predictions(logits).tolist() == [0, 1, 0]


def test_minibatch_training_and_label_checks(orth_data):
    train_ds, _ = orth_data
    _, r = train(preset("dgn", "sum"), train_ds, epochs=3, batch_size=2, seed=0)
    assert len(r.losses) == 3
    bad = Dataset([g.with_coords(g.coords) for g in train_ds])
    bad.samples[0].label = 7
    with pytest.raises(ValueError):
        train(preset("dgn", "sum"), bad, epochs=1)
    with pytest.raises(ValueError):
        train(preset("dgn", "sum"), Dataset([]), epochs=1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(orth_data):
    train_ds, _ = orth_data
    with pytest.raises(TrainingDiverged):
        train(preset("dgn", "sum"), train_ds, epochs=5, lr=1e300, seed=0)


def test_batches_respect_row_budget(rng):
    gs = [random_graph(rng, 5) for _ in range(7)]
    chunks = list(batches(gs, max_rows=40))
    assert sum(b.num_graphs for b in chunks) == 7 and len(chunks) > 1
    m = Model(preset("agn", "mean", num_classes=3), gs[0].dims)
    np.testing.assert_allclose(np.concatenate([m.logits(b) for b in chunks]),
                               m.logits(GraphBatch(gs)), rtol=1e-12, atol=1e-12)


def test_checkpoint_round_trip_is_exact(tmp_path, orth_data):
    train_ds, test_ds = orth_data
    model, _ = train(preset("combined", "mean", "weighted"), train_ds, epochs=3, seed=1)
    path = save_checkpoint(model, tmp_path / "ckpt.json")
    back = load_checkpoint(path)
    np.testing.assert_array_equal(predict_logits(model, list(test_ds)),
                                  predict_logits(back, list(test_ds)))
    assert checkpoint_text(back) == path.read_text()


def test_equivariance_checker_groups(orth_data):
    _, test_ds = orth_data
    graphs = test_ds.samples[:3]
    dgn = Model(preset("dgn", "sum"), graphs[0].dims)
    assert check_equivariance(dgn, graphs, "e3", trials=5).passed
    assert check_equivariance(dgn, graphs, "perm", trials=5, tol=1e-12).passed
    failing = check_equivariance(dgn, graphs, "conf", trials=5)
    assert not failing.passed and failing.worst["family"] == "orthogonal-dilation"
    assert "FAIL" in failing.summary() and len(failing.deviations) == 5
    agn = Model(preset("agn", "sum"), graphs[0].dims)
    assert check_equivariance(agn, graphs, "conf", trials=5).passed
    co = check_equivariance(agn, graphs, "co", trials=3)
    assert co.passed and co.worst["q"] == [0.0, 0.0, 0.0]
    g, _ = figure_one_graph()
    assert check_equivariance(Model(preset("dgn"), g.dims), [g], "local", trials=5).passed
    with pytest.raises(ConfigurationError):
        check_equivariance(dgn, graphs, "affine")
    with pytest.raises(ConfigurationError):
        check_equivariance(dgn, graphs, "e3", trials=0)


@pytest.mark.parametrize("block", ["gn", "dgn", "agn"])
def test_grad_check_passes(block):
    samples = gradcheck_samples(3, 5)
    report = grad_check(Model(preset(block, "sum"), samples[0].dims), samples, coords=60)
    assert report.passed and report.checked == 60, report.summary()


def test_grad_check_detects_wrong_gradients(monkeypatch):
    samples = gradcheck_samples(3, 5)
    model = Model(preset("dgn", "mean"), samples[0].dims)
    real = T.Tape.backward

    def skewed(self, loss, params):
        grads = real(self, loss, params)
        return {k: g * 1.01 for k, g in grads.items()}

    monkeypatch.setattr(T.Tape, "backward", skewed)
    report = grad_check(model, samples, coords=20)
    assert not report.passed and report.max_rel_error > 5e-3


def test_grad_check_reports_skipped_coordinates():
    samples = gradcheck_samples(3, 5)
    model = Model(preset("dgn", "mean"), samples[0].dims)
    # a zero head cuts every gradient except its own bias
    for name, p in model.parameters().items():
        if name.startswith("readout.head.W"):
            p.data[:] = 0.0
    report = grad_check(model, samples, coords=50)
    assert report.skipped_small > 0 and report.checked < 50 and not report.passed
    assert "below resolution" in report.summary()


def test_gradcheck_samples_are_labelled_and_padded():
    samples = gradcheck_samples(5, 3)
    assert [s.label for s in samples] == [0, 1, 2, 0]
    assert all(s.coords.shape[1] == 5 for s in samples)
    with pytest.raises(ConfigurationError):
        gradcheck_samples(2)


def test_cell_format_round_trip():
    cell = format_cell([1.0, 0.5])
    assert cell == "0.7500±0.2500"
    assert parse_cell(cell) == (0.75, 0.25)
    assert np.isnan(parse_cell("")[0])


def test_results_csv(tmp_path):
    splits = make_table_splits(3, copies=1)
    row, results = multi_seed_experiment(preset("agn", "sum"), splits, n_seeds=2, epochs=2,
                                         workers=1)
    assert len(results) == 2 and row["seed_count"] == 2 and row["block"] == "agn"
    text = rows_to_csv([row])
    assert text.splitlines()[0].split(",") == list(RESULT_COLUMNS)
    assert read_results_csv(text)[0]["test_orth"] == row["test_orth"]
    with pytest.raises(ValueError):
        read_results_csv(text.replace(row["test_orth"], "abc±x"))
    with pytest.raises(ValueError):
        read_results_csv("a,b\n1,2\n")
    with pytest.raises(ValueError):
        multi_seed_experiment(preset("agn"), splits, n_seeds=1)


def test_parallel_runs_match_serial():
    splits = make_table_splits(3, copies=1)
    serial = run_seeds(preset("dgn", "mean"), splits, [0, 1], epochs=2, workers=1)
    parallel = run_seeds(preset("dgn", "mean"), splits, [0, 1], epochs=2, workers=2)
    assert [r.losses for r, _ in serial] == [r.losses for r, _ in parallel]
    assert [c for _, c in serial] == [c for _, c in parallel]


def test_worker_count_respects_env(monkeypatch):
    monkeypatch.setenv("EQUIGRAPH_THREADS", "1")
    assert worker_count() == 1
    monkeypatch.delenv("EQUIGRAPH_THREADS")
    assert worker_count() >= 1


def test_aggregate_row_marks_missing_columns():
    splits = {"train": make_dataset(3, copies=1)[0]}
    row, _ = multi_seed_experiment(preset("gn"), splits, n_seeds=2, epochs=1, workers=1)
    assert row["test_orth"] == "" and row["psi"] == "-"
