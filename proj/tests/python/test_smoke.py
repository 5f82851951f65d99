import csv
import math

import numpy as np
import pytest

import botmoe

TINY = """
synth.n_users = 60
synth.embed_dim = 4
hidden = 8
max_epochs = 3
lr = 0.01
seeds = 0
threads = 1
"""


def test_gate_rows():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(32, 5))
    w = rng.normal(size=(5, 4))
    out = botmoe.gate(x, w, np.zeros((5, 4)), k=2)
    weights = out["weights"]
    assert weights.shape == (32, 4)
    assert np.all((weights > 0).sum(axis=1) == 2)
    assert np.allclose(weights.sum(axis=1), 1.0, atol=1e-12)
    assert np.array_equal(out["top_k"][:, 0], weights.argmax(axis=1))


def test_gate_all_experts_is_softmax():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(8, 3))
    w = rng.normal(size=(3, 3))
    logits = x @ w
    expected = np.exp(logits - logits.max(axis=1, keepdims=True))
    expected /= expected.sum(axis=1, keepdims=True)
    got = botmoe.gate(x, w, np.zeros((3, 3)), k=3)["weights"]
    assert np.allclose(got, expected, atol=1e-12)


def test_balance_loss_values():
    assert botmoe.balance_loss([5.0, 5.0], [5.0, 5.0]) == 0.0
    assert botmoe.balance_loss([10.0, 0.0], [10.0, 0.0]) == pytest.approx(2.0)
    v = np.array([1.0, 2.0, 3.0])
    assert botmoe.cv_squared(v) == pytest.approx(v.var() / v.mean() ** 2)


def test_smooth_load_bounds():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(16, 3))
    load = botmoe.smooth_load(x, rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), k=1)
    assert load.shape == (3,)
    assert np.all(load >= 0) and np.all(load <= 16)


def test_purity_and_spearman():
    assert botmoe.assignment_purity([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    assert botmoe.spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_world_train_checkpoint(tmp_path):
    world = botmoe.generate_world(TINY, seed=0)
    assert world.n_users == 60
    assert set(world.labels) <= {0, 1}
    model = botmoe.train(world, TINY, seed=0)
    pred = model.predict(world)
    assert len(pred) == 60 and set(pred) <= {0, 1}
    path = tmp_path / "model.bin"
    model.save(path)
    again = botmoe.load_checkpoint(path)
    assert np.array_equal(again.logits(world), model.logits(world))
    metrics = model.evaluate(world, "test")
    assert 0.0 <= metrics["accuracy"] <= 1.0
    attacked = botmoe.manipulate(world, "graph", 1.0, seed=3)
    assert attacked.n_edges >= world.n_edges


def test_unknown_key_rejected():
    with pytest.raises(ValueError, match="colour"):
        botmoe.check_config("colour = blue\n")
    with pytest.raises(ValueError):
        botmoe.check_config("experts_graph = 0\n")


def test_run_train_writes_outputs(tmp_path):
    report = botmoe.run("train", TINY, tmp_path)
    assert report["failures"] == []
    assert [a["variant"] for a in report["aggregates"]] == ["full"]
    with open(tmp_path / "metrics.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 3
    assert all(math.isfinite(float(r["loss"])) for r in rows)
    assert (tmp_path / "checkpoint.bin").exists()
