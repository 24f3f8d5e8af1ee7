import numpy as np
import pytest

from voronoi_pool import diffcore as dc
from voronoi_pool.config import RunConfig
from voronoi_pool.pipeline import PipelineSpec, init_nets
from voronoi_pool.synth import generate
from voronoi_pool.train import Divergence, sample_batch, train_step, train_toy, triplet_loss, triplets


def test_triplets_enumeration():
    a, p, n = triplets(np.array([0, 0, 1, 1]))
    assert len(a) == 8
    with pytest.raises(ValueError):
        triplets(np.array([0, 1, 2]))


def test_margin_zero_anchor_equals_positive_is_zero():
    x = np.array([[1.0], [2.0]])
    far = np.array([[5.0], [5.0]])
    loss = triplet_loss([x, x, far, far], np.array([0, 0, 1, 1]), margin=0.0)
    assert float(loss[0, 0]) == 0.0


def test_triplet_loss_matches_loop_oracle(rng):
    D = [rng.normal(size=(4, 1)) for _ in range(6)]
    places = np.array([0, 0, 1, 1, 2, 2])
    want = []
    for a in range(6):
        for p in range(6):
            for n in range(6):
                if a != p and places[a] == places[p] and places[n] != places[a]:
                    want.append(max(0.0, np.sum((D[a] - D[p]) ** 2) - np.sum((D[a] - D[n]) ** 2) + 0.7))
    assert float(triplet_loss(D, places, 0.7)[0, 0]) == pytest.approx(np.mean(want), rel=1e-13)


def test_triplet_loss_gradient(rng):
    D = {f"d{i}": rng.normal(size=(3, 1)) for i in range(4)}
    rep = dc.gradcheck(lambda p: triplet_loss([p[f"d{i}"] for i in range(4)], np.array([0, 0, 1, 1]), 5.0), D)
    assert rep.max_rel_error <= 1e-6


def small_cfg(**kw):
    base = dict(places=8, views=3, epochs=2, batch_size=4, locations=12)
    base.update(kw)
    return RunConfig(**base)


def test_training_is_deterministic():
    cfg = small_cfg()
    scans = generate(cfg)
    a = train_toy(cfg, scans)
    b = train_toy(cfg, scans)
    assert [s.loss for s in a.steps] == [s.loss for s in b.steps]
    for k, v in a.nets.trainable().items():
        assert v.tobytes() == b.nets.trainable()[k].tobytes()
    assert len(a.epochs) == 2 and not a.diverged


def test_sample_batch_two_distinct_views():
    cfg = small_cfg()
    s = generate(cfg)
    idx = sample_batch(np.random.default_rng(0), s, np.array([1, 5]))
    assert list(s.places[idx]) == [1, 1, 5, 5] and idx[0] != idx[1]


def test_divergence_detected_with_batch_seed():
    cfg = small_cfg()
    scans = generate(cfg)
    res = train_toy(cfg, scans, max_grad_norm=1e-12, validate=False)
    assert res.diverged and res.divergence.step == 0
    assert res.steps[-1].batch_seed == res.divergence.batch_seed
    assert "exceeds" in res.divergence.reason


def test_train_step_raises_on_nonfinite():
    cfg = small_cfg()
    nets = init_nets(cfg)
    scans = [np.full((8, 12), np.nan)] * 4
    with pytest.raises(Divergence, match="batch seed 42"):
        train_step(nets, PipelineSpec(cfg.sigma), scans, np.array([0, 0, 1, 1]), 1.0, 0.1, 0, 42)


def test_max_steps_and_loss_decreases():
    cfg = small_cfg(epochs=6)
    res = train_toy(cfg, generate(cfg), max_steps=7, validate=False)
    assert len(res.steps) == 7
    first, last = res.epochs[0].mean_loss, res.epochs[-1].mean_loss
    assert last < first
