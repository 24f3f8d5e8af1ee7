"""Toy triplet-loss training of the pooling networks, end to end through whitening."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .config import RunConfig
from .formats import ScanSet
from .linalg import ConvergenceError
from .metrics import build_run, map_at_k, recall_at
from .pipeline import PipelineSpec, describe, forward, init_nets
from .pooling import PoolingNets
from .synth import split_heldout


class Divergence(FloatingPointError):
    """Non-finite loss or gradient during training."""

    def __init__(self, step: int, batch_seed: int, reason: str):
        super().__init__(f"step {step} (batch seed {batch_seed}): {reason}")
        self.step = step
        self.batch_seed = batch_seed
        self.reason = reason


@dataclass
class StepLog:
    step: int
    epoch: int
    batch_seed: int
    loss: float
    grad_norm: float
    rho_min: float
    rho_max: float


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    val_r1: float
    val_map10: float


@dataclass
class TrainResult:
    nets: PoolingNets
    spec: PipelineSpec
    epochs: list[EpochLog] = field(default_factory=list)
    steps: list[StepLog] = field(default_factory=list)
    divergence: Divergence | None = None

    @property
    def diverged(self) -> bool:
        return self.divergence is not None


def triplets(places: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All (anchor, positive, negative) index triples within a batch."""
    places = np.asarray(places)
    out = [(a, p, n) for a in range(len(places)) for p in range(len(places))
           for n in range(len(places))
           if a != p and places[a] == places[p] and places[n] != places[a]]
    if not out:
        raise ValueError("batch holds no valid triplet (need two places with two scans each)")
    return tuple(np.array(col, dtype=int) for col in zip(*out))


def triplet_loss(descs: list, places, margin: float):
    """Mean of ``max(0, d(a,p) - d(a,n) + margin)`` over all in-batch triplets.

    ``d`` is the squared Euclidean distance between scaled descriptors.
    """
    a, p, n = triplets(places)
    N, T = len(descs), len(a)
    D = dc.concat_cols(descs)  # dims x N
    eye = np.eye(N)
    ones = np.ones((1, dc.data_of(D).shape[0]))

    def sq_dist(i, j):
        diff = dc.matmul(D, eye[:, i] - eye[:, j])  # dims x T
        return dc.matmul(ones, dc.mul(diff, diff))  # 1 x T

    hinge = dc.relu(dc.add(dc.sub(sq_dist(a, p), sq_dist(a, n)), np.full((1, T), float(margin))))
    return dc.mean(hinge)


def evaluate(nets: PoolingNets, spec: PipelineSpec, database: ScanSet, queries: ScanSet,
             radius: float = 3.0) -> tuple[float, float]:
    """(R@1, MAP@10) of held-out queries against the database."""
    qd = describe(nets, queries.data, spec, queries.ids)
    dd = describe(nets, database.data, spec, database.ids)
    run = build_run(qd, dd, queries.positions, database.positions, radius, queries.ids, database.ids)
    return recall_at(run, k=1), map_at_k(run, 10)


def sample_batch(rng: np.random.Generator, train: ScanSet, places: np.ndarray) -> np.ndarray:
    """Two distinct training views of each listed place; returns scan indices."""
    idx = []
    for pl in places:
        cand = np.flatnonzero(train.places == pl)
        idx.extend(rng.choice(cand, size=2, replace=False))
    return np.array(idx, dtype=int)


def train_step(nets: PoolingNets, spec: PipelineSpec, scans: list[np.ndarray], places, margin: float,
               lr: float, step: int, batch_seed: int, max_grad_norm: float | None = None):
    """One gradient-descent step; returns (loss, grad norm, per-scan rho). Raises on divergence."""
    nets.set_train(True)
    tape = dc.Tape()
    leaves = {k: tape.leaf(v, k) for k, v in nets.trainable().items()}
    stats: dict = {}
    details: list = []
    with np.errstate(all="ignore"):
        try:
            descs = forward(nets, scans, spec, leaves, stats, details)
        except (ValueError, ArithmeticError, ConvergenceError) as exc:
            # non-finite values reaching the eigensolver surface here
            raise Divergence(step, batch_seed, f"forward failed: {exc}") from exc
        loss = triplet_loss(descs, places, margin)
        lval = loss.item()
        if not math.isfinite(lval):
            raise Divergence(step, batch_seed, f"non-finite loss {lval}")
        grads = tape.backward(loss)
    g = {k: tape.grad_of(grads, leaf) for k, leaf in leaves.items()}
    sq = sum(float(np.sum(v * v)) for v in g.values())
    gnorm = math.sqrt(sq) if math.isfinite(sq) else math.inf
    rhos = [d["rho"] for d in details if "rho" in d]
    if not math.isfinite(gnorm):
        raise Divergence(step, batch_seed, "non-finite gradient")
    if max_grad_norm is not None and gnorm > max_grad_norm:
        raise Divergence(step, batch_seed, f"gradient norm {gnorm:.3e} exceeds {max_grad_norm:.3e}")
    nets.assign({k: v - lr * g[k] for k, v in nets.trainable().items()})
    nets.proj.update_running(stats["proj"])
    nets.score.update_running(stats["score"])
    return lval, gnorm, rhos


def train_toy(cfg: RunConfig, scans: ScanSet, ablate: frozenset = frozenset(), max_steps: int | None = None,
              max_grad_norm: float | None = None, validate: bool = True, nets: PoolingNets | None = None,
              on_epoch=None) -> TrainResult:
    """Mini-batch triplet training with plain gradient descent.

    The last view of each place is held out for validation; batches take
    ``batch_size`` places and two of their remaining views. A non-finite loss
    or gradient (or a norm above ``max_grad_norm``) stops training and is
    recorded in ``TrainResult.divergence`` together with the batch seed.
    """
    cfg.validate()
    train, heldout = split_heldout(scans)
    counts = np.bincount(train.places)
    eligible = np.flatnonzero(counts >= 2)
    if len(eligible) < 2:
        raise ValueError("training needs at least two places with two or more training views")
    nets = init_nets(cfg) if nets is None else nets
    spec = PipelineSpec(cfg.sigma, cfg.eps, frozenset(ablate))
    result = TrainResult(nets, spec)
    order_rng = cfg.rng(stream=4)
    step = 0
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(eligible)
        losses = []
        for start in range(0, len(perm), cfg.batch_size):
            chunk = perm[start:start + cfg.batch_size]
            if len(chunk) < 2:
                continue
            if max_steps is not None and step >= max_steps:
                break
            batch_seed = int(order_rng.integers(0, 2**63 - 1))
            idx = sample_batch(np.random.Generator(np.random.Philox(key=[cfg.seed, batch_seed])), train, chunk)
            try:
                loss, gnorm, rhos = train_step(nets, spec, list(train.data[idx]), train.places[idx], cfg.margin,
                                               cfg.lr, step, batch_seed, max_grad_norm)
            except Divergence as exc:
                result.divergence = exc
                result.steps.append(StepLog(step, epoch, batch_seed, math.nan, math.inf, math.nan, math.nan))
                return result
            result.steps.append(StepLog(step, epoch, batch_seed, loss, gnorm,
                                        min(rhos, default=math.nan), max(rhos, default=math.nan)))
            losses.append(loss)
            step += 1
        r1 = m10 = math.nan
        if validate and len(heldout):
            r1, m10 = evaluate(nets, spec, train, heldout)
        log = EpochLog(epoch, float(np.mean(losses)) if losses else math.nan, r1, m10)
        result.epochs.append(log)
        if on_epoch is not None:
            on_epoch(log)
        if max_steps is not None and step >= max_steps:
            break
    nets.set_train(False)
    return result
