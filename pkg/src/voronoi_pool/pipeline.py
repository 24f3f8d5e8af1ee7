"""End-to-end descriptor pipeline: pool, whiten, scale."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .config import RunConfig
from .pooling import PoolingNets, init_mlp, pool_batch
from .whitening import DEFAULT_EPS, scale, zca_whiten

ABLATIONS = ("rblw", "svdpi", "whiten")


class PipelineError(RuntimeError):
    """A per-scan failure; carries the offending scan id."""

    def __init__(self, scan_id, cause: Exception):
        super().__init__(f"scan {scan_id}: {type(cause).__name__}: {cause}")
        self.scan_id = scan_id
        self.cause = cause


@dataclass(frozen=True)
class PipelineSpec:
    """How pooled cell matrices become descriptors.

    ``ablate`` may hold ``rblw`` (shrinkage weight forced to 0), ``svdpi``
    (analytic eigen backward) and ``whiten`` (whitening replaced by a plain
    flatten).
    """

    sigma: float
    eps: float = DEFAULT_EPS
    ablate: frozenset = field(default_factory=frozenset)
    eig_backward: str | None = None  # overrides the mode implied by ``ablate``

    def __post_init__(self):
        unknown = set(self.ablate) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation(s) {sorted(unknown)}; choose from {ABLATIONS}")

    @property
    def backward(self) -> str:
        if self.eig_backward is not None:
            return self.eig_backward
        return "analytic" if "svdpi" in self.ablate else "svdpi"

    @property
    def rho(self):
        return 0.0 if "rblw" in self.ablate else None


def parse_ablations(text: str | None) -> frozenset:
    if not text or text == "none":
        return frozenset()
    parts = frozenset(p.strip() for p in text.split(",") if p.strip())
    unknown = parts - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablation(s) {sorted(unknown)}; choose from {ABLATIONS}")
    return parts


def init_nets(cfg: RunConfig, rng: np.random.Generator | None = None) -> PoolingNets:
    rng = cfg.rng(stream=2) if rng is None else rng
    H = cfg.hidden
    proj = init_mlp(rng, cfg.C_in, H, cfg.C, momentum=cfg.momentum)
    score = init_mlp(rng, cfg.C_in, H, cfg.M, momentum=cfg.momentum)
    return PoolingNets(proj, score)


def finish(Xt, spec: PipelineSpec, details: dict | None = None):
    """Whiten (unless ablated) and scale one pooled C x M matrix."""
    if "whiten" in spec.ablate:
        return scale(Xt, spec.sigma)
    Z = zca_whiten(Xt, spec.eps, spec.rho, spec.backward, details)
    if details is not None:
        details["whitened"] = dc.data_of(Z)
    return scale(Z, spec.sigma)


def forward(nets: PoolingNets, scans: list[np.ndarray], spec: PipelineSpec, weights: dict | None = None,
            stats_out: dict | None = None, details: list | None = None) -> list:
    """Scaled descriptor column vectors for co-batched scans (traced when ``weights`` are)."""
    pooled = pool_batch(nets, scans, weights, stats_out)
    out = []
    for i, Xt in enumerate(pooled):
        d = None
        if details is not None:
            d = {"pooled": dc.data_of(Xt)}
            details.append(d)
        out.append(finish(Xt, spec, d))
    return out


def describe(nets: PoolingNets, data: np.ndarray, spec: PipelineSpec, ids=None,
             details: list | None = None, chunk: int = 64) -> np.ndarray:
    """(N, C*M) descriptors in eval mode, one scan at a time through whitening.

    Pooling runs in eval mode so each descriptor depends on its own scan only;
    chunking is purely for speed. Failures raise :class:`PipelineError`.
    """
    was_train = nets.proj.train
    nets.set_train(False)
    try:
        N = len(data)
        ids = np.arange(N) if ids is None else np.asarray(ids)
        out = np.empty((N, nets.C * nets.M))
        for start in range(0, N, chunk):
            block = [np.asarray(s, dtype=np.float64) for s in data[start:start + chunk]]
            try:
                pooled = pool_batch(nets, block)
            except (ValueError, FloatingPointError, ArithmeticError) as exc:
                raise PipelineError(ids[start], exc) from exc
            for k, Xt in enumerate(pooled):
                d = None
                if details is not None:
                    d = {"pooled": np.asarray(Xt)}
                try:
                    with np.errstate(all="raise"):
                        v = finish(Xt, spec, d)
                except Exception as exc:  # any component failure names the scan
                    raise PipelineError(ids[start + k], exc) from exc
                out[start + k] = np.asarray(v).ravel()
                if details is not None:
                    details.append(d)
        return out
    finally:
        nets.set_train(was_train)
