"""Desk-scale synthetic places: latent local-feature patterns observed by noisy, shuffled scans."""

from __future__ import annotations

import math

import numpy as np

from .config import RunConfig
from .formats import ScanSet

HETERO_TYPES = 4
HETERO_SPREADS = (0.25, 0.5, 1.0, 2.0)


def place_positions(places: int, spacing: float) -> np.ndarray:
    side = math.ceil(math.sqrt(places))
    idx = np.arange(places)
    return np.stack([(idx % side) * spacing, (idx // side) * spacing, np.zeros(places)], axis=1)


def latent_patterns(cfg: RunConfig, rng: np.random.Generator) -> np.ndarray:
    """(P, C_in, L) place patterns.

    The heterogeneous variant draws each location from one of a few feature
    types whose spreads differ by an order of magnitude.
    """
    P, C_in, L = cfg.places, cfg.C_in, cfg.locations
    if not cfg.hetero:
        return rng.normal(size=(P, C_in, L))
    centers = rng.normal(scale=2.0, size=(HETERO_TYPES, C_in))
    spreads = np.asarray(HETERO_SPREADS)
    types = rng.integers(0, HETERO_TYPES, size=(P, L))
    noise = rng.normal(size=(P, C_in, L))
    return centers[types].transpose(0, 2, 1) + spreads[types][:, None, :] * noise


def generate(cfg: RunConfig) -> ScanSet:
    """``places * views`` scans; scan id = place * views + view.

    Each scan is its place's pattern plus i.i.d. noise, columns shuffled, and
    placed within 0.5 m of the place centre. In the heterogeneous variant each
    scan also gets a random gain and a random per-channel offset.
    """
    cfg.validate()
    rng = cfg.rng(stream=1)
    P, V = cfg.places, cfg.views
    patterns = latent_patterns(cfg, rng)
    centers = place_positions(P, cfg.spacing)
    N = P * V
    data = np.empty((N, cfg.C_in, cfg.locations))
    pos = np.empty((N, 3))
    for p in range(P):
        for v in range(V):
            k = p * V + v
            scan = patterns[p] + cfg.noise * rng.normal(size=patterns[p].shape)
            if cfg.hetero:
                gain = math.exp(rng.uniform(-math.log(cfg.gain_range), math.log(cfg.gain_range)))
                offset = rng.normal(scale=cfg.offset_scale, size=(cfg.C_in, 1))
                scan = gain * scan + offset
            data[k] = scan[:, rng.permutation(cfg.locations)]
            r = 0.5 * math.sqrt(rng.uniform())
            theta = rng.uniform(0.0, 2.0 * math.pi)
            pos[k] = centers[p] + (r * math.cos(theta), r * math.sin(theta), 0.0)
    places = np.repeat(np.arange(P), V)
    views = np.tile(np.arange(V), P)
    return ScanSet(np.arange(N, dtype=np.uint64), places.astype(np.uint32), views.astype(np.uint32), pos, data)


def split_heldout(scans: ScanSet) -> tuple[ScanSet, ScanSet]:
    """(database, queries): the last view of every place is held out as a query."""
    last = scans.views.max()
    return scans.subset(scans.views != last), scans.subset(scans.views == last)
