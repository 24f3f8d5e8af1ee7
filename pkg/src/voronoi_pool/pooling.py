"""Second-order aggregation: projection/score MLPs, soft assignment and F P^T pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

MLP_FIELDS = ("W1", "b1", "gamma", "beta", "W2", "b2")


@dataclass
class MlpParams:
    """Two linear layers with batch norm and GELU on the hidden layer."""

    W1: np.ndarray  # H x C_in
    b1: np.ndarray  # H x 1
    gamma: np.ndarray  # H x 1
    beta: np.ndarray  # H x 1
    running_mean: np.ndarray  # H x 1
    running_var: np.ndarray  # H x 1
    W2: np.ndarray  # C_out x H
    b2: np.ndarray  # C_out x 1
    momentum: float = 0.1
    train: bool = False

    def __post_init__(self):
        H, c_in = self.W1.shape
        for name in ("b1", "gamma", "beta", "running_mean", "running_var"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1, 1)
            if arr.shape != (H, 1):
                raise ValueError(f"MlpParams.{name} has shape {arr.shape}, expected ({H}, 1)")
            setattr(self, name, arr)
        if self.W2.shape[1] != H:
            raise ValueError(f"MlpParams.W2 {self.W2.shape} does not match hidden width {H}")
        self.b2 = np.asarray(self.b2, dtype=np.float64).reshape(-1, 1)
        if self.b2.shape != (self.W2.shape[0], 1):
            raise ValueError(f"MlpParams.b2 has shape {self.b2.shape}")
        if np.any(self.running_var <= 0):
            raise ValueError("MlpParams.running_var must be positive")

    @property
    def c_in(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def c_out(self) -> int:
        return self.W2.shape[0]

    def trainable(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in MLP_FIELDS}

    def update_running(self, stats: dict) -> None:
        """Fold one batch's statistics into the running estimates."""
        n = stats["count"]
        unbiased = stats["var"] * (n / (n - 1)) if n > 1 else stats["var"]
        m = self.momentum
        self.running_mean = (1 - m) * self.running_mean + m * stats["mean"]
        self.running_var = np.maximum((1 - m) * self.running_var + m * unbiased, dc.BN_VAR_FLOOR)

    def copy(self) -> "MlpParams":
        return MlpParams(**{k: np.array(getattr(self, k)) for k in
                            ("W1", "b1", "gamma", "beta", "running_mean", "running_var", "W2", "b2")},
                         momentum=self.momentum, train=self.train)


def default_hidden(c_in: int, *c_outs: int) -> int:
    return 2 * max(c_in, *c_outs)


def init_mlp(rng: np.random.Generator, c_in: int, hidden: int, c_out: int,
             momentum: float = 0.1) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, identity batch norm."""
    a1 = 1.0 / np.sqrt(c_in)
    a2 = 1.0 / np.sqrt(hidden)
    return MlpParams(
        W1=rng.uniform(-a1, a1, size=(hidden, c_in)),
        b1=np.zeros((hidden, 1)),
        gamma=np.ones((hidden, 1)),
        beta=np.zeros((hidden, 1)),
        running_mean=np.zeros((hidden, 1)),
        running_var=np.ones((hidden, 1)),
        W2=rng.uniform(-a2, a2, size=(c_out, hidden)),
        b2=np.zeros((c_out, 1)),
        momentum=momentum,
    )


def mlp_forward(params: MlpParams, X, weights: dict | None = None, stats_out: dict | None = None):
    """``W2 GELU(BN(W1 X + b1)) + b2`` applied to every column of ``X``.

    ``X`` holds the columns of all co-batched instances side by side; in train
    mode batch-norm statistics are taken over all of them. ``weights`` may
    supply traced stand-ins for the trainable arrays.
    """
    w = params.trainable() if weights is None else weights
    Xd = dc.data_of(X)
    if Xd.shape[0] != params.c_in:
        raise dc.ShapeError(f"mlp_forward: input has {Xd.shape[0]} channels, W1 expects {params.c_in}")
    h = dc.add_col(dc.matmul(w["W1"], X), w["b1"])
    if params.train:
        h = dc.batch_norm(h, w["gamma"], w["beta"], train=True, stats_out=stats_out)
    else:
        h = dc.batch_norm(h, w["gamma"], w["beta"], train=False,
                          running_mean=params.running_mean, running_var=params.running_var)
    return dc.add_col(dc.matmul(w["W2"], dc.gelu(h)), w["b2"])


def soft_assign(raw_scores):
    """Row-wise softmax over the L locations: each cell's weights sum to one."""
    return dc.softmax_rows(raw_scores)


def aggregate(F, P):
    """Global descriptor ``F P^T`` (C x M); column i is cell i's weighted feature average."""
    Fd, Pd = dc.data_of(F), dc.data_of(P)
    if Fd.shape[1] != Pd.shape[1]:
        raise dc.ShapeError(f"aggregate: F has {Fd.shape[1]} locations, P has {Pd.shape[1]}")
    return dc.matmul(F, dc.transpose(P))


def netvlad_bilinear_oracle(F: np.ndarray, P: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Residual-form NetVLAD evaluated literally, location by location."""
    F = np.asarray(F, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    C, L = F.shape
    M = P.shape[0]
    if P.shape[1] != L or centroids.shape != (C, M):
        raise dc.ShapeError(
            f"netvlad_bilinear_oracle: F {F.shape}, P {P.shape}, centroids {centroids.shape} inconsistent")
    out = np.zeros((C, M))
    for i in range(L):
        residuals = F[:, i:i + 1] - centroids  # C x M, column m is f_i - c_m
        weights = np.tile(P[:, i], (C, 1))  # [p_i, ..., p_i]^T, C rows
        out += residuals * weights
    return out


@dataclass
class PoolingNets:
    """Projection and score networks that share one input width."""

    proj: MlpParams
    score: MlpParams

    @property
    def C(self) -> int:
        return self.proj.c_out

    @property
    def M(self) -> int:
        return self.score.c_out

    def set_train(self, train: bool) -> None:
        self.proj.train = train
        self.score.train = train

    def trainable(self) -> dict[str, np.ndarray]:
        out = {f"proj.{k}": v for k, v in self.proj.trainable().items()}
        out.update({f"score.{k}": v for k, v in self.score.trainable().items()})
        return out

    def assign(self, flat: dict[str, np.ndarray]) -> None:
        for key, val in flat.items():
            net, name = key.split(".", 1)
            setattr(getattr(self, net), name, np.array(val, dtype=np.float64))


def pool_batch(nets: PoolingNets, scans: list[np.ndarray], weights: dict | None = None,
               stats_out: dict | None = None) -> list:
    """Global descriptors (C x M each) for co-batched scans.

    ``weights`` maps ``proj.*``/``score.*`` names to traced values; ``stats_out``
    receives the batch-norm statistics under ``proj`` and ``score`` in train mode.
    """
    if not scans:
        return []
    X = np.hstack([np.asarray(s, dtype=np.float64) for s in scans])
    bounds = np.cumsum([0] + [s.shape[1] for s in scans])
    wp = ws = None
    if weights is not None:
        wp = {k.split(".", 1)[1]: v for k, v in weights.items() if k.startswith("proj.")}
        ws = {k.split(".", 1)[1]: v for k, v in weights.items() if k.startswith("score.")}
    sp = sc = None
    if stats_out is not None:
        sp = stats_out.setdefault("proj", {})
        sc = stats_out.setdefault("score", {})
    F = mlp_forward(nets.proj, X, wp, sp)
    S = mlp_forward(nets.score, X, ws, sc)
    out = []
    for i in range(len(scans)):
        a, b = int(bounds[i]), int(bounds[i + 1])
        Fi = dc.slice_cols(F, a, b) if len(scans) > 1 else F
        Si = dc.slice_cols(S, a, b) if len(scans) > 1 else S
        out.append(aggregate(Fi, soft_assign(Si)))
    return out
