"""Binary file formats (all little-endian).

DescriptorDB (``VWDB``)::

    magic "VWDB" | version u16 | flags u16 | count u64 | dims u32 | C u32 | M u32
    count x { id u64 | x f64 | y f64 | z f64 | descriptor dims x f32 }

ModelCheckpoint (``VWMD``)::

    magic "VWMD" | version u16 | C_in u32 | H u32 | C u32 | M u32 | sigma f64 | eps f64
    then for the projection network and then the score network, as f64:
    momentum (1) | W1 (H x C_in, row-major) | b1 (H) | gamma (H) | beta (H)
    | running_mean (H) | running_var (H) | W2 (C_out x H, row-major) | b2 (C_out)

ScanSet (``VWSC``)::

    magic "VWSC" | version u16 | flags u16 | count u64 | C_in u32 | L u32
    count x { id u64 | place u32 | view u32 | x f64 | y f64 | z f64 | data C_in x L f64 row-major }

CovarianceDump (``VWCV``)::

    magic "VWCV" | version u16 | flags u16 | count u64 | C u32 | M u32
    count x { id u64 | rho f64 | Xt (C x M) | Z (C x M) | Sigma | Sigma_RBLW | Q L Q^T  (C x C each) }, f64 row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pooling import MlpParams, PoolingNets

DB_MAGIC = b"VWDB"
MODEL_MAGIC = b"VWMD"
SCAN_MAGIC = b"VWSC"
DUMP_MAGIC = b"VWCV"
VERSION = 1


class FormatError(ValueError):
    pass


def _check_magic(buf: bytes, magic: bytes, what: str, header: str = "<H") -> None:
    if len(buf) < 6 or buf[:4] != magic:
        raise FormatError(f"{what}: bad magic {buf[:4]!r}, expected {magic!r}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise FormatError(f"{what}: unsupported version {version}")
    if len(buf) < 4 + struct.calcsize(header):
        raise FormatError(f"{what}: truncated header")


# ----------------------------------------------------------- descriptor DB

@dataclass
class DescriptorDB:
    ids: np.ndarray  # (N,) uint64
    positions: np.ndarray  # (N, 3) float64
    descriptors: np.ndarray  # (N, C*M) float32
    C: int
    M: int
    flags: int = 0

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.uint64).ravel()
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float32).reshape(len(self.ids), -1)
        if self.descriptors.shape[1] != self.C * self.M:
            raise FormatError(f"descriptor width {self.descriptors.shape[1]} != C*M = {self.C * self.M}")
        if len(self.positions) != len(self.ids):
            raise FormatError("positions and ids differ in length")

    @property
    def dims(self) -> int:
        return self.C * self.M

    def __len__(self) -> int:
        return len(self.ids)

    def matrices(self) -> np.ndarray:
        """Descriptors reshaped to (N, C, M), undoing the column-major flatten."""
        return self.descriptors.astype(np.float64).reshape(len(self), self.M, self.C).transpose(0, 2, 1)


def _db_dtype(dims: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("pos", "<f8", (3,)), ("desc", "<f4", (dims,))])


def write_db(path, db: DescriptorDB) -> None:
    head = DB_MAGIC + struct.pack("<HHQIII", VERSION, db.flags, len(db), db.dims, db.C, db.M)
    rec = np.zeros(len(db), dtype=_db_dtype(db.dims))
    rec["id"], rec["pos"], rec["desc"] = db.ids, db.positions, db.descriptors
    Path(path).write_bytes(head + rec.tobytes())


def read_db(path) -> DescriptorDB:
    buf = Path(path).read_bytes()
    _check_magic(buf, DB_MAGIC, str(path), "<HHQIII")
    _, flags, count, dims, C, M = struct.unpack_from("<HHQIII", buf, 4)
    if dims != C * M:
        raise FormatError(f"{path}: dims {dims} != C*M ({C}*{M})")
    dt = _db_dtype(dims)
    body = buf[4 + struct.calcsize("<HHQIII"):]
    if len(body) != count * dt.itemsize:
        raise FormatError(f"{path}: expected {count} records, payload holds {len(body) / dt.itemsize:g}")
    rec = np.frombuffer(body, dtype=dt)
    return DescriptorDB(rec["id"].copy(), rec["pos"].copy(), rec["desc"].copy(), C, M, flags)


# ----------------------------------------------------------- model checkpoint

@dataclass
class ModelCheckpoint:
    nets: PoolingNets
    sigma: float
    eps: float

    @property
    def C_in(self) -> int:
        return self.nets.proj.c_in

    @property
    def H(self) -> int:
        return self.nets.proj.hidden


def _mlp_blob(p: MlpParams) -> np.ndarray:
    return np.concatenate([[p.momentum], p.W1.ravel(), p.b1.ravel(), p.gamma.ravel(), p.beta.ravel(),
                           p.running_mean.ravel(), p.running_var.ravel(), p.W2.ravel(), p.b2.ravel()])


def _mlp_from(blob: np.ndarray, off: int, c_in: int, H: int, c_out: int) -> tuple[MlpParams, int]:
    def take(n):
        nonlocal off
        out = blob[off:off + n].copy()
        off += n
        return out
    momentum = float(take(1)[0])
    W1 = take(H * c_in).reshape(H, c_in)
    b1, gamma, beta, rm, rv = (take(H) for _ in range(5))
    W2 = take(c_out * H).reshape(c_out, H)
    b2 = take(c_out)
    return MlpParams(W1, b1, gamma, beta, rm, rv, W2, b2, momentum=momentum), off


def save_model(path, ckpt: ModelCheckpoint) -> None:
    nets = ckpt.nets
    if nets.score.hidden != nets.proj.hidden or nets.score.c_in != nets.proj.c_in:
        raise FormatError("projection and score networks must share C_in and H")
    head = MODEL_MAGIC + struct.pack("<HIIIIdd", VERSION, ckpt.C_in, ckpt.H, nets.C, nets.M,
                                     ckpt.sigma, ckpt.eps)
    body = np.concatenate([_mlp_blob(nets.proj), _mlp_blob(nets.score)]).astype("<f8")
    Path(path).write_bytes(head + body.tobytes())


def load_model(path) -> ModelCheckpoint:
    buf = Path(path).read_bytes()
    _check_magic(buf, MODEL_MAGIC, str(path), "<HIIIIdd")
    _, c_in, H, C, M, sigma, eps = struct.unpack_from("<HIIIIdd", buf, 4)
    body = buf[4 + struct.calcsize("<HIIIIdd"):]
    if len(body) % 8:
        raise FormatError(f"{path}: truncated model payload")
    blob = np.frombuffer(body, dtype="<f8")
    expected = 2 * (1 + 5 * H + H * c_in) + (C * H + C) + (M * H + M)
    if blob.size != expected:
        raise FormatError(f"{path}: payload has {blob.size} values, expected {expected}")
    proj, off = _mlp_from(blob, 0, c_in, H, C)
    score, _ = _mlp_from(blob, off, c_in, H, M)
    return ModelCheckpoint(PoolingNets(proj, score), sigma, eps)


# ----------------------------------------------------------- scans

@dataclass
class ScanSet:
    ids: np.ndarray  # (N,) uint64
    places: np.ndarray  # (N,) uint32
    views: np.ndarray  # (N,) uint32
    positions: np.ndarray  # (N, 3)
    data: np.ndarray  # (N, C_in, L)

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, mask) -> "ScanSet":
        mask = np.asarray(mask)
        return ScanSet(self.ids[mask], self.places[mask], self.views[mask], self.positions[mask],
                       self.data[mask])


def _scan_dtype(c_in: int, L: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("place", "<u4"), ("view", "<u4"), ("pos", "<f8", (3,)),
                     ("data", "<f8", (c_in, L))])


def write_scans(path, scans: ScanSet, flags: int = 0) -> None:
    N, c_in, L = scans.data.shape
    head = SCAN_MAGIC + struct.pack("<HHQII", VERSION, flags, N, c_in, L)
    rec = np.zeros(N, dtype=_scan_dtype(c_in, L))
    rec["id"], rec["place"], rec["view"] = scans.ids, scans.places, scans.views
    rec["pos"], rec["data"] = scans.positions, scans.data
    Path(path).write_bytes(head + rec.tobytes())


def read_scans(path) -> ScanSet:
    buf = Path(path).read_bytes()
    _check_magic(buf, SCAN_MAGIC, str(path), "<HHQII")
    _, _flags, count, c_in, L = struct.unpack_from("<HHQII", buf, 4)
    dt = _scan_dtype(c_in, L)
    body = buf[24:]
    if len(body) != count * dt.itemsize:
        raise FormatError(f"{path}: truncated scan file")
    rec = np.frombuffer(body, dtype=dt)
    return ScanSet(rec["id"].copy(), rec["place"].copy(), rec["view"].copy(), rec["pos"].copy(),
                   rec["data"].copy())


# ----------------------------------------------------------- covariance dump

@dataclass
class CovarianceDump:
    ids: np.ndarray
    rho: np.ndarray
    pooled: np.ndarray  # (N, C, M)
    whitened: np.ndarray  # (N, C, M)
    sample_cov: np.ndarray  # (N, C, C)
    shrunk: np.ndarray  # (N, C, C)
    decomposed: np.ndarray  # (N, C, C), Q L Q^T

    def __len__(self) -> int:
        return len(self.ids)


def _dump_dtype(C: int, M: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("rho", "<f8"), ("pooled", "<f8", (C, M)), ("whitened", "<f8", (C, M)),
                     ("sample_cov", "<f8", (C, C)), ("shrunk", "<f8", (C, C)),
                     ("decomposed", "<f8", (C, C))])


def write_dump(path, dump: CovarianceDump) -> None:
    N, C, M = dump.pooled.shape
    head = DUMP_MAGIC + struct.pack("<HHQII", VERSION, 0, N, C, M)
    rec = np.zeros(N, dtype=_dump_dtype(C, M))
    for name in ("rho", "pooled", "whitened", "sample_cov", "shrunk", "decomposed"):
        rec[name] = getattr(dump, name)
    rec["id"] = dump.ids
    Path(path).write_bytes(head + rec.tobytes())


def read_dump(path) -> CovarianceDump:
    buf = Path(path).read_bytes()
    _check_magic(buf, DUMP_MAGIC, str(path), "<HHQII")
    _, _flags, count, C, M = struct.unpack_from("<HHQII", buf, 4)
    dt = _dump_dtype(C, M)
    body = buf[24:]
    if len(body) != count * dt.itemsize:
        raise FormatError(f"{path}: truncated covariance dump")
    rec = np.frombuffer(body, dtype=dt)
    return CovarianceDump(*(rec[k].copy() for k in ("id", "rho", "pooled", "whitened", "sample_cov",
                                                    "shrunk", "decomposed")))
