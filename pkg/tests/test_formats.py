import struct

import numpy as np
import pytest

from voronoi_pool import formats as fm
from voronoi_pool.config import RunConfig
from voronoi_pool.pipeline import init_nets


def sample_db(rng, n=5, C=3, M=4):
    return fm.DescriptorDB(np.arange(n) * 7, rng.normal(size=(n, 3)), rng.normal(size=(n, C * M)), C, M)


def test_db_round_trip_and_layout(tmp_path, rng):
    db = sample_db(rng)
    p = tmp_path / "a.vwdb"
    fm.write_db(p, db)
    buf = p.read_bytes()
    assert buf[:4] == b"VWDB"
    assert struct.unpack_from("<HHQIII", buf, 4) == (1, 0, 5, 12, 3, 4)
    assert len(buf) == 4 + 24 + 5 * (8 + 24 + 12 * 4)
    back = fm.read_db(p)
    np.testing.assert_array_equal(back.ids, db.ids)
    np.testing.assert_array_equal(back.positions, db.positions)
    np.testing.assert_array_equal(back.descriptors, db.descriptors)
    assert back.descriptors.dtype == np.float32


def test_db_matrices_undo_column_major_flatten(rng):
    X = rng.normal(size=(3, 4)).astype(np.float32)
    db = fm.DescriptorDB([0], np.zeros((1, 3)), X.reshape(1, -1, order="F"), 3, 4)
    np.testing.assert_array_equal(db.matrices()[0], X)


def test_model_round_trip_bit_identical(tmp_path):
    nets = init_nets(RunConfig(C_in=5, C=3, M=4))
    nets.proj.running_var = nets.proj.running_var * 1.7
    p1, p2 = tmp_path / "a.vwmd", tmp_path / "b.vwmd"
    fm.save_model(p1, fm.ModelCheckpoint(nets, 2.0, 1e-5))
    ck = fm.load_model(p1)
    fm.save_model(p2, ck)
    assert p1.read_bytes() == p2.read_bytes()
    for k, v in nets.trainable().items():
        assert v.tobytes() == ck.nets.trainable()[k].tobytes()
    assert ck.sigma == 2.0 and ck.eps == 1e-5 and ck.H == nets.proj.hidden


def test_scans_and_dump_round_trip(tmp_path, rng):
    s = fm.ScanSet(np.arange(3, dtype=np.uint64), np.array([0, 0, 1], np.uint32), np.array([0, 1, 0], np.uint32),
                   rng.normal(size=(3, 3)), rng.normal(size=(3, 2, 5)))
    fm.write_scans(tmp_path / "s.vwsc", s)
    back = fm.read_scans(tmp_path / "s.vwsc")
    np.testing.assert_array_equal(back.data, s.data)
    np.testing.assert_array_equal(back.places, s.places)
    d = fm.CovarianceDump(np.arange(2), rng.uniform(size=2), rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4)),
                          rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3)))
    fm.write_dump(tmp_path / "d.vwcv", d)
    back = fm.read_dump(tmp_path / "d.vwcv")
    np.testing.assert_array_equal(back.shrunk, d.shrunk)


@pytest.mark.parametrize("kind", ["db", "model", "scans"])
def test_corruption_detected(tmp_path, rng, kind):
    p = tmp_path / "f"
    if kind == "db":
        fm.write_db(p, sample_db(rng))
        read = fm.read_db
    elif kind == "model":
        fm.save_model(p, fm.ModelCheckpoint(init_nets(RunConfig()), 1.0, 1e-5))
        read = fm.load_model
    else:
        fm.write_scans(p, fm.ScanSet(np.arange(1, dtype=np.uint64), np.zeros(1, np.uint32), np.zeros(1, np.uint32),
                                     np.zeros((1, 3)), np.zeros((1, 2, 2))))
        read = fm.read_scans
    good = p.read_bytes()
    p.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(fm.FormatError, match="magic"):
        read(p)
    p.write_bytes(good[:4] + struct.pack("<H", 2) + good[6:])
    with pytest.raises(fm.FormatError, match="version"):
        read(p)
    for cut in (good[:-3], good[:10]):
        p.write_bytes(cut)
        with pytest.raises(fm.FormatError):
            read(p)


def test_db_validation():
    with pytest.raises(fm.FormatError):
        fm.DescriptorDB([0], np.zeros((1, 3)), np.zeros((1, 5)), 2, 2)
