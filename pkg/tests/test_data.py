import numpy as np
import pytest
from hypothesis import given, strategies as st

from unroll.data import (
    CONVOLUTIONAL, GAUSSIAN, ORTHOGONAL, RESULT_COLUMNS, BadMagic, SchemaMismatch, SyntheticSpec,
    TruncatedFile, UnsupportedTypeCode, gen_synthetic, load_idx, mnist_dataset,
    normalize_measurement, parse_idx, read_container, read_results_csv, sparse_codes,
    write_container, write_idx, write_results_csv,
)
from unroll.model import DimensionMismatch
from unroll.numkit import SeededRng, random_gaussian_matrix


def test_normalize_examples():
    assert np.allclose(normalize_measurement(2 * np.eye(2)), 0.99 * np.eye(2))
    A = normalize_measurement(random_gaussian_matrix(SeededRng(0), 5, 9))
    assert np.linalg.norm(A, 2) == pytest.approx(0.99, abs=1e-8)
    assert np.allclose(normalize_measurement(A), A, atol=1e-8)
    with pytest.raises(ValueError):
        normalize_measurement(np.zeros((2, 2)))


@pytest.mark.parametrize("kind", [ORTHOGONAL, GAUSSIAN, CONVOLUTIONAL])
def test_synthetic_invariants(kind):
    ds = gen_synthetic(SyntheticSpec(N=12, n=6, s=3, m_train=40, m_test=20, dict_kind=kind, seed=3))
    assert ds.A.shape == (6, 12) and ds.X.shape == (12, 60) and ds.Y.shape == (6, 60)
    assert np.linalg.norm(ds.Y - ds.A @ ds.X) <= 1e-12 * np.linalg.norm(ds.Y)
    assert np.all(np.count_nonzero(ds.Zc, axis=0) == 3)
    assert np.allclose(ds.phi0 @ ds.Zc, ds.X, atol=1e-12)


def test_overcomplete_data():
    ds = gen_synthetic(SyntheticSpec(N=8, n=4, s=2, m_train=10, m_test=5, dict_kind=GAUSSIAN, p=16))
    assert ds.phi0.shape == (8, 16) and ds.Zc.shape == (16, 15)


def test_full_support():
    ds = gen_synthetic(SyntheticSpec(N=7, n=3, s=7, m_train=1, m_test=1))
    assert np.count_nonzero(ds.Zc[:, 0]) == 7


def test_determinism_and_train_prefix():
    a = gen_synthetic(SyntheticSpec(10, 5, 2, 30, 10, seed=9))
    b = gen_synthetic(SyntheticSpec(10, 5, 2, 30, 10, seed=9))
    assert a.X.tobytes() == b.X.tobytes() and a.A.tobytes() == b.A.tobytes()
    # shrinking the test split never changes the train split
    c = gen_synthetic(SyntheticSpec(10, 5, 2, 30, 3, seed=9))
    assert np.array_equal(a.split(30)[0].X, c.split(30)[0].X)


def test_support_frequency():
    Z = sparse_codes(SeededRng(77), 10, 2, 10_000)
    freq = np.count_nonzero(Z, axis=1) / 10_000
    assert np.all(np.abs(freq - 0.2) <= 0.02)


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(N=4, n=5, s=1, m_train=1, m_test=1)
    with pytest.raises(ValueError):
        SyntheticSpec(N=4, n=2, s=5, m_train=1, m_test=1)
    with pytest.raises(ValueError):
        SyntheticSpec(N=4, n=2, s=1, m_train=1, m_test=1, dict_kind="Nope")


def test_b_in():
    ds = gen_synthetic(SyntheticSpec(10, 5, 2, 30, 10, seed=1))
    tr, _ = ds.split(30)
    assert tr.b_in() == pytest.approx(np.max(np.linalg.norm(tr.Y, axis=0)))
    assert np.isfinite(tr.b_in())


# ---------------------------------------------------------------- IDX

def _idx_bytes(dims, payload, type_code=0x08):
    head = bytes([0, 0, type_code, len(dims)]) + b"".join(d.to_bytes(4, "big") for d in dims)
    return head + bytes(payload)


def test_idx_fixture(tmp_path):
    path = tmp_path / "x.idx"
    path.write_bytes(_idx_bytes([2, 2], [1, 2, 3, 4]))
    t = load_idx(path)
    assert t.dims == [2, 2] and t.payload.tolist() == [1, 2, 3, 4]
    write_idx(tmp_path / "y.idx", t.array())
    assert (tmp_path / "y.idx").read_bytes() == path.read_bytes()


def test_idx_errors():
    with pytest.raises(TruncatedFile):
        parse_idx(_idx_bytes([2, 2], [1, 2, 3]))
    with pytest.raises(TruncatedFile):
        parse_idx(b"\x00\x00\x08\x02\x00\x00")
    with pytest.raises(BadMagic):
        parse_idx(b"\x01\x00\x08\x01\x00\x00\x00\x01\x05")
    with pytest.raises(UnsupportedTypeCode):
        parse_idx(_idx_bytes([1], [0], type_code=0x0D))


@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 2 ** 32 - 1))
def test_idx_roundtrip(dims, seed):
    n = int(np.prod(dims))
    payload = (SeededRng(seed).integers(np.full(n, 256))).astype(np.uint8)
    t = parse_idx(_idx_bytes(dims, payload.tolist()))
    assert t.dims == dims and np.array_equal(t.payload, payload)


def test_mnist_dataset_examples():
    imgs = np.zeros((3, 2, 2), dtype=np.uint8)
    imgs[1] = 255
    raw = parse_idx(_idx_bytes([3, 2, 2], imgs.ravel().tolist()))
    A = np.ones((2, 4))
    ds = mnist_dataset(raw, A, max_m=2)
    assert ds.X.shape == (4, 2)
    assert np.all(ds.X[:, 0] == 0) and np.all(ds.Y[:, 0] == 0)
    assert np.all(ds.X[:, 1] == 1.0)
    with pytest.raises(DimensionMismatch):
        mnist_dataset(raw, np.ones((2, 5)))
    with pytest.raises(DimensionMismatch):
        mnist_dataset(parse_idx(_idx_bytes([4], [1, 2, 3, 4])), A)


# ---------------------------------------------------------------- CSV / container

def _row(i):
    row = {c: float(i) + 0.1 for c in RESULT_COLUMNS}
    row.update(scenario="orthogonal", alpha_mode="AnalyticClassBound", N=40, n=10, s=4, p=40,
               kernel_len=None, L=5, J=1, K=1600, m_train=2000, m_test=5000,
               seed=2 ** 63 + i, trial=i, epochs=10, bound_cor1=None, lr=1 / 3)
    return row


def test_csv_roundtrip(tmp_path):
    rows = [_row(i) for i in range(3)]
    write_results_csv(tmp_path / "r.csv", rows)
    assert read_results_csv(tmp_path / "r.csv") == rows
    header = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert header == ",".join(RESULT_COLUMNS)
    assert "0.33333333333333331" in (tmp_path / "r.csv").read_text()


def test_csv_empty_and_schema(tmp_path):
    write_results_csv(tmp_path / "e.csv", [])
    assert (tmp_path / "e.csv").read_text() == ",".join(RESULT_COLUMNS) + "\n"
    assert read_results_csv(tmp_path / "e.csv") == []
    (tmp_path / "bad.csv").write_text(",".join(RESULT_COLUMNS[:-1]) + "\n")
    with pytest.raises(SchemaMismatch):
        read_results_csv(tmp_path / "bad.csv")


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_roundtrip_lossless(x):
    from unroll.data import _fmt
    assert float(_fmt(x)) == x


def test_container_roundtrip(tmp_path):
    ds = gen_synthetic(SyntheticSpec(9, 4, 2, 7, 3, seed=5))
    write_container(tmp_path / "d.bin", ds)
    back = read_container(tmp_path / "d.bin")
    for a, b in ((ds.A, back.A), (ds.X, back.X), (ds.Y, back.Y)):
        assert a.tobytes() == b.tobytes()
    raw = (tmp_path / "d.bin").read_bytes()
    assert int.from_bytes(raw[:8], "little") == 4 and int.from_bytes(raw[8:16], "little") == 9
    # first payload double is A[0, 0], second is A[1, 0] (column-major)
    first = np.frombuffer(raw[48:64], dtype="<f8")
    assert first[0] == ds.A[0, 0] and first[1] == ds.A[1, 0]
    (tmp_path / "t.bin").write_bytes(raw[:-8])
    with pytest.raises(TruncatedFile):
        read_container(tmp_path / "t.bin")
