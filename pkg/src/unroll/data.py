"""Synthetic sparse data, MNIST IDX ingestion and result CSV persistence."""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import DimensionMismatch, circulant
from .numkit import SeededRng, random_gaussian_matrix, random_orthogonal, spectral_norm

ORTHOGONAL = "Orthogonal"
GAUSSIAN = "GaussianNonOrthogonal"
CONVOLUTIONAL = "Convolutional"
DICT_KINDS = (ORTHOGONAL, GAUSSIAN, CONVOLUTIONAL)

A_TARGET_NORM = 0.99


class BadMagic(ValueError):
    pass


class TruncatedFile(ValueError):
    pass


class UnsupportedTypeCode(ValueError):
    pass


class SchemaMismatch(ValueError):
    pass


@dataclass
class SyntheticSpec:
    N: int
    n: int
    s: int
    m_train: int
    m_test: int
    dict_kind: str = ORTHOGONAL
    seed: int = 0
    p: int = None           # number of atoms; defaults to N
    kernel_len: int = 7     # used by the convolutional dictionary

    def __post_init__(self):
        if self.p is None:
            self.p = self.N
        if self.dict_kind not in DICT_KINDS:
            raise ValueError(f"dict_kind must be one of {DICT_KINDS}")
        if not 1 <= self.s <= self.p:
            raise ValueError("need 1 <= s <= p")
        if not 1 <= self.n <= self.N:
            raise ValueError("need 1 <= n <= N")
        if self.dict_kind != GAUSSIAN and self.p != self.N:
            raise ValueError("only the Gaussian dictionary may be overcomplete")
        if self.m_train < 0 or self.m_test < 0:
            raise ValueError("sample counts must be nonnegative")


@dataclass
class Dataset:
    A: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    phi0: np.ndarray = None
    Zc: np.ndarray = None   # sparse codes, when known

    @property
    def m(self) -> int:
        return self.X.shape[1]

    def split(self, m_train: int):
        tr = Dataset(self.A, self.X[:, :m_train], self.Y[:, :m_train], self.phi0,
                     None if self.Zc is None else self.Zc[:, :m_train])
        te = Dataset(self.A, self.X[:, m_train:], self.Y[:, m_train:], self.phi0,
                     None if self.Zc is None else self.Zc[:, m_train:])
        return tr, te

    def b_in(self) -> float:
        """max_i ||y_i||_2."""
        return float(np.max(np.linalg.norm(self.Y, axis=0))) if self.m else 0.0

    def x_max(self) -> float:
        return float(np.max(np.linalg.norm(self.X, axis=0))) if self.m else 0.0


def normalize_measurement(A) -> np.ndarray:
    """Rescale ``A`` to spectral norm 0.99."""
    A = np.asarray(A, dtype=np.float64)
    nrm = spectral_norm(A)
    if nrm == 0:
        raise ValueError("cannot normalize a zero matrix")
    return A * (A_TARGET_NORM / nrm)


def sparse_codes(rng: SeededRng, p: int, s: int, m: int) -> np.ndarray:
    """Columns with exactly ``s`` nonzeros, support uniform, values N(0, 1).

    Supports come from a partial Fisher-Yates shuffle: column by column, for
    i = 0..s-1 swap position i with a uniform position in [i, p). Values are
    drawn afterwards, column-major.
    """
    Zc = np.zeros((p, m))
    if m == 0:
        return Zc
    offsets = rng.integers(np.tile(np.arange(p, p - s, -1), m)).reshape(m, s)
    supports = np.empty((m, s), dtype=np.int64)
    perm = np.arange(p)
    for i in range(m):
        perm[:] = np.arange(p)
        for k in range(s):
            j = k + offsets[i, k]
            perm[k], perm[j] = perm[j], perm[k]
        supports[i] = perm[:s]
    vals = rng.normal(m * s).reshape(m, s)
    cols = np.repeat(np.arange(m), s)
    Zc[supports.ravel(), cols] = vals.ravel()
    return Zc


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Draw A, the dictionary, then train columns followed by test columns.

    Stream order: A (n x N Gaussian), dictionary, train codes, test codes.
    """
    rng = SeededRng(spec.seed)
    A = normalize_measurement(random_gaussian_matrix(rng, spec.n, spec.N))
    if spec.dict_kind == ORTHOGONAL:
        phi0 = random_orthogonal(rng, spec.N)
    elif spec.dict_kind == GAUSSIAN:
        phi0 = random_gaussian_matrix(rng, spec.N, spec.p) / np.sqrt(spec.N)
    else:
        w0 = rng.normal(spec.kernel_len)
        phi0 = circulant(w0 / np.linalg.norm(w0), spec.N)
    Zs = [sparse_codes(rng, spec.p, spec.s, spec.m_train),
          sparse_codes(rng, spec.p, spec.s, spec.m_test)]
    Zc = np.concatenate(Zs, axis=1)
    X = phi0 @ Zc
    Y = A @ X
    return Dataset(A=A, X=X, Y=Y, phi0=phi0, Zc=Zc)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

@dataclass
class IdxTensor:
    dims: list
    payload: np.ndarray   # uint8, flat

    def array(self) -> np.ndarray:
        return self.payload.reshape(self.dims)


def parse_idx(raw: bytes) -> IdxTensor:
    if len(raw) < 4:
        raise TruncatedFile("file shorter than the magic number")
    if raw[0] != 0 or raw[1] != 0:
        raise BadMagic(f"magic prefix {raw[:2].hex()} is not 0000")
    if raw[2] != 0x08:
        raise UnsupportedTypeCode(f"type code 0x{raw[2]:02x}; only unsigned byte (0x08) is supported")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFile("file ends inside the dimension header")
    dims = list(struct.unpack(f">{ndim}I", raw[4:header]))
    count = int(np.prod(dims)) if dims else 1
    if len(raw) < header + count:
        raise TruncatedFile(f"payload has {len(raw) - header} bytes, expected {count}")
    payload = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).copy()
    return IdxTensor(dims, payload)


def load_idx(path) -> IdxTensor:
    with open(path, "rb") as f:
        return parse_idx(f.read())


def write_idx(path, array) -> None:
    a = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(bytes([0, 0, 0x08, a.ndim]))
        f.write(struct.pack(f">{a.ndim}I", *a.shape))
        f.write(a.tobytes())


def mnist_dir() -> Path:
    d = os.environ.get("UNROLL_DATA_DIR")
    if not d:
        raise FileNotFoundError("set UNROLL_DATA_DIR to the directory holding the MNIST IDX files")
    return Path(d)


def mnist_dataset(images: IdxTensor, A, max_m: int = None) -> Dataset:
    """Flatten images to columns scaled into [0, 1] and measure them with ``A``."""
    if len(images.dims) != 3:
        raise DimensionMismatch(f"expected [m, rows, cols] images, got dims {images.dims}")
    m, r, c = images.dims
    A = np.asarray(A, dtype=np.float64)
    if A.shape[1] != r * c:
        raise DimensionMismatch(f"A has {A.shape[1]} columns, images have {r * c} pixels")
    if max_m is not None:
        m = min(m, max_m)
    X = images.payload[: m * r * c].reshape(m, r * c).T.astype(np.float64) / 255.0
    return Dataset(A=A, X=X, Y=A @ X)


# ---------------------------------------------------------------------------
# results CSV
# ---------------------------------------------------------------------------

RESULT_COLUMNS = [
    "scenario", "N", "n", "s", "p", "kernel_len", "L", "J", "K", "m_train", "m_test", "seed",
    "trial", "epochs", "lr", "r1", "r2", "train_mse", "test_mse", "train_l2", "test_l2",
    "ge_signed", "ge_abs", "alpha", "alpha_mode", "b_inf", "d_inf", "w_inf", "y_fro", "KL",
    "ML", "OL", "QL", "rad_bound", "bound_thm1", "bound_cor1", "runtime_s",
]
_STR_COLUMNS = {"scenario", "alpha_mode"}
_INT_COLUMNS = {"N", "n", "s", "p", "kernel_len", "L", "J", "K", "m_train", "m_test", "seed",
                "trial", "epochs"}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _parse(col, v):
    if v == "":
        return None
    if col in _STR_COLUMNS:
        return v
    if col in _INT_COLUMNS:
        return int(v)
    return float(v)


def write_results_csv(path, rows, columns=RESULT_COLUMNS) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def read_results_csv(path, columns=RESULT_COLUMNS) -> list:
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r, None)
        if header != list(columns):
            raise SchemaMismatch(f"header {header} does not match the declared schema")
        return [{c: _parse(c, v) for c, v in zip(columns, rec)} for rec in r]


# ---------------------------------------------------------------------------
# binary dataset container
# ---------------------------------------------------------------------------

def write_container(path, ds: Dataset) -> None:
    """Header: rows/cols of A, X, Y as little-endian u64; payload: f64 LE column-major."""
    mats = [ds.A, ds.X, ds.Y]
    with open(path, "wb") as f:
        for M in mats:
            f.write(struct.pack("<QQ", *M.shape))
        for M in mats:
            f.write(np.asarray(M, dtype="<f8").tobytes(order="F"))


def read_container(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 48:
        raise TruncatedFile("container header incomplete")
    shapes = [struct.unpack("<QQ", raw[16 * i:16 * i + 16]) for i in range(3)]
    off = 48
    mats = []
    for r, c in shapes:
        cnt = r * c
        if len(raw) < off + 8 * cnt:
            raise TruncatedFile("container payload incomplete")
        mats.append(np.frombuffer(raw, dtype="<f8", count=cnt, offset=off).reshape((r, c), order="F").astype(np.float64))
        off += 8 * cnt
    return Dataset(A=mats[0], X=mats[1], Y=mats[2])
