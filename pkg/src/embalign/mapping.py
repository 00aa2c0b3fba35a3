"""Fitting, applying, and serializing maps between embedding spaces.

Three map kinds are supported, all in row-vector convention
(``mapped = rows @ matrix`` with matrix shape d_a x d_b):

* linear - the ordinary least-squares minimizer of
  sum_i ||x_i M - y_i||^2, solved through an SVD pseudoinverse so
  rank-deficient fits return the minimum-Frobenius-norm solution.
* rotation - the optimal rotation about the origin: SVD of the
  uncentered cross-covariance X^T Y = U S Vh, recomposed as
  M = U I' Vh with I' = diag(1, ..., 1, det(U) * det(Vh)). The last
  diagonal entry (direction of least variance) flips sign exactly when
  needed to keep det(M) = +1, so reflections are never returned.
* identity - the d x d identity baseline.

Neither fit carries a bias term; point sets are deliberately left in
their original translation because embeddings live on the unit
hypersphere around the origin.

Map file (.cfem):
    magic "CFEM" | version u16=1 | kind u8 (0=linear,1=rotation,2=identity) |
    d_a u32 | d_b u32 | d_a*d_b float64 LE row-major |
    source_model_id { len u16, UTF-8 } | target_model_id { len u16, UTF-8 } |
    fit_sample_count u64
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CorruptMapError,
    DataError,
    DimensionError,
    FileFormatError,
    TruncationError,
)
from .store import EmbeddingSet

LINEAR = "linear"
ROTATION = "rotation"
IDENTITY = "identity"
MAP_KINDS = (LINEAR, ROTATION, IDENTITY)

ORTHOGONALITY_TOL = 1e-8
# relative cutoff below which singular values of the design matrix are dropped
SVD_RCOND = 1e-10
# mapped rows with norm below this are excluded rather than normalized
DEGENERATE_NORM = 1e-12

_MAP_MAGIC = b"CFEM"
_MAP_VERSION = 1
_KIND_CODES = {LINEAR: 0, ROTATION: 1, IDENTITY: 2}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class MappingMatrix:
    """A d_a x d_b map between two embedding spaces plus fit metadata."""

    kind: str
    source_model_id: str
    target_model_id: str
    matrix: np.ndarray
    fit_sample_count: int
    fit_seed: int | None = None

    def __post_init__(self):
        if self.kind not in MAP_KINDS:
            raise DataError(f"unknown map kind {self.kind!r}")
        mat = np.array(self.matrix, dtype=np.float64, copy=True)
        if mat.ndim != 2:
            raise DataError(f"map matrix must be 2-D, got shape {mat.shape}")
        if not np.all(np.isfinite(mat)):
            raise DataError("map matrix contains non-finite entries")
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)
        if self.kind == ROTATION:
            if mat.shape[0] != mat.shape[1]:
                raise DimensionError(
                    f"rotation map must be square, got {mat.shape[0]}x{mat.shape[1]}"
                )
            gram = mat.T @ mat
            if not np.allclose(gram, np.eye(mat.shape[0]), atol=ORTHOGONALITY_TOL):
                raise DataError("rotation map is not orthogonal within 1e-8")
            det = float(np.linalg.det(mat))
            if abs(det - 1.0) > ORTHOGONALITY_TOL:
                raise DataError(f"rotation map determinant {det} is not +1")
        elif self.kind == IDENTITY:
            if mat.shape[0] != mat.shape[1] or not np.array_equal(
                mat, np.eye(mat.shape[0])
            ):
                raise DataError("identity map matrix must be the identity")

    @property
    def d_a(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def d_b(self) -> int:
        return int(self.matrix.shape[1])


@dataclass(frozen=True)
class FitReport:
    """Fit summary: sample count, per-row RMS residual, and, for linear
    fits, the ratio of the largest to smallest retained singular value of
    the design matrix."""

    kind: str
    m: int
    residual_rms: float
    condition_diagnostic: float | None = None

    def __post_init__(self):
        if self.m < 1:
            raise DataError("fit reports require at least one sample")
        if self.residual_rms < 0:
            raise DataError("residual RMS cannot be negative")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "m": self.m,
            "residual_rms": self.residual_rms,
            "condition_diagnostic": self.condition_diagnostic,
        }


def _fit_inputs(source_rows, target_rows) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(source_rows, dtype=np.float64)
    y = np.asarray(target_rows, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise DataError("fit inputs must be 2-D row matrices")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DataError("fit inputs contain non-finite values")
    if x.shape[0] != y.shape[0]:
        raise DimensionError(
            f"source has {x.shape[0]} rows but target has {y.shape[0]}"
        )
    if x.shape[0] < 1:
        raise ValueError("fitting requires at least one row pair")
    return x, y


def _residual_rms(x: np.ndarray, matrix: np.ndarray, y: np.ndarray) -> float:
    diff = x @ matrix - y
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


def fit_linear(
    source_rows,
    target_rows,
    *,
    source_model_id: str = "",
    target_model_id: str = "",
) -> tuple[MappingMatrix, FitReport]:
    """Least-squares map M minimizing sum_i ||x_i M - y_i||^2.

    Solved through the SVD of the design matrix with singular values
    below 1e-10 * sigma_max truncated, which yields the minimum-norm
    solution on rank-deficient inputs. Rectangular maps are permitted.
    """
    x, y = _fit_inputs(source_rows, target_rows)
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    if s.size and s[0] > 0:
        keep = s > SVD_RCOND * s[0]
    else:
        keep = np.zeros(s.shape, dtype=bool)
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    matrix = vt.T @ (inv[:, None] * (u.T @ y))
    retained = s[keep]
    cond = float(retained[0] / retained[-1]) if retained.size else float("inf")
    mapping = MappingMatrix(
        kind=LINEAR,
        source_model_id=source_model_id,
        target_model_id=target_model_id,
        matrix=matrix,
        fit_sample_count=x.shape[0],
    )
    report = FitReport(
        kind=LINEAR,
        m=x.shape[0],
        residual_rms=_residual_rms(x, matrix, y),
        condition_diagnostic=cond,
    )
    return mapping, report


def fit_rotation(
    source_rows,
    target_rows,
    *,
    source_model_id: str = "",
    target_model_id: str = "",
) -> tuple[MappingMatrix, FitReport]:
    """Optimal rotation about the origin between paired point sets.

    Computes the SVD of the uncentered cross-covariance X^T Y and
    recomposes with unit singular values, flipping the sign of the last
    one when det(U) * det(Vh) = -1 so the result is always a proper
    rotation (det +1), never a reflection.
    """
    x, y = _fit_inputs(source_rows, target_rows)
    if x.shape[1] != y.shape[1]:
        raise DimensionError(
            f"rotation requires equal dimensions, got {x.shape[1]} and {y.shape[1]}"
        )
    cross = x.T @ y
    u, _, vt = np.linalg.svd(cross)
    sign = 1.0 if float(np.linalg.det(u)) * float(np.linalg.det(vt)) >= 0 else -1.0
    u_corrected = u.copy()
    u_corrected[:, -1] *= sign
    matrix = u_corrected @ vt
    mapping = MappingMatrix(
        kind=ROTATION,
        source_model_id=source_model_id,
        target_model_id=target_model_id,
        matrix=matrix,
        fit_sample_count=x.shape[0],
    )
    report = FitReport(
        kind=ROTATION,
        m=x.shape[0],
        residual_rms=_residual_rms(x, matrix, y),
    )
    return mapping, report


def identity_map(
    d: int, *, source_model_id: str = "", target_model_id: str = ""
) -> MappingMatrix:
    """The d x d identity baseline; applying it only renormalizes."""
    if d < 1:
        raise ValueError("identity map needs d >= 1")
    return MappingMatrix(
        kind=IDENTITY,
        source_model_id=source_model_id,
        target_model_id=target_model_id,
        matrix=np.eye(d),
        fit_sample_count=0,
    )


def apply_map(mapping: MappingMatrix, embeddings: EmbeddingSet) -> EmbeddingSet:
    """Map every vector and L2-normalize the result.

    The output is tagged with the map's target model id and keeps media
    ids and row order. Rows whose mapped norm falls below 1e-12 have no
    direction to normalize; they are excluded and reported on the output
    set's ``dropped`` field.
    """
    if embeddings.dim != mapping.d_a:
        raise DimensionError(
            f"set dimension {embeddings.dim} does not match map input {mapping.d_a}"
        )
    mapped = embeddings.vectors.astype(np.float64) @ mapping.matrix
    norms = np.linalg.norm(mapped, axis=1)
    keep = norms >= DEGENERATE_NORM
    dropped = tuple(
        mid for mid, ok in zip(embeddings.media_ids, keep) if not ok
    )
    kept_ids = tuple(mid for mid, ok in zip(embeddings.media_ids, keep) if ok)
    normalized = mapped[keep] / norms[keep, None]
    return EmbeddingSet(
        model_id=mapping.target_model_id,
        media_ids=kept_ids,
        vectors=normalized,
        dropped=dropped,
    )


def save_map(mapping: MappingMatrix, path) -> None:
    out = bytearray()
    out += _MAP_MAGIC
    out += struct.pack("<H", _MAP_VERSION)
    out += struct.pack("<B", _KIND_CODES[mapping.kind])
    out += struct.pack("<I", mapping.d_a)
    out += struct.pack("<I", mapping.d_b)
    out += np.ascontiguousarray(mapping.matrix, dtype="<f8").tobytes()
    for name in (mapping.source_model_id, mapping.target_model_id):
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise DataError("model id too long to serialize")
        out += struct.pack("<H", len(raw))
        out += raw
    out += struct.pack("<Q", mapping.fit_sample_count)
    Path(path).write_bytes(bytes(out))


def load_map(path) -> MappingMatrix:
    """Read a .cfem file, revalidating the kind's invariants.

    A rotation map that fails the orthogonality or determinant check (or
    an identity map whose matrix is not the identity) raises
    CorruptMapError. The fit seed is not part of the file format, so
    loaded maps carry ``fit_seed=None``.
    """
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncationError(f"{path}: file ends inside {what}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if len(buf) < 4 or take(4, "magic") != _MAP_MAGIC:
        raise FileFormatError(f"{path}: not a map file (bad magic)")
    version = struct.unpack("<H", take(2, "version"))[0]
    if version != _MAP_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    code = struct.unpack("<B", take(1, "kind"))[0]
    if code not in _CODE_KINDS:
        raise FileFormatError(f"{path}: unknown kind code {code}")
    d_a = struct.unpack("<I", take(4, "d_a"))[0]
    d_b = struct.unpack("<I", take(4, "d_b"))[0]
    raw = take(d_a * d_b * 8, "matrix payload")
    matrix = np.frombuffer(raw, dtype="<f8").reshape(d_a, d_b)
    names = []
    for what in ("source model id", "target model id"):
        n = struct.unpack("<H", take(2, what + " length"))[0]
        names.append(take(n, what).decode("utf-8"))
    fit_sample_count = struct.unpack("<Q", take(8, "fit sample count"))[0]
    if pos != len(buf):
        raise FileFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    try:
        return MappingMatrix(
            kind=_CODE_KINDS[code],
            source_model_id=names[0],
            target_model_id=names[1],
            matrix=matrix,
            fit_sample_count=fit_sample_count,
        )
    except (DataError, DimensionError) as exc:
        raise CorruptMapError(f"{path}: {exc}") from exc
