"""Embedding, manifest, and pair-list data model with file ingestion.

Binary embedding file (.cfeb):
    magic "CFEB" | version u16=1 | dim u32 | count u64 |
    count records of { id_len u16, id UTF-8, dim x float32 LE } |
    model_id as { len u16, UTF-8 }

Manifest CSV has header ``media_id,subject_id,template_id,video_id``
(video_id may be empty). Pair CSV has header
``template_id_a,template_id_b``.

Vectors are serialized as 32-bit floats, little-endian. Everything
downstream promotes to 64-bit before doing arithmetic.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    AlignmentError,
    ConsistencyError,
    DataError,
    FileFormatError,
    TruncationError,
    UnknownIdError,
)

_MAGIC = b"CFEB"
_VERSION = 1

UNIT_NORM_TOL = 1e-6


def _frozen_array(values, dtype=None) -> np.ndarray:
    """Copy into a read-only array so dataclass instances stay immutable."""
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class EmbeddingSet:
    """A matrix of d-dimensional embedding vectors keyed by media id.

    ``vectors`` is an (n, dim) float32 or float64 array; row i belongs to
    ``media_ids[i]``. ``dropped`` records media excluded by an upstream
    step (e.g. degenerate rows removed by map application); it is derived
    metadata and is not serialized.
    """

    model_id: str
    media_ids: tuple[str, ...]
    vectors: np.ndarray
    dropped: tuple[str, ...] = ()

    def __post_init__(self):
        vecs = np.asarray(self.vectors)
        if vecs.ndim != 2:
            raise DataError(f"vectors must be 2-D, got shape {vecs.shape}")
        dtype = np.float32 if vecs.dtype == np.float32 else np.float64
        object.__setattr__(self, "vectors", _frozen_array(vecs, dtype=dtype))
        object.__setattr__(self, "media_ids", tuple(self.media_ids))
        object.__setattr__(self, "dropped", tuple(self.dropped))
        if len(self.media_ids) != self.vectors.shape[0]:
            raise DataError(
                f"{len(self.media_ids)} media ids for {self.vectors.shape[0]} rows"
            )
        if not np.all(np.isfinite(self.vectors)):
            raise DataError("embedding vectors contain non-finite values")
        if len(set(self.media_ids)) != len(self.media_ids):
            raise DataError("duplicate media ids in embedding set")

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def normalized(self) -> bool:
        """True when every row has unit L2 norm within 1e-6."""
        if len(self) == 0:
            return True
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        return bool(np.all(np.abs(norms - 1.0) <= UNIT_NORM_TOL))

    def __len__(self) -> int:
        return len(self.media_ids)

    def index_of(self, media_id: str) -> int:
        try:
            return self._index[media_id]
        except AttributeError:
            index = {mid: i for i, mid in enumerate(self.media_ids)}
            object.__setattr__(self, "_index", index)
            return index[media_id]

    def restrict(self, media_ids) -> "EmbeddingSet":
        """Row subset over the given ids, preserving this set's row order."""
        wanted = set(media_ids)
        keep = [i for i, mid in enumerate(self.media_ids) if mid in wanted]
        return EmbeddingSet(
            model_id=self.model_id,
            media_ids=tuple(self.media_ids[i] for i in keep),
            vectors=self.vectors[keep],
        )


@dataclass(frozen=True)
class MediaEntry:
    media_id: str
    subject_id: str
    template_id: str
    video_id: str | None = None


class MediaManifest:
    """Per-media metadata: subject, template, and optional video grouping.

    Validates on construction that media ids are unique, that each
    template id maps to exactly one subject, and that all media sharing a
    video id share a template id.
    """

    def __init__(self, entries):
        entries = tuple(entries)
        by_media: dict[str, MediaEntry] = {}
        template_subject: dict[str, str] = {}
        template_media: dict[str, list[str]] = {}
        video_template: dict[str, str] = {}
        for e in entries:
            if e.media_id in by_media:
                raise DataError(f"duplicate media id {e.media_id!r} in manifest")
            by_media[e.media_id] = e
            prior = template_subject.get(e.template_id)
            if prior is not None and prior != e.subject_id:
                raise ConsistencyError(
                    f"template {e.template_id!r} mapped to subjects "
                    f"{prior!r} and {e.subject_id!r}"
                )
            template_subject[e.template_id] = e.subject_id
            template_media.setdefault(e.template_id, []).append(e.media_id)
            if e.video_id is not None:
                vt = video_template.get(e.video_id)
                if vt is not None and vt != e.template_id:
                    raise ConsistencyError(
                        f"video {e.video_id!r} spans templates {vt!r} "
                        f"and {e.template_id!r}"
                    )
                video_template[e.video_id] = e.template_id
        self.entries = entries
        self.by_media = by_media
        self.template_subject = template_subject
        self.template_media = {t: tuple(m) for t, m in template_media.items()}

    def __len__(self) -> int:
        return len(self.entries)

    def subject_of_media(self, media_id: str) -> str:
        entry = self.by_media.get(media_id)
        if entry is None:
            raise UnknownIdError(f"media id {media_id!r} not in manifest")
        return entry.subject_id


@dataclass(frozen=True)
class PairList:
    """Template pairs for 1:1 verification scoring."""

    pairs: tuple[tuple[str, str], ...]

    def __post_init__(self):
        pairs = tuple((str(a), str(b)) for a, b in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        for a, b in pairs:
            if a == b:
                raise DataError(f"self-pair {a!r}")

    def __len__(self) -> int:
        return len(self.pairs)


def save_embeddings(embeddings: EmbeddingSet, path) -> None:
    """Write the binary embedding format; float32 payload, little-endian.

    A set whose vectors are already float32 round-trips bit-exactly
    through save/load; float64 vectors are rounded to float32 on disk.
    """
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<H", _VERSION)
    out += struct.pack("<I", embeddings.dim)
    out += struct.pack("<Q", len(embeddings))
    payload = np.ascontiguousarray(embeddings.vectors, dtype="<f4")
    for i, media_id in enumerate(embeddings.media_ids):
        raw = media_id.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise DataError(f"media id too long to serialize: {media_id!r}")
        out += struct.pack("<H", len(raw))
        out += raw
        out += payload[i].tobytes()
    model_raw = embeddings.model_id.encode("utf-8")
    if len(model_raw) > 0xFFFF:
        raise DataError("model id too long to serialize")
    out += struct.pack("<H", len(model_raw))
    out += model_raw
    Path(path).write_bytes(bytes(out))


class _Cursor:
    """Sequential reader over a byte buffer with truncation checks."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncationError(
                f"file ends inside {what} (need {n} bytes at offset {self.pos})"
            )
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def string(self, what: str) -> str:
        n = self.u16(what + " length")
        return self.take(n, what).decode("utf-8")


def load_embeddings(path) -> EmbeddingSet:
    """Read a .cfeb file, validating structure and invariants.

    Raises FileFormatError on a bad magic/version, TruncationError when
    the payload is shorter than the declared dimension and count, and
    DataError on non-finite values or duplicate media ids.
    """
    buf = Path(path).read_bytes()
    cur = _Cursor(buf)
    if len(buf) < 4 or cur.take(4, "magic") != _MAGIC:
        raise FileFormatError(f"{path}: not an embedding file (bad magic)")
    version = cur.u16("version")
    if version != _VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    dim = cur.u32("dimension")
    count = cur.u64("record count")
    vectors = np.empty((count, dim), dtype=np.float32)
    media_ids = []
    row_bytes = dim * 4
    for i in range(count):
        media_ids.append(cur.string(f"record {i} id"))
        raw = cur.take(row_bytes, f"record {i} vector")
        vectors[i] = np.frombuffer(raw, dtype="<f4")
    model_id = cur.string("model id")
    if cur.pos != len(buf):
        raise FileFormatError(
            f"{path}: {len(buf) - cur.pos} trailing bytes after model id"
        )
    return EmbeddingSet(model_id=model_id, media_ids=tuple(media_ids), vectors=vectors)


_MANIFEST_HEADER = ["media_id", "subject_id", "template_id", "video_id"]
_PAIRS_HEADER = ["template_id_a", "template_id_b"]


def load_manifest(path) -> MediaManifest:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != _MANIFEST_HEADER:
            raise FileFormatError(
                f"{path}: manifest header must be {','.join(_MANIFEST_HEADER)}"
            )
        entries = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise FileFormatError(f"{path}:{lineno}: expected 4 columns")
            media_id, subject_id, template_id, video_id = row
            entries.append(
                MediaEntry(
                    media_id=media_id,
                    subject_id=subject_id,
                    template_id=template_id,
                    video_id=video_id or None,
                )
            )
    return MediaManifest(entries)


def save_manifest(manifest: MediaManifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(_MANIFEST_HEADER)
        for e in manifest.entries:
            writer.writerow([e.media_id, e.subject_id, e.template_id, e.video_id or ""])


def load_pairs(path, manifest: MediaManifest | None = None) -> PairList:
    """Read a pair CSV; with a manifest, every id must resolve to a template."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != _PAIRS_HEADER:
            raise FileFormatError(
                f"{path}: pair header must be {','.join(_PAIRS_HEADER)}"
            )
        pairs = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise FileFormatError(f"{path}:{lineno}: expected 2 columns")
            pairs.append((row[0], row[1]))
    if manifest is not None:
        known = manifest.template_subject
        for a, b in pairs:
            for tid in (a, b):
                if tid not in known:
                    raise UnknownIdError(f"pair references unknown template {tid!r}")
    return PairList(pairs=tuple(pairs))


def save_pairs(pairs: PairList, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(_PAIRS_HEADER)
        writer.writerows(pairs.pairs)


def align_pairs(a: EmbeddingSet, b: EmbeddingSet) -> tuple[np.ndarray, np.ndarray]:
    """Row-aligned float64 matrices over the media-id intersection.

    Rows are ordered lexicographically by media id so the result is
    independent of either set's on-disk order. Raises AlignmentError when
    the sets share no media.
    """
    common = sorted(set(a.media_ids) & set(b.media_ids))
    if not common:
        raise AlignmentError(
            f"no shared media ids between {a.model_id!r} and {b.model_id!r}"
        )
    ia = [a.index_of(m) for m in common]
    ib = [b.index_of(m) for m in common]
    mat_a = a.vectors[ia].astype(np.float64)
    mat_b = b.vectors[ib].astype(np.float64)
    return mat_a, mat_b
