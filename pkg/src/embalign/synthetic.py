"""Seeded synthetic worlds: identity-clustered embeddings for two model
spaces with a planted ground-truth relationship.

Subjects are unit mean directions drawn uniformly on the sphere; each
medium's model-A vector is normalize(mean + within-class noise). Noise
is isotropic Gaussian scaled so its expected norm is sigma_w (per
component std sigma_w / sqrt(dim)); sigma therefore measures the
perturbation size relative to the unit mean, which keeps verification
on the synthetic world separable for sigma_w <= 0.3 at any dimension.
Model B is derived per planted kind:

* rotation    - normalize(vector_A @ R* + cross-model noise) for a
                Haar-uniform planted rotation R*;
* linear      - the same with a planted full-rank matrix of condition
                number <= 10;
* independent - regenerated from fresh subject means, unrelated to A.

Randomness uses counter-based Philox streams keyed by (seed, purpose,
index), one stream per subject and purpose, so generation is bit-stable
regardless of evaluation order or worker count. Media within a subject
are drawn in index order from that subject's stream.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .mapping import LINEAR, MappingMatrix, ROTATION
from .store import EmbeddingSet, MediaEntry, MediaManifest

PLANTED_ROTATION = "rotation"
PLANTED_LINEAR = "linear"
PLANTED_INDEPENDENT = "independent"
PLANTED_KINDS = (PLANTED_ROTATION, PLANTED_LINEAR, PLANTED_INDEPENDENT)

# Philox stream purposes; index (e.g. subject number) goes in the low bits.
_S_PLANTED = 0
_S_MEAN_A = 1
_S_NOISE_A = 2
_S_NOISE_X = 3
_S_MEAN_B = 4
_S_NOISE_B = 5
_S_ORACLE_ROTATION = 6


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic world; defaults are the desk-scale setup."""

    dim: int = 64
    num_subjects: int = 200
    media_per_subject: int = 10
    frames_per_video: int | None = None
    within_class_noise: float = 0.15
    cross_model_noise: float = 0.05
    planted_kind: str = PLANTED_ROTATION
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.num_subjects < 1 or self.media_per_subject < 1:
            raise ValueError("subject and media counts must be >= 1")
        if self.frames_per_video is not None and self.frames_per_video < 1:
            raise ValueError("frames_per_video must be >= 1 when set")
        if self.within_class_noise < 0 or self.cross_model_noise < 0:
            raise ValueError("noise levels must be >= 0")
        if self.planted_kind not in PLANTED_KINDS:
            raise ValueError(f"unknown planted kind {self.planted_kind!r}")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown spec fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _stream(seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    key = np.array(
        [np.uint64(seed), np.uint64((purpose << 48) | index)], dtype=np.uint64
    )
    return np.random.Generator(np.random.Philox(key=key))


def _unit(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=-1, keepdims=True)


def _haar_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform member of SO(dim) via sign-fixed QR, det forced to +1."""
    gauss = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(gauss)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    if np.linalg.det(q) < 0:
        q[:, -1] = -q[:, -1]
    return q


def _bounded_linear(dim: int, rng: np.random.Generator, max_cond: float = 10.0) -> np.ndarray:
    """Full-rank matrix with condition number bounded by max_cond."""
    gauss = rng.standard_normal((dim, dim))
    u, _, vt = np.linalg.svd(gauss)
    singular = np.sort(rng.uniform(1.0, max_cond, size=dim))[::-1]
    return u @ (singular[:, None] * vt)


def random_rotation(dim: int, seed: int) -> MappingMatrix:
    """Haar-uniform rotation wrapped as a MappingMatrix (oracle helper)."""
    if dim < 2:
        raise ValueError("dim must be >= 2")
    matrix = _haar_rotation(dim, _stream(seed, _S_ORACLE_ROTATION))
    return MappingMatrix(
        kind=ROTATION,
        source_model_id="",
        target_model_id="",
        matrix=matrix,
        fit_sample_count=0,
        fit_seed=seed,
    )


def _subject_media_ids(spec: SynthSpec, subject: int) -> list[str]:
    sid = f"s{subject:05d}"
    return [f"{sid}_m{m:03d}" for m in range(spec.media_per_subject)]


def _manifest_entries(spec: SynthSpec) -> list[MediaEntry]:
    entries = []
    for s in range(spec.num_subjects):
        sid = f"s{s:05d}"
        media = _subject_media_ids(spec, s)
        if spec.frames_per_video is None:
            for mid in media:
                entries.append(MediaEntry(mid, sid, f"T_{mid}", None))
        else:
            k = spec.frames_per_video
            n_videos = len(media) // k
            for v in range(n_videos):
                vid = f"{sid}_v{v:03d}"
                for mid in media[v * k : (v + 1) * k]:
                    entries.append(MediaEntry(mid, sid, f"T_{vid}", vid))
            for mid in media[n_videos * k :]:
                entries.append(MediaEntry(mid, sid, f"T_{mid}", None))
    return entries


def _noise_scale(level: float, dim: int) -> float:
    # per-component std so the expected noise norm equals `level`
    return level / np.sqrt(dim)


def _model_a_vectors(spec: SynthSpec) -> np.ndarray:
    rows = np.empty((spec.num_subjects * spec.media_per_subject, spec.dim))
    scale = _noise_scale(spec.within_class_noise, spec.dim)
    for s in range(spec.num_subjects):
        mean = _unit(_stream(spec.seed, _S_MEAN_A, s).standard_normal(spec.dim))
        noise = _stream(spec.seed, _S_NOISE_A, s).standard_normal(
            (spec.media_per_subject, spec.dim)
        )
        block = mean[None, :] + scale * noise
        rows[s * spec.media_per_subject : (s + 1) * spec.media_per_subject] = _unit(block)
    return rows


def generate_world(
    spec: SynthSpec, *, model_a_id: str = "A", model_b_id: str = "B"
) -> tuple[EmbeddingSet, EmbeddingSet, MediaManifest, MappingMatrix | None]:
    """Two embedding sets over shared media, their manifest, and the
    planted ground-truth map (None for independent worlds).

    Deterministic for a fixed spec: repeated calls are bit-identical.
    """
    entries = _manifest_entries(spec)
    manifest = MediaManifest(entries)
    media_ids = tuple(
        mid for s in range(spec.num_subjects) for mid in _subject_media_ids(spec, s)
    )
    vectors_a = _model_a_vectors(spec)
    set_a = EmbeddingSet(model_id=model_a_id, media_ids=media_ids, vectors=vectors_a)

    if spec.planted_kind == PLANTED_INDEPENDENT:
        rows = np.empty_like(vectors_a)
        scale = _noise_scale(spec.within_class_noise, spec.dim)
        for s in range(spec.num_subjects):
            mean = _unit(_stream(spec.seed, _S_MEAN_B, s).standard_normal(spec.dim))
            noise = _stream(spec.seed, _S_NOISE_B, s).standard_normal(
                (spec.media_per_subject, spec.dim)
            )
            block = mean[None, :] + scale * noise
            rows[s * spec.media_per_subject : (s + 1) * spec.media_per_subject] = _unit(
                block
            )
        set_b = EmbeddingSet(model_id=model_b_id, media_ids=media_ids, vectors=rows)
        return set_a, set_b, manifest, None

    rng = _stream(spec.seed, _S_PLANTED)
    if spec.planted_kind == PLANTED_ROTATION:
        planted = _haar_rotation(spec.dim, rng)
        kind = ROTATION
    else:
        planted = _bounded_linear(spec.dim, rng)
        kind = LINEAR
    mapped = vectors_a @ planted
    if spec.cross_model_noise > 0:
        scale = _noise_scale(spec.cross_model_noise, spec.dim)
        for s in range(spec.num_subjects):
            noise = _stream(spec.seed, _S_NOISE_X, s).standard_normal(
                (spec.media_per_subject, spec.dim)
            )
            sl = slice(s * spec.media_per_subject, (s + 1) * spec.media_per_subject)
            mapped[sl] += scale * noise
    set_b = EmbeddingSet(
        model_id=model_b_id, media_ids=media_ids, vectors=_unit(mapped)
    )
    ground_truth = MappingMatrix(
        kind=kind,
        source_model_id=model_a_id,
        target_model_id=model_b_id,
        matrix=planted,
        fit_sample_count=0,
        fit_seed=spec.seed,
    )
    return set_a, set_b, manifest, ground_truth


def derive_model(
    base: EmbeddingSet,
    manifest: MediaManifest,
    *,
    planted_kind: str,
    cross_model_noise: float = 0.05,
    within_class_noise: float = 0.15,
    seed: int = 0,
    model_id: str = "C",
) -> tuple[EmbeddingSet, MappingMatrix | None]:
    """Derive another model space over the same media as ``base``.

    For rotation/linear kinds the new space is a planted transform of the
    base vectors plus cross-model noise; for independent it is rebuilt
    from fresh per-subject means. Useful for grids with three or more
    models sharing one media population.
    """
    if planted_kind not in PLANTED_KINDS:
        raise ValueError(f"unknown planted kind {planted_kind!r}")
    if planted_kind == PLANTED_INDEPENDENT:
        subjects = sorted({manifest.by_media[m].subject_id for m in base.media_ids})
        subject_index = {sid: i for i, sid in enumerate(subjects)}
        rows = np.empty((len(base), base.dim))
        means = {
            sid: _unit(_stream(seed, _S_MEAN_B, i).standard_normal(base.dim))
            for sid, i in subject_index.items()
        }
        noise_rngs = {
            sid: _stream(seed, _S_NOISE_B, i) for sid, i in subject_index.items()
        }
        scale = _noise_scale(within_class_noise, base.dim)
        for r, mid in enumerate(base.media_ids):
            sid = manifest.by_media[mid].subject_id
            noise = noise_rngs[sid].standard_normal(base.dim)
            rows[r] = means[sid] + scale * noise
        return (
            EmbeddingSet(model_id=model_id, media_ids=base.media_ids, vectors=_unit(rows)),
            None,
        )

    rng = _stream(seed, _S_PLANTED)
    if planted_kind == PLANTED_ROTATION:
        planted = _haar_rotation(base.dim, rng)
        kind = ROTATION
    else:
        planted = _bounded_linear(base.dim, rng)
        kind = LINEAR
    mapped = base.vectors.astype(np.float64) @ planted
    if cross_model_noise > 0:
        noise = _stream(seed, _S_NOISE_X).standard_normal(mapped.shape)
        mapped = mapped + _noise_scale(cross_model_noise, base.dim) * noise
    derived = EmbeddingSet(
        model_id=model_id, media_ids=base.media_ids, vectors=_unit(mapped)
    )
    ground_truth = MappingMatrix(
        kind=kind,
        source_model_id=base.model_id,
        target_model_id=model_id,
        matrix=planted,
        fit_sample_count=0,
        fit_seed=seed,
    )
    return derived, ground_truth
