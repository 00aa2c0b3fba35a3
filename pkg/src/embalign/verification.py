"""Template aggregation, inner-product scoring, and TAR@FAR ROC analysis.

Template pipeline (per template):
    1. every media vector is L2-normalized;
    2. media sharing a video id are averaged into one feature, and the
       raw average is used as-is (not renormalized);
    3. image features and video-average features are summed;
    4. the sum is L2-normalized.

Pairs are scored by the plain inner product, which equals cosine
similarity because templates are unit length. ROC analysis uses exact
counting with "score >= threshold accepts": for a FAR target f the
threshold is the smallest impostor score whose realized impostor
acceptance fraction stays <= f, so ties resolve conservatively and the
realized FAR never exceeds the target.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError, ProtocolError, UnknownIdError
from .store import EmbeddingSet, MediaManifest, PairList, _frozen_array

UNIT_NORM_TOL = 1e-6
DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class TemplateSet:
    """Unit-length aggregated template vectors keyed by template id.

    ``dropped`` lists template ids excluded because their feature sum was
    degenerate (all-zero); pairs referencing them are dropped downstream.
    """

    model_id: str
    template_ids: tuple[str, ...]
    subject_ids: tuple[str, ...]
    vectors: np.ndarray
    dropped: tuple[str, ...] = ()

    def __post_init__(self):
        vecs = np.asarray(self.vectors, dtype=np.float64)
        if vecs.ndim != 2:
            raise DataError(f"template vectors must be 2-D, got {vecs.shape}")
        object.__setattr__(self, "vectors", _frozen_array(vecs))
        object.__setattr__(self, "template_ids", tuple(self.template_ids))
        object.__setattr__(self, "subject_ids", tuple(self.subject_ids))
        object.__setattr__(self, "dropped", tuple(self.dropped))
        n = vecs.shape[0]
        if len(self.template_ids) != n or len(self.subject_ids) != n:
            raise DataError("template ids, subject ids, and rows must align")
        if len(set(self.template_ids)) != n:
            raise DataError("duplicate template ids")
        if n:
            norms = np.linalg.norm(self.vectors, axis=1)
            if not np.all(np.abs(norms - 1.0) <= UNIT_NORM_TOL):
                raise DataError("template vectors must be unit length within 1e-6")

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.template_ids)

    def index_of(self, template_id: str) -> int:
        try:
            return self._index[template_id]
        except AttributeError:
            index = {tid: i for i, tid in enumerate(self.template_ids)}
            object.__setattr__(self, "_index", index)
            return index[template_id]

    def subject_of(self, template_id: str) -> str:
        return self.subject_ids[self.index_of(template_id)]


@dataclass(frozen=True)
class ScoredPairs:
    """Per-pair inner-product scores with genuine/impostor labels."""

    template_ids_a: tuple[str, ...]
    template_ids_b: tuple[str, ...]
    scores: np.ndarray
    genuine: np.ndarray
    dropped_pairs: int = 0

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        genuine = np.asarray(self.genuine, dtype=bool)
        object.__setattr__(self, "scores", _frozen_array(scores))
        object.__setattr__(self, "genuine", _frozen_array(genuine))
        object.__setattr__(self, "template_ids_a", tuple(self.template_ids_a))
        object.__setattr__(self, "template_ids_b", tuple(self.template_ids_b))
        n = scores.shape[0]
        if genuine.shape[0] != n or len(self.template_ids_a) != n or len(self.template_ids_b) != n:
            raise DataError("scored pair fields must have equal length")
        if n and not np.all(np.isfinite(scores)):
            raise DataError("scores contain non-finite values")

    def __len__(self) -> int:
        return len(self.scores)


@dataclass(frozen=True)
class RocReport:
    """TAR at each requested FAR, with the thresholds that realized them."""

    far_targets: tuple[float, ...]
    tar_at_far: tuple[float, ...]
    thresholds: tuple[float, ...]
    genuine_count: int
    impostor_count: int
    dropped_pairs: int = 0

    def __post_init__(self):
        object.__setattr__(self, "far_targets", tuple(float(f) for f in self.far_targets))
        object.__setattr__(self, "tar_at_far", tuple(float(t) for t in self.tar_at_far))
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if not (len(self.far_targets) == len(self.tar_at_far) == len(self.thresholds)):
            raise DataError("report fields must have equal length")
        for t in self.tar_at_far:
            if not 0.0 <= t <= 1.0:
                raise DataError(f"TAR {t} outside [0, 1]")
        ordered = sorted(zip(self.far_targets, self.tar_at_far))
        for (_, lo), (_, hi) in zip(ordered, ordered[1:]):
            if hi < lo:
                raise DataError("TAR must be non-decreasing in FAR")

    def tar(self, far_target: float) -> float:
        return self.tar_at_far[self.far_targets.index(float(far_target))]

    def to_dict(self) -> dict:
        return {
            "far_targets": list(self.far_targets),
            "tar_at_far": list(self.tar_at_far),
            "thresholds": list(self.thresholds),
            "genuine_count": self.genuine_count,
            "impostor_count": self.impostor_count,
            "dropped_pairs": self.dropped_pairs,
        }


def _normalize_rows(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(rows, axis=1)
    ok = norms >= DEGENERATE_NORM
    out = np.zeros_like(rows)
    out[ok] = rows[ok] / norms[ok, None]
    return out, ok


def build_templates(embeddings: EmbeddingSet, manifest: MediaManifest) -> TemplateSet:
    """Aggregate media embeddings into unit-length templates.

    Only templates with at least one medium present in the set appear in
    the output. Media are processed in sorted id order (and videos in
    sorted video-id order) so the result is bit-identical regardless of
    the input row order. A template whose feature sum is all-zero is
    excluded and reported via ``dropped``.
    """
    for mid in embeddings.media_ids:
        if mid not in manifest.by_media:
            raise UnknownIdError(f"media id {mid!r} not in manifest")

    vectors = embeddings.vectors.astype(np.float64)
    normalized, media_ok = _normalize_rows(vectors)

    by_template: dict[str, list[str]] = {}
    for mid in embeddings.media_ids:
        by_template.setdefault(manifest.by_media[mid].template_id, []).append(mid)

    template_ids: list[str] = []
    subject_ids: list[str] = []
    rows: list[np.ndarray] = []
    dropped: list[str] = []
    for tid in sorted(by_template):
        videos: dict[str, list[str]] = {}
        images: list[str] = []
        for mid in sorted(by_template[tid]):
            idx = embeddings.index_of(mid)
            if not media_ok[idx]:
                continue
            vid = manifest.by_media[mid].video_id
            if vid is None:
                images.append(mid)
            else:
                videos.setdefault(vid, []).append(mid)
        features = [normalized[embeddings.index_of(mid)] for mid in images]
        for vid in sorted(videos):
            frames = np.stack(
                [normalized[embeddings.index_of(mid)] for mid in videos[vid]]
            )
            features.append(frames.mean(axis=0))
        if not features:
            dropped.append(tid)
            continue
        total = np.sum(features, axis=0)
        norm = float(np.linalg.norm(total))
        if norm < DEGENERATE_NORM:
            dropped.append(tid)
            continue
        template_ids.append(tid)
        subject_ids.append(manifest.template_subject[tid])
        rows.append(total / norm)

    matrix = np.stack(rows) if rows else np.zeros((0, embeddings.dim))
    return TemplateSet(
        model_id=embeddings.model_id,
        template_ids=tuple(template_ids),
        subject_ids=tuple(subject_ids),
        vectors=matrix,
        dropped=tuple(dropped),
    )


def score_pairs(
    a: TemplateSet,
    b: TemplateSet,
    pairs: PairList,
    manifest: MediaManifest,
) -> ScoredPairs:
    """Inner-product scores for each pair, side a against side b.

    Pair order is preserved. Pairs referencing templates that were
    dropped as degenerate on either side are skipped and counted in
    ``dropped_pairs``; ids unknown to both the set and its dropped list
    raise UnknownIdError.
    """
    if a.dim != b.dim:
        raise DimensionError(f"template dimensions differ: {a.dim} vs {b.dim}")
    dropped_a = set(a.dropped)
    dropped_b = set(b.dropped)
    ids_a: list[str] = []
    ids_b: list[str] = []
    idx_a: list[int] = []
    idx_b: list[int] = []
    genuine: list[bool] = []
    dropped_pairs = 0
    for ta, tb in pairs.pairs:
        if ta in dropped_a or tb in dropped_b:
            dropped_pairs += 1
            continue
        try:
            ia = a.index_of(ta)
        except KeyError:
            raise UnknownIdError(f"template {ta!r} not in side-a set") from None
        try:
            ib = b.index_of(tb)
        except KeyError:
            raise UnknownIdError(f"template {tb!r} not in side-b set") from None
        for tid in (ta, tb):
            if tid not in manifest.template_subject:
                raise UnknownIdError(f"template {tid!r} not in manifest")
        ids_a.append(ta)
        ids_b.append(tb)
        idx_a.append(ia)
        idx_b.append(ib)
        genuine.append(
            manifest.template_subject[ta] == manifest.template_subject[tb]
        )
    if idx_a:
        scores = np.einsum("ij,ij->i", a.vectors[idx_a], b.vectors[idx_b])
    else:
        scores = np.zeros(0)
    return ScoredPairs(
        template_ids_a=tuple(ids_a),
        template_ids_b=tuple(ids_b),
        scores=scores,
        genuine=np.array(genuine, dtype=bool),
        dropped_pairs=dropped_pairs,
    )


def scores_to_csv(scored: ScoredPairs, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["template_id_a", "template_id_b", "score", "genuine"])
        for ta, tb, s, g in zip(
            scored.template_ids_a, scored.template_ids_b, scored.scores, scored.genuine
        ):
            writer.writerow([ta, tb, repr(float(s)), str(bool(g)).lower()])


def roc(scored: ScoredPairs, far_targets) -> RocReport:
    """TAR at each FAR target by exact counting, no interpolation.

    For target f the threshold is the smallest impostor score t with
    (#{impostor >= t} / impostor_count) <= f; when even the largest
    impostor score exceeds the budget the threshold is placed just above
    it, giving a realized FAR of zero. TAR is the fraction of genuine
    scores >= t.
    """
    fars = [float(f) for f in far_targets]
    if not fars:
        raise ValueError("far_targets must be non-empty")
    for f in fars:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"FAR target {f} outside (0, 1]")
    gen = np.sort(scored.scores[scored.genuine])
    imp = np.sort(scored.scores[~scored.genuine])
    if imp.size == 0:
        raise ProtocolError("ROC analysis needs at least one impostor pair")
    if gen.size == 0:
        raise ProtocolError("ROC analysis needs at least one genuine pair")
    values, first = np.unique(imp, return_index=True)
    realized_far = (imp.size - first) / imp.size
    thresholds: list[float] = []
    tars: list[float] = []
    for f in fars:
        admissible = realized_far <= f
        if admissible.any():
            t = float(values[int(np.argmax(admissible))])
        else:
            t = float(np.nextafter(values[-1], np.inf))
        accepted = gen.size - int(np.searchsorted(gen, t, side="left"))
        thresholds.append(t)
        tars.append(accepted / gen.size)
    return RocReport(
        far_targets=tuple(fars),
        tar_at_far=tuple(tars),
        thresholds=tuple(thresholds),
        genuine_count=int(gen.size),
        impostor_count=int(imp.size),
        dropped_pairs=scored.dropped_pairs,
    )
