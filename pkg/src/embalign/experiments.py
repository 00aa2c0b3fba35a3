"""Experiment orchestration: cross-model grids, sample-count sweeps, and
the gallery re-identification attack.

All experiments enforce fit/eval hygiene structurally: enrollment media
(used to fit maps) and verification media (used to build evaluated
templates) must be disjoint, and the attack's paired enrollment must be
disjoint from its probes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ProtocolError, UnknownIdError
from .mapping import (
    IDENTITY,
    MAP_KINDS,
    ROTATION,
    MappingMatrix,
    apply_map,
    fit_linear,
    fit_rotation,
    identity_map,
)
from .store import EmbeddingSet, MediaEntry, MediaManifest, PairList, align_pairs
from .verification import TemplateSet, build_templates, roc, score_pairs

DEFAULT_FARS = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
DIAGONAL_KIND = "unmapped"

_S_SPLIT = 16
_S_PAIRS = 17
_S_SWEEP = 18
_S_ATTACK = 19


def _stream(seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    key = np.array(
        [np.uint64(seed), np.uint64((purpose << 48) | index)], dtype=np.uint64
    )
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class GridCell:
    source_model_id: str
    target_model_id: str
    map_kind: str
    fit_sample_count: int
    tars: tuple[float, ...]


@dataclass(frozen=True)
class GridResult:
    far_targets: tuple[float, ...]
    cells: tuple[GridCell, ...]

    def cell(self, source: str, target: str, kind: str) -> GridCell:
        for c in self.cells:
            if (
                c.source_model_id == source
                and c.target_model_id == target
                and c.map_kind == kind
            ):
                return c
        raise KeyError((source, target, kind))

    def tar(self, source: str, target: str, kind: str, far: float) -> float:
        return self.cell(source, target, kind).tars[
            self.far_targets.index(float(far))
        ]

    def to_dict(self) -> dict:
        return {
            "far_targets": list(self.far_targets),
            "cells": [
                {
                    "source": c.source_model_id,
                    "target": c.target_model_id,
                    "kind": c.map_kind,
                    "fit_sample_count": c.fit_sample_count,
                    "tars": list(c.tars),
                }
                for c in self.cells
            ],
        }

    def csv_rows(self) -> list[list]:
        rows = [["source", "target", "kind", "fit_sample_count", "far", "tar"]]
        for c in self.cells:
            for far, tar in zip(self.far_targets, c.tars):
                rows.append(
                    [
                        c.source_model_id,
                        c.target_model_id,
                        c.map_kind,
                        c.fit_sample_count,
                        repr(far),
                        repr(tar),
                    ]
                )
        return rows


@dataclass(frozen=True)
class SweepPoint:
    map_kind: str
    sample_count: int
    repetition: int
    tar: float


@dataclass(frozen=True)
class SweepResult:
    far_target: float
    repetitions: int
    points: tuple[SweepPoint, ...]

    def mean_tar(self, kind: str, sample_count: int) -> float:
        tars = [
            p.tar
            for p in self.points
            if p.map_kind == kind and p.sample_count == sample_count
        ]
        if not tars:
            raise KeyError((kind, sample_count))
        return float(np.mean(tars))

    def to_dict(self) -> dict:
        kinds = sorted({p.map_kind for p in self.points})
        counts = sorted({p.sample_count for p in self.points})
        return {
            "far_target": self.far_target,
            "repetitions": self.repetitions,
            "points": [
                {
                    "kind": p.map_kind,
                    "sample_count": p.sample_count,
                    "repetition": p.repetition,
                    "tar": p.tar,
                }
                for p in self.points
            ],
            "means": [
                {
                    "kind": k,
                    "sample_count": c,
                    "mean_tar": self.mean_tar(k, c),
                }
                for k in kinds
                for c in counts
            ],
        }

    def csv_rows(self) -> list[list]:
        rows = [["kind", "sample_count", "repetition", "tar"]]
        for p in self.points:
            rows.append([p.map_kind, p.sample_count, p.repetition, repr(p.tar)])
        return rows


@dataclass(frozen=True)
class AttackResult:
    gallery_size: int
    probe_count: int
    rank_k_accuracy: dict[int, float]

    def to_dict(self) -> dict:
        return {
            "gallery_size": self.gallery_size,
            "probe_count": self.probe_count,
            "rank_k_accuracy": {str(k): v for k, v in sorted(self.rank_k_accuracy.items())},
        }


def split_by_template(
    manifest: MediaManifest, enroll_fraction: float, seed: int
) -> tuple[frozenset[str], frozenset[str]]:
    """Disjoint (enrollment, verification) media sets, split by template.

    The split is stratified per subject so every subject keeps templates
    on both sides where possible; all media of a template land on the
    same side, which keeps evaluated templates free of fit media.
    """
    if not 0.0 < enroll_fraction < 1.0:
        raise ValueError("enroll_fraction must be in (0, 1)")
    by_subject: dict[str, list[str]] = {}
    for tid, sid in manifest.template_subject.items():
        by_subject.setdefault(sid, []).append(tid)
    enroll_media: set[str] = set()
    verify_media: set[str] = set()
    for i, sid in enumerate(sorted(by_subject)):
        templates = sorted(by_subject[sid])
        rng = _stream(seed, _S_SPLIT, i)
        order = rng.permutation(len(templates))
        n_enroll = int(round(enroll_fraction * len(templates)))
        n_enroll = min(max(n_enroll, 1), len(templates) - 1) if len(templates) > 1 else 0
        for j, k in enumerate(order):
            side = enroll_media if j < n_enroll else verify_media
            side.update(manifest.template_media[templates[k]])
    return frozenset(enroll_media), frozenset(verify_media)


def sample_eval_pairs(
    manifest: MediaManifest,
    template_ids,
    n_impostor: int,
    seed: int,
    *,
    include_all_genuine: bool = True,
) -> PairList:
    """All genuine pairs among the given templates plus a uniform sample
    of impostor pairs without replacement."""
    templates = sorted(template_ids)
    for tid in templates:
        if tid not in manifest.template_subject:
            raise UnknownIdError(f"template {tid!r} not in manifest")
    subjects = np.array([manifest.template_subject[t] for t in templates])
    n = len(templates)
    ia, ib = np.triu_indices(n, k=1)
    same = subjects[ia] == subjects[ib]
    pairs: list[tuple[str, str]] = []
    if include_all_genuine:
        pairs.extend(
            (templates[i], templates[j]) for i, j in zip(ia[same], ib[same])
        )
    imp_a, imp_b = ia[~same], ib[~same]
    if n_impostor > 0 and imp_a.size:
        take = min(n_impostor, imp_a.size)
        rng = _stream(seed, _S_PAIRS)
        chosen = rng.choice(imp_a.size, size=take, replace=False)
        chosen.sort()
        pairs.extend(
            (templates[i], templates[j]) for i, j in zip(imp_a[chosen], imp_b[chosen])
        )
    return PairList(pairs=tuple(pairs))


def _check_model_pair(enroll: EmbeddingSet, verify: EmbeddingSet) -> None:
    if enroll.model_id != verify.model_id:
        raise ValueError(
            f"split model ids differ: {enroll.model_id!r} vs {verify.model_id!r}"
        )
    overlap = set(enroll.media_ids) & set(verify.media_ids)
    if overlap:
        raise ProtocolError(
            f"enrollment and verification splits overlap on {len(overlap)} media"
        )


def _fit_kind(
    kind: str,
    enroll_source: EmbeddingSet,
    enroll_target: EmbeddingSet,
) -> MappingMatrix:
    if kind == IDENTITY:
        if enroll_source.dim != enroll_target.dim:
            raise DimensionError(
                f"identity map needs equal dimensions, got "
                f"{enroll_source.dim} and {enroll_target.dim}"
            )
        return identity_map(
            enroll_source.dim,
            source_model_id=enroll_source.model_id,
            target_model_id=enroll_target.model_id,
        )
    x, y = align_pairs(enroll_source, enroll_target)
    fit = fit_rotation if kind == ROTATION else fit_linear
    mapping, _ = fit(
        x,
        y,
        source_model_id=enroll_source.model_id,
        target_model_id=enroll_target.model_id,
    )
    return mapping


def run_grid(
    models,
    manifest: MediaManifest,
    pairs: PairList,
    kinds,
    fars=DEFAULT_FARS,
) -> GridResult:
    """TAR grid over every ordered model pair and map kind.

    ``models`` is a sequence of (enrollment, verification) EmbeddingSet
    tuples sharing the same enrollment media and the same verification
    media across models. Diagonal cells are single-model evaluations of
    the unmapped verification embeddings, computed once regardless of the
    requested kinds; off-diagonal cells fit on the enrollment split and
    evaluate source-mapped templates against target templates.
    """
    models = list(models)
    if not models:
        raise ValueError("run_grid needs at least one model")
    kinds = list(kinds)
    for kind in kinds:
        if kind not in MAP_KINDS:
            raise ValueError(f"unknown map kind {kind!r}")
    fars = tuple(float(f) for f in fars)
    for enroll, verify in models:
        _check_model_pair(enroll, verify)
    ids = [enroll.model_id for enroll, _ in models]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate model ids in grid: {ids}")
    enroll_ids = set(models[0][0].media_ids)
    verify_ids = set(models[0][1].media_ids)
    for enroll, verify in models[1:]:
        if set(enroll.media_ids) != enroll_ids or set(verify.media_ids) != verify_ids:
            raise ProtocolError("models must share enrollment and verification splits")

    templates = [build_templates(verify, manifest) for _, verify in models]
    cells: list[GridCell] = []
    for i, (_, verify) in enumerate(models):
        report = roc(score_pairs(templates[i], templates[i], pairs, manifest), fars)
        cells.append(
            GridCell(
                source_model_id=ids[i],
                target_model_id=ids[i],
                map_kind=DIAGONAL_KIND,
                fit_sample_count=0,
                tars=tuple(report.tar_at_far),
            )
        )
    for i, (enroll_i, verify_i) in enumerate(models):
        for j, (enroll_j, _) in enumerate(models):
            if i == j:
                continue
            for kind in kinds:
                mapping = _fit_kind(kind, enroll_i, enroll_j)
                mapped = apply_map(mapping, verify_i)
                mapped_templates = build_templates(mapped, manifest)
                report = roc(
                    score_pairs(mapped_templates, templates[j], pairs, manifest), fars
                )
                cells.append(
                    GridCell(
                        source_model_id=ids[i],
                        target_model_id=ids[j],
                        map_kind=kind,
                        fit_sample_count=mapping.fit_sample_count,
                        tars=tuple(report.tar_at_far),
                    )
                )
    return GridResult(far_targets=fars, cells=tuple(cells))


def run_sweep(
    model_a,
    model_b,
    manifest: MediaManifest,
    pairs: PairList,
    kinds,
    sample_counts,
    repetitions: int,
    far: float,
    seed: int = 0,
) -> SweepResult:
    """Map quality versus enrollment sample count.

    For each (kind, count, repetition) a fresh uniform subset of the
    enrollment media is drawn without replacement using a Philox stream
    keyed on (seed + repetition, count), the map is fit on the subset,
    and TAR at ``far`` is evaluated on the full verification split.
    """
    enroll_a, verify_a = model_a
    enroll_b, verify_b = model_b
    _check_model_pair(enroll_a, verify_a)
    _check_model_pair(enroll_b, verify_b)
    if set(enroll_a.media_ids) != set(enroll_b.media_ids):
        raise ProtocolError("models must share the enrollment split")
    if set(verify_a.media_ids) != set(verify_b.media_ids):
        raise ProtocolError("models must share the verification split")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    kinds = list(kinds)
    for kind in kinds:
        if kind not in MAP_KINDS:
            raise ValueError(f"unknown map kind {kind!r}")
    counts = [int(c) for c in sample_counts]
    enroll_ids = sorted(enroll_a.media_ids)
    for c in counts:
        if not 1 <= c <= len(enroll_ids):
            raise ValueError(
                f"sample count {c} outside [1, {len(enroll_ids)}] enrollment media"
            )

    target_templates = build_templates(verify_b, manifest)
    points: list[SweepPoint] = []
    for kind in kinds:
        for count in counts:
            for rep in range(repetitions):
                rng = _stream(seed + rep, _S_SWEEP, count)
                picked = rng.choice(len(enroll_ids), size=count, replace=False)
                subset = [enroll_ids[i] for i in picked]
                sub_a = enroll_a.restrict(subset)
                sub_b = enroll_b.restrict(subset)
                mapping = _fit_kind(kind, sub_a, sub_b)
                mapped = apply_map(mapping, verify_a)
                mapped_templates = build_templates(mapped, manifest)
                report = roc(
                    score_pairs(mapped_templates, target_templates, pairs, manifest),
                    [far],
                )
                points.append(
                    SweepPoint(
                        map_kind=kind,
                        sample_count=count,
                        repetition=rep,
                        tar=report.tar_at_far[0],
                    )
                )
    return SweepResult(
        far_target=float(far), repetitions=repetitions, points=tuple(points)
    )


def subject_gallery(embeddings: EmbeddingSet, manifest: MediaManifest) -> TemplateSet:
    """One template per subject, aggregating all of a subject's media.

    Builds a synthetic manifest whose template ids are the subject ids
    and runs the standard template pipeline over it.
    """
    entries = []
    for mid in embeddings.media_ids:
        entry = manifest.by_media.get(mid)
        if entry is None:
            raise UnknownIdError(f"media id {mid!r} not in manifest")
        entries.append(
            MediaEntry(
                media_id=mid,
                subject_id=entry.subject_id,
                template_id=entry.subject_id,
                video_id=None,
            )
        )
    return build_templates(embeddings, MediaManifest(entries))


def run_attack(
    unknown_enroll: EmbeddingSet,
    attacker_enroll: EmbeddingSet,
    probes: EmbeddingSet,
    gallery: TemplateSet,
    manifest: MediaManifest,
    map_kind: str,
    k_values,
) -> AttackResult:
    """Gallery re-identification of embeddings from an unknown model.

    Fits a map from the unknown model's space into the attacker's space
    on the paired enrollment, maps each probe, ranks the gallery by inner
    product, and reports rank-k accuracy: the fraction of probes whose
    true subject appears within the top k gallery entries.
    """
    if map_kind not in MAP_KINDS:
        raise ValueError(f"unknown map kind {map_kind!r}")
    shared = set(unknown_enroll.media_ids) & set(attacker_enroll.media_ids)
    if not shared:
        raise ValueError("attack requires at least one paired enrollment embedding")
    overlap = shared & set(probes.media_ids)
    if overlap:
        raise ProtocolError(
            f"paired enrollment overlaps probe media on {len(overlap)} ids"
        )
    ks = sorted({int(k) for k in k_values})
    if not ks:
        raise ValueError("k_values must be non-empty")
    if ks[0] < 1 or ks[-1] > len(gallery):
        raise ValueError(f"k values must lie in [1, {len(gallery)}]")

    mapping = _fit_kind(map_kind, unknown_enroll, attacker_enroll)
    mapped = apply_map(mapping, probes)
    if len(mapped) == 0:
        raise ValueError("no probes survived mapping")
    gallery_subjects = np.array(gallery.subject_ids)
    known = set(gallery.subject_ids)
    probe_subjects = []
    for mid in mapped.media_ids:
        sid = manifest.subject_of_media(mid)
        if sid not in known:
            raise ProtocolError(f"probe subject {sid!r} absent from gallery")
        probe_subjects.append(sid)

    scores = mapped.vectors @ gallery.vectors.T
    order = np.argsort(-scores, axis=1, kind="stable")
    ranked_match = gallery_subjects[order] == np.array(probe_subjects)[:, None]
    first_hit = ranked_match.argmax(axis=1)
    accuracy = {
        k: float(np.mean(first_hit < k)) for k in ks
    }
    return AttackResult(
        gallery_size=len(gallery),
        probe_count=len(mapped),
        rank_k_accuracy=accuracy,
    )
