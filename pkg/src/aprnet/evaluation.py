"""Cross-camera retrieval evaluation (CMC / mAP) and attribute recognition accuracy.

Ranking is by ascending Euclidean distance with ties broken by ascending
gallery sample id. For each query, gallery images of the same identity from
a different camera are *good*; images of the same identity from the same
camera, and every JUNK image, are removed before scoring. Distractors stay in
the list as negatives. Queries without any good image are skipped and counted.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .dataset import DISTRACTOR, JUNK, Dataset, Sample
from .model import ModelConfig, ModelParams, extract_embedding, predict
from .seeding import rng_for

DEFAULT_TILE = 256


# ---------------------------------------------------------------------------
# Distances


def _tile_distances(q: np.ndarray, g: np.ndarray, q_norm: np.ndarray, g_norm: np.ndarray, tile: int) -> np.ndarray:
    out = np.empty((len(q), len(g)))
    q64 = q.astype(np.float64)
    for lo in range(0, len(g), tile):
        g64 = g[lo: lo + tile].astype(np.float64)
        sq = q_norm[:, None] + g_norm[None, lo: lo + tile] - 2.0 * (q64 @ g64.T)
        out[:, lo: lo + tile] = np.sqrt(np.maximum(sq, 0.0))
    return out


def pairwise_distances(queries, gallery, tile: int = DEFAULT_TILE, threads: int = 1) -> np.ndarray:
    """Euclidean distances via ||a||^2 + ||b||^2 - 2ab, float32 inputs, float64 accumulation.

    Tiles are fixed by ``tile`` alone so the result does not depend on ``threads``.
    """
    q = np.asarray(queries, dtype=np.float32)
    g = np.asarray(gallery, dtype=np.float32)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"dimension mismatch: {q.shape} vs {g.shape}")
    if tile < 1:
        raise ValueError("tile must be positive")
    q_norm = np.einsum("ij,ij->i", q.astype(np.float64), q.astype(np.float64))
    g_norm = np.einsum("ij,ij->i", g.astype(np.float64), g.astype(np.float64))
    out = np.empty((len(q), len(g)))
    starts = list(range(0, len(q), tile))

    def work(lo):
        out[lo: lo + tile] = _tile_distances(q[lo: lo + tile], g, q_norm[lo: lo + tile], g_norm, tile)

    with threadpool_limits(limits=1):
        if threads <= 1 or len(starts) == 1:
            for lo in starts:
                work(lo)
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(work, starts))
    return out


# ---------------------------------------------------------------------------
# Single-query scoring


@dataclass(frozen=True, eq=False)
class RankList:
    query_id: int
    gallery_ids: np.ndarray
    distances: np.ndarray


def rank_gallery(query_id: int, distances, gallery_ids) -> RankList:
    d = np.asarray(distances, dtype=np.float64)
    ids = np.asarray(gallery_ids, dtype=np.int64)
    order = np.lexsort((ids, d))
    return RankList(int(query_id), ids[order], d[order])


def good_junk_partition(query: Sample, gallery: Sequence[Sample]) -> tuple[set[int], set[int]]:
    good, junk = set(), set()
    for g in gallery:
        if g.identity == JUNK:
            junk.add(g.sample_id)
        elif g.identity == query.identity and g.identity >= 0:
            (junk if g.camera == query.camera else good).add(g.sample_id)
    return good, junk


def _ap_from_hits(positions: Sequence[int], num_good: int) -> float:
    # positions are 0-based indices of good items in the junk-free list
    acc = 0.0
    for hits, pos in enumerate(positions, start=1):
        acc += hits / (pos + 1)
    return acc / num_good


def evaluate_query(ranklist: RankList, good: set[int], junk: set[int]) -> tuple[float, int]:
    """(average precision, 1-based rank of the first good match) after deleting junk."""
    if not good:
        raise ValueError("query has no good match")
    cleaned = [int(i) for i in ranklist.gallery_ids if int(i) not in junk]
    positions = [k for k, i in enumerate(cleaned) if i in good]
    return _ap_from_hits(positions, len(good)), positions[0] + 1


# ---------------------------------------------------------------------------
# Reports


@dataclass
class EvalReport:
    cmc: np.ndarray
    mAP: float
    ap: dict[int, float]
    num_queries: int
    num_gallery: int
    num_junk: int
    skipped_queries: list[int] = field(default_factory=list)
    attribute_accuracy: dict[str, float] | None = None
    mean_attribute_accuracy: float | None = None
    camera_pairs: dict | None = None
    mode: str | None = None
    notes: list[str] = field(default_factory=list)

    def rank(self, r: int) -> float:
        if len(self.cmc) == 0:
            return float("nan")
        return float(self.cmc[min(r, len(self.cmc)) - 1])

    def to_dict(self, ranks: Sequence[int] = (1, 5, 10, 20)) -> dict:
        d = {
            "mode": self.mode,
            "mAP": self.mAP,
            "ranks": {str(r): self.rank(r) for r in ranks},
            "cmc": [float(v) for v in self.cmc],
            "num_queries": self.num_queries,
            "num_scored_queries": len(self.ap),
            "num_gallery": self.num_gallery,
            "num_junk": self.num_junk,
            "skipped_queries": list(self.skipped_queries),
            "ap": {str(k): v for k, v in self.ap.items()},
            "notes": list(self.notes),
        }
        if self.attribute_accuracy is not None:
            d["attribute_accuracy"] = dict(self.attribute_accuracy)
            d["mean_attribute_accuracy"] = self.mean_attribute_accuracy
        if self.camera_pairs is not None:
            d["camera_pairs"] = self.camera_pairs
        return d

    def to_json(self, ranks: Sequence[int] = (1, 5, 10, 20)) -> str:
        return dumps(self.to_dict(ranks))

    def cmc_csv(self) -> str:
        return "rank,accuracy\n" + "".join(f"{r},{v!r}\n" for r, v in enumerate(self.cmc.tolist(), start=1))

    def summary_csv(self, ranks: Sequence[int] = (1, 5, 10, 20)) -> str:
        head = ["mode", *[f"rank{r}" for r in ranks], "mAP", "queries", "scored", "gallery"]
        vals = [self.mode or "", *[repr(self.rank(r)) for r in ranks], repr(self.mAP),
                str(self.num_queries), str(len(self.ap)), str(self.num_gallery)]
        if self.mean_attribute_accuracy is not None:
            head.append("mean_attribute_accuracy")
            vals.append(repr(self.mean_attribute_accuracy))
        return ",".join(head) + "\n" + ",".join(vals) + "\n"


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def score_distances(dist: np.ndarray, queries: Sequence[Sample], gallery: Sequence[Sample],
                    max_rank: int | None = 50) -> EvalReport:
    """CMC and mAP from a precomputed (query x gallery) distance matrix."""
    g_ids = np.array([g.sample_id for g in gallery], dtype=np.int64)
    g_person = np.array([g.identity for g in gallery], dtype=np.int64)
    g_cam = np.array([g.camera for g in gallery], dtype=np.int64)
    n_gallery = len(gallery)
    R = n_gallery if max_rank is None else min(max_rank, n_gallery)

    ap: dict[int, float] = {}
    first_ranks = []
    skipped = []
    if n_gallery:
        orders = np.lexsort((np.broadcast_to(g_ids, dist.shape), dist), axis=-1)
    for qi, q in enumerate(queries):
        if not n_gallery:
            skipped.append(q.sample_id)
            continue
        order = orders[qi]
        person, cam = g_person[order], g_cam[order]
        same = person == q.identity
        junk = (same & (cam == q.camera)) | (person == JUNK)
        good = (same & (cam != q.camera))[~junk]
        positions = np.flatnonzero(good).tolist()
        if not positions:
            skipped.append(q.sample_id)
            continue
        ap[q.sample_id] = _ap_from_hits(positions, len(positions))
        first_ranks.append(positions[0] + 1)

    n = len(first_ranks)
    if n:
        counts = np.bincount(np.minimum(first_ranks, R + 1), minlength=R + 2)[1: R + 1]
        cmc = np.cumsum(counts) / n
        total = 0.0
        for v in ap.values():
            total += v
        mAP = total / n
    else:
        cmc, mAP = np.zeros(R), float("nan")
    report = EvalReport(
        cmc=cmc, mAP=mAP, ap=ap, num_queries=len(queries), num_gallery=n_gallery,
        num_junk=int(np.sum(g_person == JUNK)), skipped_queries=skipped,
    )
    if skipped:
        report.notes.append(f"{len(skipped)} queries without a cross-camera match were skipped")
    return report


def embed(dataset: Dataset, samples: Sequence[Sample], params: ModelParams | None) -> np.ndarray:
    feats = dataset.features(samples)
    if params is None or not len(samples):
        return feats.astype(np.float32)
    return extract_embedding(params, feats).reshape(len(samples), -1).astype(np.float32)


def evaluate_reid(dataset: Dataset, query_split: str = "query", gallery_split: str = "gallery",
                  params: ModelParams | None = None, threads: int = 1, max_rank: int | None = 50,
                  tile: int = DEFAULT_TILE) -> EvalReport:
    queries = dataset.split(query_split)
    gallery = dataset.split(gallery_split)
    dist = pairwise_distances(embed(dataset, queries, params), embed(dataset, gallery, params),
                              tile=tile, threads=threads)
    return score_distances(dist, queries, gallery, max_rank)


# ---------------------------------------------------------------------------
# Camera pairs


def camera_pair_eval(dataset: Dataset, params: ModelParams | None = None, query_split: str = "query",
                     gallery_split: str = "gallery", threads: int = 1) -> dict:
    queries = dataset.split(query_split)
    gallery = dataset.split(gallery_split)
    dist = pairwise_distances(embed(dataset, queries, params), embed(dataset, gallery, params), threads=threads)
    cams = sorted({s.camera for s in queries} | {s.camera for s in gallery})
    C = len(cams)
    mAP = np.full((C, C), np.nan)
    rank1 = np.full((C, C), np.nan)
    q_cam = np.array([s.camera for s in queries])
    g_cam = np.array([s.camera for s in gallery])
    for a, ci in enumerate(cams):
        qi = np.flatnonzero(q_cam == ci)
        for b, cj in enumerate(cams):
            if ci == cj:
                continue
            gj = np.flatnonzero(g_cam == cj)
            rep = score_distances(dist[np.ix_(qi, gj)], [queries[i] for i in qi], [gallery[j] for j in gj], 1)
            if rep.ap:
                mAP[a, b] = rep.mAP
                rank1[a, b] = rep.rank(1)
    off = ~np.eye(C, dtype=bool)
    return {
        "cameras": cams,
        "mAP": mAP.tolist(),
        "rank1": rank1.tolist(),
        "mean_mAP": float(np.nanmean(mAP[off])) if np.isfinite(mAP[off]).any() else float("nan"),
        "mean_rank1": float(np.nanmean(rank1[off])) if np.isfinite(rank1[off]).any() else float("nan"),
    }


# ---------------------------------------------------------------------------
# Attributes


def mean_accuracy(values: Sequence[float]) -> float:
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("no accuracies to average")
    return sum(vals) / len(vals)


def attribute_accuracy(params: ModelParams, dataset: Dataset, split: str = "gallery") -> tuple[dict[str, float], float]:
    """Per-attribute accuracy of the attribute heads over labelled images of ``split``."""
    if len(params.heads) - 1 != dataset.schema.num_attributes:
        raise ValueError("model attribute heads do not match the schema")
    samples = [s for s in dataset.split(split) if s.is_real and s.identity in dataset.annotations]
    if not samples:
        raise ValueError(f"no labelled images in split {split!r}")
    truth = np.array([dataset.annotations.rows[s.identity] for s in samples], dtype=np.int64)
    pred = predict(params, dataset.features(samples)).attributes
    per = {name: float(np.mean(pred[:, i] == truth[:, i])) for i, name in enumerate(dataset.schema.names)}
    return per, mean_accuracy(per.values())


# ---------------------------------------------------------------------------
# Distractor scaling


@dataclass(frozen=True)
class ScalingRow:
    size: int
    gallery_size: int
    rank1: float
    mAP: float


def distractor_scaling(dataset: Dataset, sizes: Sequence[int], params: ModelParams | None = None,
                       seed: int = 0, threads: int = 1, query_split: str = "query",
                       gallery_split: str = "gallery") -> list[ScalingRow]:
    """Nested galleries: base gallery plus the first ``s`` distractors of one seeded order."""
    sizes = [int(s) for s in sizes]
    queries = dataset.split(query_split)
    gallery = [s for s in dataset.split(gallery_split) if s.identity != DISTRACTOR]
    pool = [s for s in dataset.split(gallery_split) if s.identity == DISTRACTOR]
    if any(s < 0 for s in sizes):
        raise ValueError("sizes must be non-negative")
    biggest = max(sizes, default=0)
    if biggest > len(pool):
        raise ValueError(f"requested {biggest} distractors but the pool holds {len(pool)}")
    order = rng_for(seed, "distractor-order").permutation(len(pool))[:biggest]
    used = [pool[i] for i in order]
    q_emb = embed(dataset, queries, params)
    base = pairwise_distances(q_emb, embed(dataset, gallery, params), threads=threads)
    extra = pairwise_distances(q_emb, embed(dataset, used, params), threads=threads) if used \
        else np.zeros((len(queries), 0))
    rows = []
    for s in sizes:
        rep = score_distances(np.hstack([base, extra[:, :s]]), queries, gallery + used[:s], max_rank=1)
        rows.append(ScalingRow(s, len(gallery) + s, rep.rank(1), rep.mAP))
    return rows


def scaling_csv(rows: Sequence[ScalingRow]) -> str:
    return "distractors,gallery_size,rank1,mAP\n" + "".join(
        f"{r.size},{r.gallery_size},{r.rank1!r},{r.mAP!r}\n" for r in rows)


# ---------------------------------------------------------------------------
# Leave-one-attribute-out


@dataclass(frozen=True)
class AblationRow:
    removed: str | None
    rank1: float
    mAP: float
    delta_rank1: float


def ablate_attributes(model_config: ModelConfig, train_config, dataset: Dataset, threads: int = 1,
                      attributes: Sequence[str] | None = None) -> list[AblationRow]:
    """Retrain without each attribute head in turn; deltas are against the all-attribute run."""
    from .trainer import train

    def run(cfg, ds):
        params, _ = train(cfg, train_config, ds)
        return evaluate_reid(ds, "query", "gallery", params=params, threads=threads, max_rank=1)

    full = run(model_config, dataset)
    rows = [AblationRow(None, full.rank(1), full.mAP, 0.0)]
    names = dataset.schema.names if attributes is None else list(attributes)
    for name in names:
        if dataset.schema.num_attributes < 2:
            raise ValueError("cannot remove the only attribute")
        ds = dataset.without_attribute(name)
        cfg = replace(model_config, attribute_class_counts=tuple(ds.schema.class_counts))
        rep = run(cfg, ds)
        rows.append(AblationRow(name, rep.rank(1), rep.mAP, rep.rank(1) - full.rank(1)))
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    return "removed,rank1,mAP,delta_rank1\n" + "".join(
        f"{r.removed or '(none)'},{r.rank1!r},{r.mAP!r},{r.delta_rank1!r}\n" for r in rows)


# ---------------------------------------------------------------------------
# Attribute-aware re-ranking


def attribute_rerank(ranklist: RankList, query_probs: Sequence[np.ndarray], gallery_preds: np.ndarray,
                     weight: float) -> RankList:
    """Add ``weight`` times the mean attribute disagreement to each distance and re-sort.

    ``gallery_preds`` is (len(ranklist), M), aligned with ``ranklist.gallery_ids``;
    disagreement on attribute i is one minus the query's probability of the
    gallery image's predicted class.
    """
    preds = np.asarray(gallery_preds, dtype=np.int64)
    if weight == 0 or not len(query_probs):
        return ranklist
    disagree = np.stack([1.0 - np.asarray(p)[preds[:, i]] for i, p in enumerate(query_probs)], axis=1).mean(axis=1)
    return rank_gallery(ranklist.query_id, ranklist.distances + weight * disagree, ranklist.gallery_ids)
