"""Base tag relevance estimators.

The workhorse is neighbor voting: the fraction of an image's k visual
neighbors that carry the tag, minus the tag's frequency prior, so that
ubiquitous tags are suppressed. Early fusion substitutes the neighbor set
retrieved under a weighted combined distance. Three heterogeneous baselines
(tag position, semantic field via tag co-occurrence, kernel-density scoring
in a feature space) produce scores over the same candidate sets so they can
enter late fusion alongside the voting estimators.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .collection import Collection, ImageRecord, images_with_tag, tag_prior
from .neighbors import (
    DistanceNormalizer,
    NeighborList,
    WeightVector,
    _combined_to_all,
    knn,
    l1_to_all,
    pairwise_l1,
)


def ranking_of(scores: Mapping[str, float]) -> list[str]:
    """Canonical retrieval order: descending score, ties by ascending id."""
    return sorted(scores, key=lambda i: (-scores[i], i))


@dataclass
class ScoreTable:
    """Per-(tag, image) scores of one estimator over a candidate set.

    The candidate set is the set of images labeled with the tag in the
    scored collection. `meta` carries provenance such as the bounds used by
    MinMax normalization.
    """

    estimator: str
    tag: str
    scores: dict[str, float]
    meta: dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for image_id, s in self.scores.items():
            if not math.isfinite(s):
                raise ValueError(
                    f"non-finite score for ({self.tag!r}, {image_id!r}) in {self.estimator!r}"
                )

    def __len__(self) -> int:
        return len(self.scores)

    def ids(self) -> frozenset[str]:
        return frozenset(self.scores)

    def ranking(self) -> list[str]:
        return ranking_of(self.scores)


def _candidate_ids(scored: Collection, w: str, candidates: Iterable[str] | None) -> list[str]:
    labeled = images_with_tag(scored, w)
    if candidates is None:
        return sorted(labeled)
    out = sorted(candidates)
    bad = [x for x in out if x not in labeled]
    if bad:
        raise ValueError(f"candidate {bad[0]!r} does not carry tag {w!r}")
    return out


# ---------------------------------------------------------------------------
# neighbor voting (single feature and early fused)
# ---------------------------------------------------------------------------


def neighbor_vote(c: Collection, nl: NeighborList, w: str, k: int) -> float:
    """Vote count over the requested k, minus the tag prior.

    The denominator stays at `k` even when fewer neighbors exist, so sparse
    collections do not inflate scores.
    """
    if len(c) == 0:
        raise ValueError("neighbor_vote needs a non-empty collection")
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(nl.entries) > k:
        raise ValueError(f"neighbor list has {len(nl.entries)} entries for k={k}")
    labeled = images_with_tag(c, w)
    votes = 0
    for image_id, _ in nl.entries:
        if image_id not in c:
            raise ValueError(f"neighbor {image_id!r} not in collection")
        if image_id in labeled:
            votes += 1
    return votes / k - tag_prior(c, w)


def early_fused_score(
    c: Collection,
    x: str,
    w: str,
    wv: WeightVector,
    normalizers: Mapping[str, DistanceNormalizer] | None,
    k: int,
) -> float:
    """Neighbor vote over the neighbor set retrieved by the combined distance."""
    nl = knn(c, wv, x, k, normalizers=normalizers)
    return neighbor_vote(c, nl, w, k)


def _topk_vote(
    c: Collection,
    dist: np.ndarray,
    self_index: int | None,
    tagged: np.ndarray,
    k: int,
) -> int:
    if self_index is not None:
        dist = dist.copy()
        dist[self_index] = np.inf
    order = np.lexsort((c.id_rank, dist))
    if self_index is not None:
        order = order[order != self_index]
    return int(tagged[order[: min(k, len(order))]].sum())


def neighbor_vote_table(
    c: Collection,
    w: str,
    feature: str,
    k: int,
    candidates: Iterable[str] | None = None,
    scored: Collection | None = None,
) -> ScoreTable:
    """Neighbor-vote scores for every candidate image of tag `w`.

    Neighbors are drawn from the source collection `c`; candidates (images
    labeled `w`) live in `scored`, which defaults to the source itself.
    Bit-identical to calling neighbor_vote over knn per candidate.
    """
    scored = scored if scored is not None else c
    cand = _candidate_ids(scored, w, candidates)
    if len(c) == 0:
        raise ValueError("empty source collection")
    labeled = images_with_tag(c, w)
    tagged = np.array([rec.image_id in labeled for rec in c.images], dtype=bool)
    prior = tag_prior(c, w)
    src = c.feature(feature).matrix
    qmat = np.stack([scored.vector(feature, x) for x in cand]) if cand else np.zeros((0, src.shape[1]))
    scores: dict[str, float] = {}
    block = 64
    for start in range(0, len(cand), block):
        stop = min(start + block, len(cand))
        dmat = pairwise_l1(qmat[start:stop], src)
        for row, x in enumerate(cand[start:stop]):
            self_index = c.index_of(x) if x in c else None
            votes = _topk_vote(c, dmat[row], self_index, tagged, k)
            scores[x] = votes / k - prior
    return ScoreTable(estimator=f"tagrel:{feature}", tag=w, scores=scores)


def early_fused_table(
    c: Collection,
    w: str,
    wv: WeightVector,
    normalizers: Mapping[str, DistanceNormalizer] | None,
    k: int,
    candidates: Iterable[str] | None = None,
    scored: Collection | None = None,
) -> ScoreTable:
    """Early-fused voting scores for every candidate image of tag `w`."""
    scored = scored if scored is not None else c
    cand = _candidate_ids(scored, w, candidates)
    labeled = images_with_tag(c, w)
    tagged = np.array([rec.image_id in labeled for rec in c.images], dtype=bool)
    prior = tag_prior(c, w)
    normalizers = normalizers or {}
    scores: dict[str, float] = {}
    for x in cand:
        self_index = c.index_of(x) if x in c else None
        qvecs = {name: scored.vector(name, x) for name in dict.fromkeys(wv.names)}
        dist = _combined_to_all(c, wv, qvecs, self_index, normalizers)
        if self_index is not None:
            dist = np.where(np.isnan(dist), np.inf, dist)
        votes = _topk_vote(c, dist, self_index, tagged, k)
        scores[x] = votes / k - prior
    return ScoreTable(estimator="earlyfuse", tag=w, scores=scores, meta={"weights": wv})


# ---------------------------------------------------------------------------
# tag position baseline
# ---------------------------------------------------------------------------


def tag_position_score(rec: ImageRecord, w: str) -> float:
    """1 - (pos-1)/T with 1-based position: earlier tags score higher."""
    try:
        pos = rec.tags.index(w) + 1
    except ValueError:
        raise ValueError(f"tag {w!r} absent from image {rec.image_id!r}") from None
    return 1.0 - (pos - 1) / len(rec.tags)


def tag_position_table(
    c: Collection,
    w: str,
    candidates: Iterable[str] | None = None,
    scored: Collection | None = None,
) -> ScoreTable:
    scored = scored if scored is not None else c
    cand = _candidate_ids(scored, w, candidates)
    scores = {x: tag_position_score(scored.record(x), w) for x in cand}
    return ScoreTable(estimator="tagposition", tag=w, scores=scores)


# ---------------------------------------------------------------------------
# semantic field baseline (tag co-occurrence similarity)
# ---------------------------------------------------------------------------


class TagSimilarityModel:
    """Pairwise tag similarity in [0, 1] from co-occurrence statistics.

    sim(w, t) = exp(-ngd) with the normalized co-occurrence distance
    ngd = (max(log fw, log ft) - log fwt) / (log N - min(log fw, log ft)),
    where fw, ft, fwt are document frequencies and N the collection size.
    Tags that never co-occur, or fall below `min_count`, get similarity 0;
    sim(w, w) = 1 for any tag present in the reference collection.
    """

    def __init__(
        self,
        n_images: int,
        tag_sets: Mapping[str, frozenset[str]],
        min_count: int = 1,
    ) -> None:
        if n_images < 2:
            raise ValueError("similarity model needs at least 2 reference images")
        self.n_images = n_images
        self.tag_sets = dict(tag_sets)
        self.min_count = min_count
        self._cache: dict[tuple[str, str], float] = {}

    @classmethod
    def from_pair_table(cls, sims: Mapping[tuple[str, str], float]) -> "TagSimilarityModel":
        """Model with explicitly fixed pair similarities (testing/synthetic use)."""
        model = cls.__new__(cls)
        model.n_images = 2
        model.tag_sets = {}
        model.min_count = 1
        model._cache = {}
        for (w, t), s in sims.items():
            model._cache[(w, t)] = float(s)
            model._cache[(t, w)] = float(s)
        return model

    def sim(self, w: str, t: str) -> float:
        key = (w, t) if w <= t else (t, w)
        if key in self._cache:
            return self._cache[key]
        value = self._compute(*key)
        self._cache[key] = value
        return value

    def _compute(self, w: str, t: str) -> float:
        sw = self.tag_sets.get(w, frozenset())
        st = self.tag_sets.get(t, frozenset())
        fw, ft = len(sw), len(st)
        if w == t:
            return 1.0 if fw > 0 else 0.0
        if fw < max(self.min_count, 1) or ft < max(self.min_count, 1):
            return 0.0
        fwt = len(sw & st)
        if fwt == 0:
            return 0.0
        numer = max(math.log(fw), math.log(ft)) - math.log(fwt)
        if numer <= 0.0:
            return 1.0
        denom = math.log(self.n_images) - min(math.log(fw), math.log(ft))
        return math.exp(-numer / denom)


def build_tag_similarity(c: Collection, min_count: int = 1) -> TagSimilarityModel:
    if len(c) < 2:
        raise ValueError("tag similarity needs a collection of at least 2 images")
    return TagSimilarityModel(len(c), c.tag_index, min_count=min_count)


def semantic_field_score(rec: ImageRecord, w: str, model: TagSimilarityModel) -> float:
    """Mean similarity of `w` to the image's other tags; 0 when `w` stands alone."""
    if w not in rec.tags:
        raise ValueError(f"tag {w!r} absent from image {rec.image_id!r}")
    others = [t for t in rec.tags if t != w]
    if not others:
        return 0.0
    return sum(model.sim(w, t) for t in others) / len(others)


def semantic_field_table(
    c: Collection,
    w: str,
    model: TagSimilarityModel,
    candidates: Iterable[str] | None = None,
    scored: Collection | None = None,
) -> ScoreTable:
    scored = scored if scored is not None else c
    cand = _candidate_ids(scored, w, candidates)
    scores = {x: semantic_field_score(scored.record(x), w, model) for x in cand}
    return ScoreTable(estimator="semanticfield", tag=w, scores=scores)


# ---------------------------------------------------------------------------
# kernel-density tag ranking baseline
# ---------------------------------------------------------------------------


def _kde_sigma(
    c: Collection, w: str, feature: str, sample_cap: int, seed: int
) -> float:
    """Median pairwise L1 distance over a seeded sample of tagged images."""
    members = sorted(images_with_tag(c, w))
    if len(members) < 2:
        return 1.0
    matrix = c.feature(feature).matrix
    idx = np.array([c.index_of(m) for m in members])
    n_pairs_total = len(members) * (len(members) - 1) // 2
    if n_pairs_total <= sample_cap:
        ii, jj = np.triu_indices(len(members), k=1)
    else:
        rng = np.random.default_rng([seed, 1])
        ii = rng.integers(0, len(members), size=sample_cap)
        jj = rng.integers(0, len(members), size=sample_cap)
        while True:
            clash = ii == jj
            if not clash.any():
                break
            jj[clash] = rng.integers(0, len(members), size=int(clash.sum()))
    d = np.abs(matrix[idx[ii]] - matrix[idx[jj]]).sum(axis=1)
    sigma = float(np.median(d))
    return sigma if sigma > 0.0 else 1.0


def _kde_score_for_vector(
    c: Collection,
    w: str,
    feature: str,
    qvec: np.ndarray,
    exclude_id: str,
    sigma: float | None,
    sample_cap: int,
    seed: int,
) -> float:
    support = sorted(images_with_tag(c, w) - {exclude_id})
    if not support:
        raise ValueError(f"tag {w!r} has no support images besides {exclude_id!r}")
    if sigma is None:
        sigma = _kde_sigma(c, w, feature, sample_cap, seed)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if len(support) > sample_cap:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(support), size=sample_cap, replace=False))
        support = [support[i] for i in pick]
    matrix = c.feature(feature).matrix
    rows = np.array([c.index_of(m) for m in support])
    d = l1_to_all(matrix[rows], qvec)
    return float(np.mean(np.exp(-(d * d) / (sigma * sigma))))


def tag_ranking_kde_score(
    c: Collection,
    x: str,
    w: str,
    feature: str,
    sigma: float | None = None,
    sample_cap: int = 500,
    seed: int = 0,
) -> float:
    """Mean Gaussian kernel exp(-d^2 / sigma^2) from x to the other tagged images.

    sigma defaults to the median pairwise distance among the tagged images
    (seeded sample); the support sample is capped at `sample_cap`, also seeded.
    """
    return _kde_score_for_vector(
        c, w, feature, c.vector(feature, x), x, sigma, sample_cap, seed
    )


def kde_table(
    c: Collection,
    w: str,
    feature: str,
    sigma: float | None = None,
    sample_cap: int = 500,
    seed: int = 0,
    candidates: Iterable[str] | None = None,
    scored: Collection | None = None,
) -> ScoreTable:
    """Kernel-density scores for every candidate of `w` (shared default sigma)."""
    scored = scored if scored is not None else c
    cand = _candidate_ids(scored, w, candidates)
    if sigma is None:
        sigma = _kde_sigma(c, w, feature, sample_cap, seed)
    scores = {
        x: _kde_score_for_vector(
            c, w, feature, scored.vector(feature, x), x, sigma, sample_cap, seed
        )
        for x in cand
    }
    return ScoreTable(
        estimator=f"tagranking:{feature}",
        tag=w,
        scores=scores,
        meta={"sigma": sigma},
    )
