"""Supervised fusion weights.

Early fusion weights come from distance metric learning: minimize the squared
gap between exp(-combined distance) and the pair label (1 = images share a
concept) by projected gradient descent on the simplex. Late fusion weights
come from coordinate ascent directly maximizing a rank metric (AP or NDCG)
of the fused ranking, with a bidirectional growing-step line search per
coordinate. Both learners are deterministic given their seeds and record a
monotone objective trace. Per-concept variants retrain for each tag and fall
back to the global weights when a tag has too few relevant training items.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .collection import Collection
from .estimators import ScoreTable
from .evalkit import Qrels
from .neighbors import DistanceNormalizer, WeightVector, l1_distance


@dataclass(frozen=True)
class LabeledPair:
    """Unordered training pair; label 1 iff the images share a concept."""

    x: str
    x_other: str
    label: int


def simplex_project(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    ks = np.arange(1, len(v) + 1)
    cond = u > (css - 1.0) / ks
    k = int(np.nonzero(cond)[0][-1])
    theta = (css[k] - 1.0) / (k + 1)
    return np.maximum(v - theta, 0.0)


# ---------------------------------------------------------------------------
# pair sampling
# ---------------------------------------------------------------------------


def _labels_by_image(qrels: Qrels, c: Collection) -> dict[str, frozenset[str]]:
    labels: dict[str, set[str]] = {}
    for tag in qrels.tags():
        for image_id, rel in qrels.judgments[tag].items():
            if image_id in c:
                labels.setdefault(image_id, set())
                if rel == 1:
                    labels[image_id].add(tag)
    return {i: frozenset(t) for i, t in labels.items()}


def sample_pairs(
    qrels: Qrels, c: Collection, n_pairs: int, seed: int = 0
) -> list[LabeledPair]:
    """Seeded sample of labeled pairs, balanced 50/50 where possible.

    Falls back to natural proportions when one class is scarce; never emits
    a duplicate unordered pair. Raises if either class has no pairs at all.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    labels = _labels_by_image(qrels, c)
    universe = sorted(labels)
    n = len(universe)
    if n < 2:
        raise ValueError("need at least 2 judged training images")
    rng = np.random.default_rng(seed)

    total_pairs = n * (n - 1) // 2
    if total_pairs <= 5_000_000:
        pos: list[tuple[str, str]] = []
        neg: list[tuple[str, str]] = []
        for a in range(n):
            la = labels[universe[a]]
            for b in range(a + 1, n):
                if la & labels[universe[b]]:
                    pos.append((universe[a], universe[b]))
                else:
                    neg.append((universe[a], universe[b]))
        if not pos:
            raise ValueError("no positive pairs available")
        if not neg:
            raise ValueError("no negative pairs available")
        want_pos = min(n_pairs // 2, len(pos))
        want_neg = min(n_pairs - want_pos, len(neg))
        if want_neg < n_pairs - want_pos:  # negatives scarce: top up with positives
            want_pos = min(n_pairs - want_neg, len(pos))
        pos_idx = rng.permutation(len(pos))[:want_pos]
        neg_idx = rng.permutation(len(neg))[:want_neg]
        out = [LabeledPair(a, b, 1) for a, b in (pos[i] for i in sorted(pos_idx))]
        out += [LabeledPair(a, b, 0) for a, b in (neg[i] for i in sorted(neg_idx))]
        return out

    # large universe: rejection sampling with an attempt budget
    want_pos = n_pairs // 2
    want_neg = n_pairs - want_pos
    got_pos: dict[tuple[str, str], None] = {}
    got_neg: dict[tuple[str, str], None] = {}
    budget = 200 * n_pairs
    while budget > 0 and (len(got_pos) < want_pos or len(got_neg) < want_neg):
        budget -= 1
        a, b = rng.integers(0, n, size=2)
        if a == b:
            continue
        if a > b:
            a, b = b, a
        key = (universe[a], universe[b])
        positive = bool(labels[key[0]] & labels[key[1]])
        bucket = got_pos if positive else got_neg
        want = want_pos if positive else want_neg
        if len(bucket) < want and key not in bucket:
            bucket[key] = None
    if not got_pos and not any(
        sum(1 for i in qrels.judgments[t].values() if i == 1) >= 2 for t in qrels.tags()
    ):
        raise ValueError("no positive pairs available")
    if not got_neg:
        raise ValueError("no negative pairs found within the sampling budget")
    out = [LabeledPair(a, b, 1) for a, b in got_pos]
    out += [LabeledPair(a, b, 0) for a, b in got_neg]
    return out


def pair_feature_distances(
    c: Collection,
    pairs: Sequence[LabeledPair],
    features: Sequence[str],
    normalizers: Mapping[str, DistanceNormalizer] | None = None,
) -> np.ndarray:
    """(n_pairs, n_features) matrix of per-feature normalized L1 distances.

    Distances feeding the metric learner are MinMax-normalized (rank
    normalization is query-relative and has no meaning for a symmetric pair).
    """
    normalizers = normalizers or {}
    out = np.empty((len(pairs), len(features)), dtype=np.float64)
    for j, f in enumerate(features):
        norm = normalizers.get(f, DistanceNormalizer(mode="none"))
        if norm.mode == "rankmax":
            raise ValueError("rankmax normalization is undefined for image pairs")
        matrix = c.feature(f).matrix
        for i, p in enumerate(pairs):
            d = l1_distance(matrix[c.index_of(p.x)], matrix[c.index_of(p.x_other)])
            if norm.mode == "minmax":
                d = min(1.0, max(0.0, (d - norm.lower) / (norm.upper - norm.lower)))
            out[i, j] = d
    return out


# ---------------------------------------------------------------------------
# distance metric learning (early fusion weights)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradientConfig:
    step0: float = 0.1
    step_floor: float = 1e-8
    rel_tol: float = 1e-8
    max_iter: int = 1000


@dataclass
class GradientResult:
    weights: WeightVector
    loss: float
    trace: tuple[float, ...]  # loss after init and after each accepted step
    weight_trace: tuple[tuple[float, ...], ...] = ()  # weights per accepted step


def learn_distance_weights(
    pair_distances: np.ndarray,
    labels: Sequence[int],
    names: Sequence[str],
    config: GradientConfig = GradientConfig(),
) -> GradientResult:
    """Fit simplex weights minimizing sum (exp(-sum_i w_i d_i) - y)^2.

    Projected gradient descent from uniform weights with backtracking line
    search (start 0.1, halve on non-decrease, floor 1e-8); stops when the
    relative loss change drops below 1e-8 or after 1000 iterations. The
    recorded loss trace is non-increasing.
    """
    d = np.asarray(pair_distances, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != len(y):
        raise ValueError("pair_distances must be (n_pairs, n_features) matching labels")
    if d.shape[1] != len(names):
        raise ValueError("names must match the feature axis")
    if d.shape[0] == 0:
        raise ValueError("no training pairs")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise ValueError("distances must be finite and nonnegative")
    m = d.shape[1]

    def loss_at(w: np.ndarray) -> float:
        e = np.exp(-(d @ w))
        return float(np.sum((e - y) ** 2))

    w = np.full(m, 1.0 / m)
    loss = loss_at(w)
    if not np.isfinite(loss):
        raise ValueError("non-finite loss; check input distances")
    trace = [loss]
    weight_trace: list[tuple[float, ...]] = []
    if m == 1:
        return GradientResult(WeightVector(tuple(names), (1.0,)), loss, tuple(trace))

    for _ in range(config.max_iter):
        e = np.exp(-(d @ w))
        grad = -2.0 * (d.T @ ((e - y) * e))
        step = config.step0
        accepted = None
        while step >= config.step_floor:
            cand = simplex_project(w - step * grad)
            cand_loss = loss_at(cand)
            if cand_loss < loss:
                accepted = (cand, cand_loss)
                break
            step /= 2.0
        if accepted is None:
            break
        new_w, new_loss = accepted
        rel_change = (loss - new_loss) / max(abs(loss), 1e-300)
        w, loss = new_w, new_loss
        trace.append(loss)
        weight_trace.append(tuple(float(v) for v in w))
        if rel_change < config.rel_tol:
            break
    weights = WeightVector.normalized(tuple(names), tuple(float(v) for v in w))
    return GradientResult(weights, loss, tuple(trace), tuple(weight_trace))


# ---------------------------------------------------------------------------
# coordinate ascent (late fusion weights)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AscentConfig:
    metric: str = "ap"  # "ap" or "ndcg"
    cutoff: int = 100
    delta0: float = 0.05
    growth: float = 2.0
    steps: int = 10
    tol: float = 1e-6
    max_sweeps: int = 50
    restarts: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.metric not in ("ap", "ndcg"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.delta0 <= 0 or self.tol <= 0 or self.steps < 1:
            raise ValueError("delta0 > 0, tol > 0, steps >= 1 required")
        if self.growth <= 1.0:
            raise ValueError("growth must exceed 1")
        if self.max_sweeps < 1 or self.restarts < 1:
            raise ValueError("max_sweeps and restarts must be >= 1")


AscentMove = tuple[int, str, float, float]  # sweep, coordinate, new_weight, objective


@dataclass
class AscentResult:
    weights: WeightVector
    objective: float
    trace: tuple[AscentMove, ...]
    restart: int


class _ConceptEval:
    """Precomputed candidate matrix for fast metric evaluation of one concept."""

    def __init__(self, tables: Sequence[ScoreTable], relevant: frozenset[str]) -> None:
        ids = sorted(tables[0].ids())
        self.matrix = np.array(
            [[t.scores[x] for t in tables] for x in ids], dtype=np.float64
        )
        self.rel = np.array([x in relevant for x in ids], dtype=bool)
        self.n_rel = int(self.rel.sum())

    def metric(self, w_norm: np.ndarray, metric: str, cutoff: int) -> float:
        fused = self.matrix @ w_norm
        order = np.lexsort((np.arange(len(fused)), -fused))
        rel_sorted = self.rel[order]
        if metric == "ap":
            hits = np.cumsum(rel_sorted)
            positions = np.arange(1, len(rel_sorted) + 1)
            if self.n_rel == 0:
                return 0.0
            return float((hits[rel_sorted] / positions[rel_sorted]).sum() / self.n_rel)
        top = rel_sorted[:cutoff]
        discounts = 1.0 / np.log2(np.arange(2, len(top) + 2))
        dcg = float((top * discounts).sum())
        n_ideal = min(self.n_rel, cutoff)
        if n_ideal == 0:
            return 0.0
        idcg = float((1.0 / np.log2(np.arange(2, n_ideal + 2))).sum())
        return dcg / idcg


def _build_concept_evals(
    tables_per_concept: Mapping[str, Sequence[ScoreTable]], qrels: Qrels
) -> tuple[list[_ConceptEval], tuple[str, ...]]:
    names: tuple[str, ...] | None = None
    evals: list[_ConceptEval] = []
    for tag in sorted(tables_per_concept):
        tables = tables_per_concept[tag]
        tag_names = tuple(t.estimator for t in tables)
        if names is None:
            names = tag_names
        elif tag_names != names:
            raise ValueError(
                f"estimator sequence for {tag!r} differs: {tag_names} vs {names}"
            )
        ce = _ConceptEval(tables, qrels.relevant(tag))
        if ce.n_rel > 0:  # metric undefined without relevant candidates
            evals.append(ce)
    if names is None:
        raise ValueError("no concepts to train on")
    if not evals:
        raise ValueError("no concept has a relevant training candidate")
    return evals, names


def coordinate_ascent(
    tables_per_concept: Mapping[str, Sequence[ScoreTable]],
    qrels: Qrels,
    cfg: AscentConfig = AscentConfig(),
) -> AscentResult:
    """Maximize the mean rank metric of the fused ranking over the weights.

    Cycles the coordinates; each tries values w_i +- delta0 * growth^j
    (j = 0..steps, clamped at 0) and accepts the best if it improves the
    objective by more than tol. Weights are renormalized to the simplex for
    every evaluation; the raw vector is normalized once at the end. Restarts
    perturb the start point with seeded noise; the best restart wins.
    """
    evals, names = _build_concept_evals(tables_per_concept, qrels)
    m = len(names)

    def objective(raw: np.ndarray) -> float | None:
        total = raw.sum()
        if total <= 0:
            return None
        w_norm = raw / total
        return float(
            np.mean([ce.metric(w_norm, cfg.metric, cfg.cutoff) for ce in evals])
        )

    if m == 1:
        start = np.array([1.0])
        obj = objective(start)
        assert obj is not None
        return AscentResult(WeightVector(tuple(names), (1.0,)), obj, (), 0)

    best_overall: tuple[float, np.ndarray, list[AscentMove], int] | None = None
    for restart in range(cfg.restarts):
        if restart == 0:
            w = np.full(m, 1.0 / m)
        else:
            rng = np.random.default_rng([cfg.seed, restart])
            w = simplex_project(np.full(m, 1.0 / m) + rng.normal(0.0, 0.25, size=m))
        current = objective(w)
        if current is None:
            continue
        trace: list[AscentMove] = []
        for sweep in range(1, cfg.max_sweeps + 1):
            improved = False
            for i in range(m):
                best_cand: tuple[float, float] | None = None  # (objective, value)
                for j in range(cfg.steps + 1):
                    delta = cfg.delta0 * cfg.growth**j
                    for value in (w[i] + delta, max(0.0, w[i] - delta)):
                        if value == w[i]:
                            continue
                        cand = w.copy()
                        cand[i] = value
                        obj = objective(cand)
                        if obj is None:
                            continue
                        if best_cand is None or obj > best_cand[0]:
                            best_cand = (obj, value)
                if best_cand is not None and best_cand[0] > current + cfg.tol:
                    w[i] = best_cand[1]
                    current = best_cand[0]
                    trace.append((sweep, names[i], float(w[i]), current))
                    improved = True
            if not improved:
                break
        if best_overall is None or current > best_overall[0]:
            best_overall = (current, w.copy(), trace, restart)

    assert best_overall is not None
    obj, w, trace, restart = best_overall
    weights = WeightVector.normalized(tuple(names), tuple(float(v) for v in w))
    return AscentResult(weights, obj, tuple(trace), restart)


# ---------------------------------------------------------------------------
# per-concept ("learning+") variants
# ---------------------------------------------------------------------------


@dataclass
class PerConceptResult:
    global_weights: WeightVector
    per_concept: dict[str, WeightVector]
    fallbacks: frozenset[str]
    traces: dict[str, tuple[AscentMove, ...]] = field(default_factory=dict)


def learn_per_concept(
    tables_per_concept: Mapping[str, Sequence[ScoreTable]],
    qrels: Qrels,
    cfg: AscentConfig = AscentConfig(),
    min_pos: int = 1,
    global_weights: WeightVector | None = None,
) -> PerConceptResult:
    """Coordinate ascent per concept, with global-weight fallback.

    Concepts with fewer than `min_pos` relevant training candidates (or none
    at all) receive the global weights and are flagged in `fallbacks`.
    """
    if global_weights is None:
        global_weights = coordinate_ascent(tables_per_concept, qrels, cfg).weights
    per_concept: dict[str, WeightVector] = {}
    fallbacks: set[str] = set()
    traces: dict[str, tuple[AscentMove, ...]] = {}
    for tag in sorted(tables_per_concept):
        tables = tables_per_concept[tag]
        candidates = tables[0].ids()
        n_pos = len(qrels.relevant(tag) & candidates)
        if n_pos < max(min_pos, 1):
            per_concept[tag] = global_weights
            fallbacks.add(tag)
            continue
        res = coordinate_ascent({tag: tables}, qrels, cfg)
        per_concept[tag] = res.weights
        traces[tag] = res.trace
    return PerConceptResult(
        global_weights=global_weights,
        per_concept=per_concept,
        fallbacks=frozenset(fallbacks),
        traces=traces,
    )


def learn_distance_weights_per_concept(
    c: Collection,
    qrels: Qrels,
    features: Sequence[str],
    normalizers: Mapping[str, DistanceNormalizer] | None,
    n_pairs: int,
    min_pos: int = 1,
    seed: int = 0,
    config: GradientConfig = GradientConfig(),
    global_weights: WeightVector | None = None,
) -> PerConceptResult:
    """Per-concept metric learning: pairs are drawn within one concept, a pair
    being positive iff both images are relevant to that concept."""
    if global_weights is None:
        pairs = sample_pairs(qrels, c, n_pairs, seed=seed)
        d = pair_feature_distances(c, pairs, features, normalizers)
        global_weights = learn_distance_weights(
            d, [p.label for p in pairs], features, config
        ).weights
    per_concept: dict[str, WeightVector] = {}
    fallbacks: set[str] = set()
    all_judged = sorted(
        {i for t in qrels.tags() for i in qrels.judgments[t] if i in c}
    )
    for k, tag in enumerate(qrels.tags()):
        # concept-w view: every judged training image labeled by relevance to w,
        # so negatives are "this concept's positives vs the others"
        relevant_w = qrels.relevant(tag)
        sub = Qrels(
            judgments={tag: {i: 1 if i in relevant_w else 0 for i in all_judged}}
        )
        n_pos = len(relevant_w & frozenset(all_judged))
        if n_pos < max(min_pos, 2):  # a positive pair needs two relevant images
            per_concept[tag] = global_weights
            fallbacks.add(tag)
            continue
        try:
            pairs = sample_pairs(sub, c, n_pairs, seed=seed + k + 1)
        except ValueError:
            per_concept[tag] = global_weights
            fallbacks.add(tag)
            continue
        d = pair_feature_distances(c, pairs, features, normalizers)
        per_concept[tag] = learn_distance_weights(
            d, [p.label for p in pairs], features, config
        ).weights
    return PerConceptResult(
        global_weights=global_weights,
        per_concept=per_concept,
        fallbacks=frozenset(fallbacks),
    )
