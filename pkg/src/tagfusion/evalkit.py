"""Retrieval evaluation: AP, NDCG, concept means, randomization test, run I/O.

Metrics see only the ordering of the candidate set. AP averages precision at
the relevant positions over the whole ranking; NDCG uses binary gains with a
log2(i+1) discount, cut off (default 100). The significance test sign-flips
per-concept score differences: exact enumeration up to 20 concepts, seeded
Monte Carlo with the add-one convention beyond that.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import AbstractSet, Iterable, Mapping, Sequence

import numpy as np

from .estimators import ScoreTable

EXACT_FLIP_LIMIT = 20


class EvalFormatError(ValueError):
    """Malformed run or qrels file."""


def average_precision(ranking: Sequence[str], relevant: AbstractSet[str]) -> float:
    """Mean precision at the relevant positions; 0 if nothing relevant ranked.

    R counts only relevant items inside the ranked candidate set, so
    judgments for images outside the candidate set do not dilute the score.
    """
    hits = 0
    total = 0.0
    for pos, item in enumerate(ranking, start=1):
        if item in relevant:
            hits += 1
            total += hits / pos
    if hits == 0:
        return 0.0
    return total / hits


def ndcg_at(ranking: Sequence[str], relevant: AbstractSet[str], cutoff: int = 100) -> float:
    """Binary-gain NDCG at `cutoff`: DCG / ideal DCG; 0 when nothing relevant."""
    if cutoff < 1:
        raise ValueError("cutoff must be >= 1")
    dcg = 0.0
    for pos, item in enumerate(ranking[:cutoff], start=1):
        if item in relevant:
            dcg += 1.0 / math.log2(pos + 1)
    n_rel = sum(1 for item in ranking if item in relevant)
    if n_rel == 0:
        return 0.0
    idcg = sum(1.0 / math.log2(pos + 1) for pos in range(1, min(n_rel, cutoff) + 1))
    return dcg / idcg


def mean_over_concepts(values: Mapping[str, float] | Iterable[float]) -> float:
    seq = list(values.values()) if isinstance(values, Mapping) else list(values)
    if not seq:
        raise ValueError("mean over zero concepts is undefined")
    return sum(seq) / len(seq)


def _flip_sums(signs: np.ndarray, diffs: np.ndarray) -> np.ndarray:
    # row-wise np.sum (not BLAS matmul) so the identity flip reproduces the
    # observed statistic bitwise and mathematically tied flips count as ties
    return np.sum(signs * diffs, axis=1)


def _flip_count_exact(diffs: np.ndarray) -> tuple[int, int]:
    """(#flips with |mean| >= observed, total flips) over all 2^n sign vectors."""
    n = len(diffs)
    observed = abs(float(np.sum(diffs)))  # compare sums; the 1/n factor cancels
    total = 1 << n
    count = 0
    chunk = 1 << 16
    codes = np.arange(total, dtype=np.uint64)
    bits = 1 << np.arange(n, dtype=np.uint64)
    for start in range(0, total, chunk):
        block = codes[start : start + chunk]
        signs = np.where((block[:, None] & bits[None, :]) != 0, -1.0, 1.0)
        sums = _flip_sums(signs, diffs)
        count += int((np.abs(sums) >= observed).sum())
    return count, total


def _flip_count_monte_carlo(diffs: np.ndarray, n_perm: int, seed: int) -> tuple[int, int]:
    rng = np.random.default_rng(seed)
    observed = abs(float(np.sum(diffs)))
    count = 0
    chunk = 1 << 14
    remaining = n_perm
    while remaining > 0:
        size = min(chunk, remaining)
        signs = rng.choice((-1.0, 1.0), size=(size, len(diffs)))
        sums = _flip_sums(signs, diffs)
        count += int((np.abs(sums) >= observed).sum())
        remaining -= size
    # add-one: the observed labeling counts as one permutation, so p > 0
    return count + 1, n_perm + 1


def randomization_test(
    scores_a: Sequence[float],
    scores_b: Sequence[float],
    n_perm: int = 100_000,
    seed: int = 0,
    method: str = "auto",
) -> float:
    """Two-sided sign-flip test on paired per-concept scores.

    Exact enumeration of all 2^n flips when n <= 20 (or method='exact');
    otherwise `n_perm` seeded random flips with the add-one convention.
    Returns the p-value in (0, 1]; symmetric in its arguments.
    """
    if len(scores_a) != len(scores_b):
        raise ValueError(f"length mismatch: {len(scores_a)} vs {len(scores_b)}")
    if len(scores_a) < 2:
        raise ValueError("need at least 2 paired scores")
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    if method not in ("auto", "exact", "montecarlo"):
        raise ValueError(f"unknown method {method!r}")
    diffs = np.asarray(scores_a, dtype=np.float64) - np.asarray(scores_b, dtype=np.float64)
    if method == "exact" or (method == "auto" and len(diffs) <= EXACT_FLIP_LIMIT):
        count, total = _flip_count_exact(diffs)
    else:
        count, total = _flip_count_monte_carlo(diffs, n_perm, seed)
    return count / total


# ---------------------------------------------------------------------------
# qrels and run files
# ---------------------------------------------------------------------------


@dataclass
class Qrels:
    """Binary relevance judgments; unjudged pairs default to irrelevant."""

    judgments: dict[str, dict[str, int]] = field(default_factory=dict)

    def add(self, tag: str, image_id: str, rel: int) -> None:
        if rel not in (0, 1):
            raise ValueError(f"relevance must be 0 or 1, got {rel!r}")
        self.judgments.setdefault(tag, {})[image_id] = rel

    def relevant(self, tag: str) -> frozenset[str]:
        return frozenset(i for i, r in self.judgments.get(tag, {}).items() if r == 1)

    def tags(self) -> list[str]:
        return sorted(self.judgments)

    def __contains__(self, tag: str) -> bool:
        return tag in self.judgments

    @classmethod
    def from_ground_truth(cls, truth: Mapping[str, AbstractSet[str]]) -> "Qrels":
        q = cls()
        for tag in sorted(truth):
            for image_id in sorted(truth[tag]):
                q.add(tag, image_id, 1)
        return q


def read_qrels(path: str | Path) -> Qrels:
    path = Path(path)
    q = Qrels()
    for no, line in enumerate(open(path, encoding="utf-8"), start=1):
        line = line.rstrip("\n")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise EvalFormatError(f"{path}:{no}: expected 'tag<TAB>image_id<TAB>rel'")
        tag, image_id, rel_s = parts
        if rel_s not in ("0", "1"):
            raise EvalFormatError(f"{path}:{no}: relevance must be 0 or 1")
        if image_id in q.judgments.get(tag, {}):
            raise EvalFormatError(f"{path}:{no}: duplicate judgment for ({tag}, {image_id})")
        q.add(tag, image_id, int(rel_s))
    return q


def write_qrels(path: str | Path, q: Qrels) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        for tag in sorted(q.judgments):
            for image_id in sorted(q.judgments[tag]):
                fh.write(f"{tag}\t{image_id}\t{q.judgments[tag][image_id]}\n")


@dataclass
class RunFile:
    """Ranked retrieval output: per tag, (image_id, score) descending."""

    run_id: str
    rankings: dict[str, tuple[tuple[str, float], ...]] = field(default_factory=dict)

    def tags(self) -> list[str]:
        return sorted(self.rankings)

    def ranking(self, tag: str) -> list[str]:
        return [i for i, _ in self.rankings[tag]]


def run_from_tables(run_id: str, tables: Iterable[ScoreTable]) -> RunFile:
    run = RunFile(run_id=run_id)
    for t in tables:
        if t.tag in run.rankings:
            raise ValueError(f"duplicate table for tag {t.tag!r}")
        run.rankings[t.tag] = tuple((x, t.scores[x]) for x in t.ranking())
    return run


def write_run(path: str | Path, run: RunFile) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        for tag in sorted(run.rankings):
            for rank, (image_id, score) in enumerate(run.rankings[tag], start=1):
                fh.write(f"{tag}\t{image_id}\t{rank}\t{score!r}\t{run.run_id}\n")


def read_run(path: str | Path) -> RunFile:
    path = Path(path)
    run_id: str | None = None
    rankings: dict[str, list[tuple[str, float]]] = {}
    seen: set[tuple[str, str]] = set()
    for no, line in enumerate(open(path, encoding="utf-8"), start=1):
        line = line.rstrip("\n")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise EvalFormatError(
                f"{path}:{no}: expected 5 tab-separated fields, got {len(parts)}"
            )
        tag, image_id, rank_s, score_s, rid = parts
        if run_id is None:
            run_id = rid
        elif rid != run_id:
            raise EvalFormatError(f"{path}:{no}: mixed run ids {run_id!r} and {rid!r}")
        if (tag, image_id) in seen:
            raise EvalFormatError(f"{path}:{no}: duplicate image {image_id!r} under {tag!r}")
        seen.add((tag, image_id))
        try:
            rank = int(rank_s)
            score = float(score_s)
        except ValueError:
            raise EvalFormatError(f"{path}:{no}: bad rank or score") from None
        entries = rankings.setdefault(tag, [])
        if rank != len(entries) + 1:
            raise EvalFormatError(
                f"{path}:{no}: rank {rank} not contiguous for tag {tag!r}"
            )
        if entries:
            prev_id, prev_score = entries[-1]
            if score > prev_score or (score == prev_score and image_id <= prev_id):
                raise EvalFormatError(
                    f"{path}:{no}: ordering violates the descending-score/id tie rule"
                )
        entries.append((image_id, score))
    if run_id is None:
        raise EvalFormatError(f"{path}: empty run file")
    return RunFile(run_id=run_id, rankings={t: tuple(e) for t, e in rankings.items()})


# ---------------------------------------------------------------------------
# evaluation and report
# ---------------------------------------------------------------------------


@dataclass
class RunEvaluation:
    run_id: str
    per_concept: dict[str, tuple[float, float]]  # tag -> (AP, NDCG@cutoff)
    unjudged_tags: frozenset[str]

    @property
    def mean_ap(self) -> float:
        return mean_over_concepts({t: v[0] for t, v in self.per_concept.items()})

    @property
    def mean_ndcg(self) -> float:
        return mean_over_concepts({t: v[1] for t, v in self.per_concept.items()})


def evaluate_run(run: RunFile, qrels: Qrels, cutoff: int = 100) -> RunEvaluation:
    """Per-concept AP and NDCG; tags missing from the qrels score 0 and are flagged."""
    per_concept: dict[str, tuple[float, float]] = {}
    unjudged: set[str] = set()
    for tag in run.tags():
        if tag not in qrels:
            unjudged.add(tag)
        relevant = qrels.relevant(tag)
        ranking = run.ranking(tag)
        per_concept[tag] = (
            average_precision(ranking, relevant),
            ndcg_at(ranking, relevant, cutoff=cutoff),
        )
    if not per_concept:
        raise ValueError(f"run {run.run_id!r} ranks no tags")
    return RunEvaluation(
        run_id=run.run_id, per_concept=per_concept, unjudged_tags=frozenset(unjudged)
    )


def render_report(
    runs: Sequence[RunFile],
    qrels: Qrels,
    cutoff: int = 100,
    n_perm: int = 100_000,
    seed: int = 0,
) -> str:
    """Plain-text evaluation report.

    One concept/AP/NDCG table per run, then a footer with mAP, mNDCG, and
    pairwise randomization-test p-values when two or more runs are given.
    Significance on a metric requires both runs to rank the same concepts.
    """
    if not runs:
        raise ValueError("no runs to evaluate")
    evals = [evaluate_run(r, qrels, cutoff=cutoff) for r in runs]
    lines: list[str] = []
    for ev in evals:
        lines.append(f"run\t{ev.run_id}")
        lines.append(f"concept\tAP\tNDCG@{cutoff}")
        for tag in sorted(ev.per_concept):
            ap, nd = ev.per_concept[tag]
            flag = "\t[unjudged]" if tag in ev.unjudged_tags else ""
            lines.append(f"{tag}\t{ap:.6f}\t{nd:.6f}{flag}")
        lines.append("")
    lines.append("== summary ==")
    for ev in evals:
        lines.append(f"mAP\t{ev.run_id}\t{ev.mean_ap:.6f}")
    for ev in evals:
        lines.append(f"mNDCG\t{ev.run_id}\t{ev.mean_ndcg:.6f}")
    if len(evals) >= 2:
        lines.append("== randomization test (two-sided) ==")
        for i in range(len(evals)):
            for j in range(i + 1, len(evals)):
                a, b = evals[i], evals[j]
                shared = sorted(set(a.per_concept) & set(b.per_concept))
                if len(shared) < 2:
                    lines.append(f"p\tAP\t{a.run_id}\t{b.run_id}\tn/a")
                    lines.append(f"p\tNDCG\t{a.run_id}\t{b.run_id}\tn/a")
                    continue
                p_ap = randomization_test(
                    [a.per_concept[t][0] for t in shared],
                    [b.per_concept[t][0] for t in shared],
                    n_perm=n_perm,
                    seed=seed,
                )
                p_nd = randomization_test(
                    [a.per_concept[t][1] for t in shared],
                    [b.per_concept[t][1] for t in shared],
                    n_perm=n_perm,
                    seed=seed,
                )
                lines.append(f"p\tAP\t{a.run_id}\t{b.run_id}\t{p_ap:.6g}")
                lines.append(f"p\tNDCG\t{a.run_id}\t{b.run_id}\t{p_nd:.6g}")
    return "\n".join(lines) + "\n"
