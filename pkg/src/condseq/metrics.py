"""Evaluation and analysis: corpus BLEU-4, add-one-smoothed sentence BLEU,
score-delta histograms, cosine nearest neighbors, and multi-run aggregation.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "BleuReport",
    "ScoreHistogram",
    "aggregate_runs",
    "bleu4",
    "nearest_neighbors",
    "ngram_counts",
    "read_scores",
    "score_histogram",
    "sentence_bleu",
    "write_histogram_csv",
    "write_scores",
]

_MAX_ORDER = 4


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    """Multiset of the n-grams of ``tokens``."""
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class BleuReport:
    """Corpus BLEU-4 with its ingredients (0-100 scale)."""

    bleu: float
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    hypothesis_length: int
    reference_length: int


def bleu4(
    hypotheses: Mapping[str, Sequence[str]],
    references: Mapping[str, Sequence[str]],
) -> BleuReport:
    """Corpus-level BLEU-4: clipped modified n-gram precisions pooled over the
    corpus, geometric mean, and the brevity penalty exp(1 - r/c) for c < r.

    An order with no hypothesis n-grams at all (every sentence shorter than
    n) is treated as vacuously precise; an order with n-grams but zero
    matches yields 0.  Single reference per hypothesis, keyed by item id.
    """
    if not hypotheses:
        raise ValueError("cannot score an empty corpus")
    if set(hypotheses) != set(references):
        raise ValueError("hypothesis and reference ids differ")
    matched = [0] * _MAX_ORDER
    total = [0] * _MAX_ORDER
    hyp_len = 0
    ref_len = 0
    for item_id, hyp in hypotheses.items():
        ref = references[item_id]
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, _MAX_ORDER + 1):
            hyp_counts = ngram_counts(hyp, n)
            if not hyp_counts:
                continue
            ref_counts = ngram_counts(ref, n)
            total[n - 1] += sum(hyp_counts.values())
            matched[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    precisions = tuple(
        (matched[i] / total[i]) if total[i] > 0 else 1.0 for i in range(_MAX_ORDER)
    )
    if hyp_len == 0:
        return BleuReport(0.0, (0.0,) * _MAX_ORDER, 0.0, 0, ref_len)
    bp = 1.0 if hyp_len >= ref_len else float(np.exp(1.0 - ref_len / hyp_len))
    if any(p == 0.0 for p in precisions):
        score = 0.0
    else:
        score = 100.0 * bp * float(np.exp(sum(np.log(p) for p in precisions) / _MAX_ORDER))
    return BleuReport(score, precisions, bp, hyp_len, ref_len)


def sentence_bleu(hypothesis: Sequence[str], reference: Sequence[str]) -> float:
    """Single-sentence BLEU-4 with add-one smoothing for orders >= 2.

    Unigram precision is unsmoothed, so a hypothesis sharing no tokens with
    the reference scores 0; higher orders use (matched+1)/(total+1) so short
    sentences with no higher n-grams still score above zero.
    """
    if len(hypothesis) == 0:
        return 0.0
    precisions: list[float] = []
    for n in range(1, _MAX_ORDER + 1):
        hyp_counts = ngram_counts(hypothesis, n)
        ref_counts = ngram_counts(reference, n)
        total = sum(hyp_counts.values())
        matched = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
        if n == 1:
            if matched == 0:
                return 0.0
            precisions.append(matched / total)
        else:
            precisions.append((matched + 1.0) / (total + 1.0))
    c, r = len(hypothesis), len(reference)
    bp = 1.0 if c >= r else float(np.exp(1.0 - r / c))
    return 100.0 * bp * float(np.exp(sum(np.log(p) for p in precisions) / _MAX_ORDER))


@dataclass(frozen=True)
class ScoreHistogram:
    """Per-bin counts and mean score deltas, binned by the baseline score."""

    edges: tuple[float, ...]  # len bins+1, spanning [0, 100]
    counts: tuple[int, ...]
    mean_deltas: tuple[float, ...]  # nan for empty bins


def score_histogram(
    baseline: Mapping[str, float],
    system: Mapping[str, float],
    bins: int = 10,
) -> ScoreHistogram:
    """Bin sentence ids by baseline score and average (system - baseline).

    Bins partition [0, 100]; the top edge is inclusive.  Counts sum to the
    corpus size.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if set(baseline) != set(system):
        raise ValueError("baseline and system score ids differ")
    if not baseline:
        raise ValueError("cannot histogram an empty score set")
    width = 100.0 / bins
    counts = [0] * bins
    sums = [0.0] * bins
    for item_id, base_score in baseline.items():
        if not 0.0 <= base_score <= 100.0:
            raise ValueError(f"score for {item_id!r} outside [0, 100]: {base_score}")
        b = min(int(base_score / width), bins - 1)
        counts[b] += 1
        sums[b] += system[item_id] - base_score
    deltas = tuple(sums[i] / counts[i] if counts[i] else float("nan") for i in range(bins))
    edges = tuple(i * width for i in range(bins + 1))
    return ScoreHistogram(edges=edges, counts=tuple(counts), mean_deltas=deltas)


def write_histogram_csv(path: str | Path, hist: ScoreHistogram) -> None:
    """Plot-ready CSV: one row per bin with count and mean delta."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "count", "mean_delta"])
        for i, count in enumerate(hist.counts):
            delta = hist.mean_deltas[i]
            writer.writerow(
                [
                    f"{hist.edges[i]:g}",
                    f"{hist.edges[i + 1]:g}",
                    count,
                    "" if np.isnan(delta) else repr(float(delta)),
                ]
            )


def write_scores(path: str | Path, scores: Mapping[str, float]) -> None:
    """Write ``<item_id>\\t<score>`` lines, id-sorted for stable bytes."""
    with open(path, "w", encoding="utf-8") as fh:
        for item_id in sorted(scores):
            fh.write(f"{item_id}\t{scores[item_id]!r}\n")


def read_scores(path: str | Path) -> dict[str, float]:
    out: dict[str, float] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            item_id, raw = line.split("\t")
            out[item_id] = float(raw)
    return out


def nearest_neighbors(
    vectors: Mapping[str, np.ndarray],
    query_id: str,
    k: int,
) -> list[str]:
    """The ``k`` ids most cosine-similar to the query, descending.

    The query is excluded from its own neighborhood; similarity ties break by
    ascending id.  Zero vectors are an error.
    """
    if query_id not in vectors:
        raise KeyError(f"unknown query id {query_id!r}")
    if not 1 <= k < len(vectors):
        raise ValueError(f"k must lie in [1, corpus size), got k={k} for {len(vectors)} vectors")
    norms = {}
    for item_id, vec in vectors.items():
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise ValueError(f"zero vector for item {item_id!r}")
        norms[item_id] = norm
    q = np.asarray(vectors[query_id], dtype=np.float64)
    qn = norms[query_id]
    scored = [
        (-float(np.dot(q, vectors[i])) / (qn * norms[i]), i)
        for i in vectors
        if i != query_id
    ]
    scored.sort()
    return [item_id for _, item_id in scored[:k]]


def aggregate_runs(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n-1); a single run has std 0."""
    if len(values) == 0:
        raise ValueError("cannot aggregate zero runs")
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return mean, std
