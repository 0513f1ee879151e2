"""Ranking evaluation and reliability diagnostics for retrieval runs.

Queries are texts, galleries are images, and an item is relevant iff it
shares the query's identity.  Rankings sort by descending score with ties
broken by lower gallery index, so every metric is a pure function of the
scores and flags regardless of input order.

Dataset-level reductions use math.fsum, which returns the correctly rounded
sum independent of summation order; that is what lets brute-force oracles
match these implementations exactly rather than to a tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import DatasetManifest
from .encoders import ModelParams, embed_manifest
from .losses import mapping_value

DEFAULT_RECALL_GRID = tuple(i / 100 for i in range(1, 100)) + (1.0,)
RISK_COVERAGE_POINTS = 20
MARGIN_HIST_BINS = 40  # fixed-width bins over [-2, 2]


@dataclass
class QueryRanking:
    query: int
    order: np.ndarray       # gallery indices by descending score
    relevant: np.ndarray    # relevance flags aligned with order
    uncertainty: float
    ap: float
    first_hit: int          # 1-based rank of the first relevant item


@dataclass
class RankingResult:
    queries: list[QueryRanking]
    excluded: int  # queries dropped for having no relevant gallery item


@dataclass
class PRCurve:
    recalls: np.ndarray
    precisions: np.ndarray  # macro-averaged over queries
    auc: float
    unreachable: int


@dataclass
class RiskCoverage:
    coverages: np.ndarray
    risks: np.ndarray  # top-1 error among the retained lowest-u queries


@dataclass
class ReliabilityStats:
    mean_u_correct: float | None
    mean_u_incorrect: float | None

    @property
    def complete(self) -> bool:
        return self.mean_u_correct is not None and self.mean_u_incorrect is not None


@dataclass
class MarginStats:
    weak_margins: np.ndarray  # s(T, I_weak) - s(T, I_neg) per query
    pos_margins: np.ndarray   # s(T, I_pos) - s(T, I_neg) per query
    mean_weak: float
    mean_pos: float
    bin_edges: np.ndarray
    weak_hist: np.ndarray
    pos_hist: np.ndarray


def average_precision(flags) -> float:
    """Non-interpolated AP: mean precision at each relevant rank."""
    hits, precisions = 0, []
    for rank, flag in enumerate(flags, start=1):
        if flag:
            hits += 1
            precisions.append(hits / rank)
    if not precisions:
        raise ValueError("average precision undefined without relevant items")
    return math.fsum(precisions) / len(precisions)


def rank_queries(scores: np.ndarray, relevance: np.ndarray,
                 uncertainties: np.ndarray) -> RankingResult:
    """Rank the gallery for every query; zero-relevance queries are counted out."""
    n_queries, n_gallery = scores.shape
    indices = np.arange(n_gallery)
    queries, excluded = [], 0
    for q in range(n_queries):
        if not relevance[q].any():
            excluded += 1
            continue
        order = np.lexsort((indices, -scores[q]))
        rel = relevance[q][order]
        first_hit = int(np.argmax(rel)) + 1
        queries.append(QueryRanking(
            query=q, order=order, relevant=rel,
            uncertainty=float(uncertainties[q]),
            ap=average_precision(rel), first_hit=first_hit))
    return RankingResult(queries, excluded)


def recall_at_k(result: RankingResult, k: int) -> float:
    """Fraction of queries whose first relevant item appears in the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not result.queries:
        raise ValueError("no rankable queries")
    hits = [1.0 if q.first_hit <= k else 0.0 for q in result.queries]
    return math.fsum(hits) / len(hits)


def mean_average_precision(result: RankingResult) -> float:
    if not result.queries:
        raise ValueError("no rankable queries")
    return math.fsum(q.ap for q in result.queries) / len(result.queries)


def _precision_at_recall(rel: np.ndarray, level: float) -> tuple[float, bool]:
    """Precision at the smallest prefix reaching the recall level."""
    hits = np.cumsum(rel)
    total = int(hits[-1])
    reached = (hits / total) >= level
    if not reached.any():
        # Recall levels beyond 1 cannot occur; full gallery is the fallback.
        return total / rel.shape[0], True
    k = int(np.argmax(reached)) + 1
    return float(hits[k - 1]) / k, False


def pr_curve(result: RankingResult, grid=DEFAULT_RECALL_GRID) -> PRCurve:
    """Macro-averaged precision over a fixed recall grid, plus trapezoid AUC.

    The area integrates from recall 0, extending the first grid value left,
    so a ranker with precision 1 everywhere scores exactly 1.
    """
    if not result.queries:
        raise ValueError("no rankable queries")
    grid = list(grid)
    if not grid or any(not 0.0 < r <= 1.0 for r in grid):
        raise ValueError("recall grid must lie in (0, 1]")
    unreachable = 0
    macro = []
    for level in grid:
        precisions = []
        for q in result.queries:
            p, flagged = _precision_at_recall(q.relevant, level)
            unreachable += flagged
            precisions.append(p)
        macro.append(math.fsum(precisions) / len(precisions))
    xs = [0.0] + grid
    ys = [macro[0]] + macro
    auc = math.fsum((xs[i] - xs[i - 1]) * (ys[i] + ys[i - 1]) / 2
                    for i in range(1, len(xs)))
    return PRCurve(np.array(grid), np.array(macro), auc, unreachable)


def risk_coverage(result: RankingResult,
                  n_points: int = RISK_COVERAGE_POINTS) -> RiskCoverage:
    """Top-1 error among the lowest-uncertainty fraction, per coverage level.

    Retention counts come from integer ceilings of the rational coverages,
    so no float rounding can off-by-one the cut.
    """
    if not result.queries:
        raise ValueError("no rankable queries")
    n = len(result.queries)
    u = np.array([q.uncertainty for q in result.queries])
    order = np.lexsort((np.arange(n), u))
    correct = np.array([q.relevant[0] for q in result.queries])[order]
    coverages, risks = [], []
    for i in range(1, n_points + 1):
        retained = -((-i * n) // n_points)  # ceil(i * n / n_points)
        errors = int(retained - correct[:retained].sum())
        coverages.append(i / n_points)
        risks.append(errors / retained)
    return RiskCoverage(np.array(coverages), np.array(risks))


def reliability_stats(result: RankingResult) -> ReliabilityStats:
    """Mean uncertainty grouped by top-1 correctness; None flags empty groups."""
    correct = [q.uncertainty for q in result.queries if q.relevant[0]]
    incorrect = [q.uncertainty for q in result.queries if not q.relevant[0]]

    def mean(values: list[float]) -> float | None:
        return math.fsum(values) / len(values) if values else None

    return ReliabilityStats(mean(correct), mean(incorrect))


def margin_stats(txt_emb: np.ndarray, img_emb: np.ndarray,
                 tuples: list[tuple[int, int, int, int]]) -> MarginStats:
    """Cosine margins for (query, positive, weak, negative) index tuples."""
    weak, pos = [], []
    for q, p, w, neg in tuples:
        base = float(txt_emb[q] @ img_emb[neg])
        weak.append(float(txt_emb[q] @ img_emb[w]) - base)
        pos.append(float(txt_emb[q] @ img_emb[p]) - base)
    edges = np.linspace(-2.0, 2.0, MARGIN_HIST_BINS + 1)
    weak_arr, pos_arr = np.array(weak), np.array(pos)
    return MarginStats(
        weak_margins=weak_arr, pos_margins=pos_arr,
        mean_weak=math.fsum(weak) / len(weak),
        mean_pos=math.fsum(pos) / len(pos),
        bin_edges=edges,
        weak_hist=np.histogram(weak_arr, bins=edges)[0],
        pos_hist=np.histogram(pos_arr, bins=edges)[0],
    )


def margin_tuples(identities: np.ndarray,
                  rng: np.random.Generator) -> list[tuple[int, int, int, int]]:
    """One (query, positive, weak, negative) tuple per record.

    The weak pick is a same-identity other record (the record itself when
    the identity is a singleton); the negative is any other identity.
    """
    n = identities.shape[0]
    tuples = []
    for q in range(n):
        same = np.nonzero((identities == identities[q]) & (np.arange(n) != q))[0]
        diff = np.nonzero(identities != identities[q])[0]
        if diff.shape[0] == 0:
            raise ValueError("margin tuples need at least two identities")
        weak = q if same.shape[0] == 0 else int(same[int(rng.integers(same.shape[0]))])
        neg = int(diff[int(rng.integers(diff.shape[0]))])
        tuples.append((q, q, weak, neg))
    return tuples


def query_uncertainty(img_emb: np.ndarray, txt_emb: np.ndarray,
                      identities: np.ndarray, mapping: str) -> np.ndarray:
    """Per-record uncertainty from mean cross-view embedding consistency.

    Each record's consistency is averaged over all other records of its
    identity; singleton identities are perfectly consistent by convention,
    which pins their uncertainty to the mapping's floor.
    """
    n = identities.shape[0]
    out = np.empty(n)
    for q in range(n):
        others = np.nonzero((identities == identities[q]) & (np.arange(n) != q))[0]
        if others.shape[0] == 0:
            s = 1.0
        else:
            sims = [0.5 * (float(img_emb[q] @ img_emb[o]) + float(txt_emb[q] @ txt_emb[o]))
                    for o in others]
            s = math.fsum(sims) / len(sims)
        out[q] = float(mapping_value(s, mapping))
    return out


@dataclass
class EvalResult:
    recalls: dict[int, float]
    mean_ap: float
    pr: PRCurve
    risk: RiskCoverage
    reliability: ReliabilityStats
    margins: MarginStats
    ranking: RankingResult
    uncertainties: np.ndarray
    zero_norm_rows: int


def evaluate_model(params: ModelParams, manifest: DatasetManifest, mapping: str,
                   eval_seed: int = 0, recall_ks=(1, 5, 10)) -> EvalResult:
    """Embed a dataset and run the full diagnostic battery on it."""
    img, txt, identities, _, zero_rows = embed_manifest(params, manifest)
    scores = txt @ img.T
    relevance = identities[:, None] == identities[None, :]
    uncertainties = query_uncertainty(img, txt, identities, mapping)
    ranking = rank_queries(scores, relevance, uncertainties)
    rng = np.random.default_rng(np.random.SeedSequence([eval_seed & ((1 << 64) - 1), 77]))
    tuples = margin_tuples(identities, rng)
    return EvalResult(
        recalls={k: recall_at_k(ranking, k) for k in recall_ks},
        mean_ap=mean_average_precision(ranking),
        pr=pr_curve(ranking),
        risk=risk_coverage(ranking),
        reliability=reliability_stats(ranking),
        margins=margin_stats(txt, img, tuples),
        ranking=ranking,
        uncertainties=uncertainties,
        zero_norm_rows=zero_rows,
    )
