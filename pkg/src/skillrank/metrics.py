"""Graded-relevance ranking metrics, qrels/run text formats, significance test.

Grades are 0/1/2 (irrelevant / relevant-but-generic / occupation-specific).
nDCG uses exponential gains (2^g - 1) with a log2(rank+1) discount; a linear
gain variant is available behind a flag. MRR/MAP/Recall binarize at grade >= 1.
Unjudged docs count as grade 0 (pooled assessment).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

from scipy import stats as scipy_stats

from .types import ScoredList

log = logging.getLogger(__name__)

VALID_GRADES = (0, 1, 2)
DEFAULT_METRICS = ("ndcg@10", "mrr@10", "map@10", "recall@20")


@dataclass
class Qrels:
    """grades[query_id][doc_id] -> grade in {0, 1, 2}."""

    grades: dict[str, dict[str, int]] = field(default_factory=dict)

    def add(self, query_id: str, doc_id: str, grade: int) -> None:
        if grade not in VALID_GRADES:
            raise ValueError(f"grade must be one of {VALID_GRADES}, got {grade}")
        by_doc = self.grades.setdefault(query_id, {})
        if doc_id in by_doc:
            raise ValueError(f"duplicate judgment for ({query_id}, {doc_id})")
        by_doc[doc_id] = grade

    def grade(self, query_id: str, doc_id: str) -> int:
        return self.grades.get(query_id, {}).get(doc_id, 0)

    def relevant(self, query_id: str) -> set[str]:
        return {d for d, g in self.grades.get(query_id, {}).items() if g >= 1}

    def queries(self) -> list[str]:
        return sorted(self.grades)


Run = dict[str, ScoredList]


def load_qrels(path: str | Path) -> Qrels:
    """Lines: "qid 0 docid grade"."""
    qrels = Qrels()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            qid, _, docid, grade_text = parts
            try:
                grade = int(grade_text)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad grade {grade_text!r}") from exc
            try:
                qrels.add(qid, docid, grade)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return qrels


def save_qrels(qrels: Qrels, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in qrels.queries():
            for docid, grade in qrels.grades[qid].items():
                fh.write(f"{qid} 0 {docid} {grade}\n")


def load_run(path: str | Path, stage: str = "reranked") -> Run:
    """Lines: "qid Q0 docid rank score tag"; rank orders entries per query."""
    rows: dict[str, list[tuple[int, str, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            qid, _, docid, rank_text, score_text, _tag = parts
            try:
                rank, score = int(rank_text), float(score_text)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad rank/score") from exc
            rows.setdefault(qid, []).append((rank, docid, score))
    run: Run = {}
    for qid, entries in rows.items():
        entries.sort(key=lambda e: e[0])
        try:
            run[qid] = ScoredList(
                query_id=qid, entries=[(d, s) for _, d, s in entries], stage=stage
            )
        except ValueError as exc:
            raise ValueError(f"{path}: query {qid}: {exc}") from exc
    return run


def save_run(run: Run, path: str | Path, tag: str = "skillrank") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(run):
            for rank, (docid, score) in enumerate(run[qid].entries, start=1):
                fh.write(f"{qid} Q0 {docid} {rank} {score:.6f} {tag}\n")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _gain(grade: int, exponential: bool) -> float:
    return float(2 ** grade - 1) if exponential else float(grade)


def ndcg_at_k(
    ranking: list[str], qrels: Qrels, query_id: str, k: int, exponential_gain: bool = True
) -> float:
    """DCG@k with gain (2^g - 1) and discount log2(rank + 1), over IDCG from
    the judged grades sorted descending. 0 when nothing judged relevant.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    dcg = 0.0
    for i, doc_id in enumerate(ranking[:k], start=1):
        dcg += _gain(qrels.grade(query_id, doc_id), exponential_gain) / math.log2(i + 1)
    ideal = sorted(qrels.grades.get(query_id, {}).values(), reverse=True)
    idcg = 0.0
    for i, grade in enumerate(ideal[:k], start=1):
        idcg += _gain(grade, exponential_gain) / math.log2(i + 1)
    return dcg / idcg if idcg > 0 else 0.0


def mrr_at_k(ranking: list[str], qrels: Qrels, query_id: str, k: int) -> float:
    """1/rank of the first doc with grade >= 1 in the top k, else 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    for i, doc_id in enumerate(ranking[:k], start=1):
        if qrels.grade(query_id, doc_id) >= 1:
            return 1.0 / i
    return 0.0


def map_at_k(ranking: list[str], qrels: Qrels, query_id: str, k: int) -> float:
    """Sum of precision at each relevant hit in the top k, over min(R, k)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    total_relevant = len(qrels.relevant(query_id))
    if total_relevant == 0:
        return 0.0
    hits = 0
    precision_sum = 0.0
    for i, doc_id in enumerate(ranking[:k], start=1):
        if qrels.grade(query_id, doc_id) >= 1:
            hits += 1
            precision_sum += hits / i
    return precision_sum / min(total_relevant, k)


def recall_at_k(ranking: list[str], qrels: Qrels, query_id: str, k: int) -> float:
    """|relevant in top k| / |relevant judged|; 0 when none judged relevant."""
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = qrels.relevant(query_id)
    if not relevant:
        return 0.0
    found = sum(1 for doc_id in ranking[:k] if doc_id in relevant)
    return found / len(relevant)


_METRIC_FUNCS = {"ndcg": ndcg_at_k, "mrr": mrr_at_k, "map": map_at_k, "recall": recall_at_k}


def parse_metric(spec: str) -> tuple[str, int]:
    name, _, k_text = spec.lower().partition("@")
    if name not in _METRIC_FUNCS or not k_text.isdigit() or int(k_text) < 1:
        raise ValueError(f"bad metric spec {spec!r} (expected e.g. 'ndcg@10')")
    return name, int(k_text)


@dataclass
class EvalReport:
    per_query: dict[str, dict[str, float]]  # metric -> query_id -> value
    mean: dict[str, float]

    def format_table(self) -> str:
        metrics = sorted(self.mean)
        lines = ["query\t" + "\t".join(metrics)]
        queries = sorted(next(iter(self.per_query.values())).keys()) if self.per_query else []
        for qid in queries:
            lines.append(qid + "\t" + "\t".join(f"{self.per_query[m][qid]:.4f}" for m in metrics))
        lines.append("mean\t" + "\t".join(f"{self.mean[m]:.4f}" for m in metrics))
        return "\n".join(lines)


def evaluate_run(run: Run, qrels: Qrels, metric_specs: tuple[str, ...] = DEFAULT_METRICS) -> EvalReport:
    """Per-query metrics plus means over all judged queries.

    Queries judged but missing from the run contribute 0 (with a warning).
    """
    judged = qrels.queries()
    if not set(judged) & set(run):
        raise ValueError("run and qrels share no query")
    parsed = [(spec, *parse_metric(spec)) for spec in metric_specs]
    per_query: dict[str, dict[str, float]] = {spec: {} for spec, _, _ in parsed}
    for qid in judged:
        scored = run.get(qid)
        if scored is None:
            log.warning("query %s missing from run, scored 0", qid)
        ranking = scored.doc_ids() if scored is not None else []
        for spec, name, k in parsed:
            per_query[spec][qid] = _METRIC_FUNCS[name](ranking, qrels, qid, k)
    mean = {spec: sum(values.values()) / len(judged) for spec, values in per_query.items()}
    return EvalReport(per_query=per_query, mean=mean)


# ---------------------------------------------------------------------------
# Significance testing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    significant: bool
    threshold: float


def paired_ttest(a: list[float], b: list[float], alpha: float = 0.05, m: int = 1) -> TTestResult:
    """Two-sided paired t-test with Bonferroni threshold alpha / m.

    Zero variance of the differences yields p = 1 and not-significant by
    convention (t reported as 0 when the mean difference is also 0, else
    signed infinity).
    """
    if len(a) != len(b):
        raise ValueError("paired samples must have equal length")
    n = len(a)
    if n < 2:
        raise ValueError("need at least 2 pairs")
    if m < 1 or not (0 < alpha < 1):
        raise ValueError("alpha must be in (0,1) and m >= 1")
    diffs = [x - y for x, y in zip(a, b)]
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    threshold = alpha / m
    if var == 0.0:
        t = 0.0 if mean == 0.0 else math.copysign(math.inf, mean)
        return TTestResult(t=t, p=1.0, significant=False, threshold=threshold)
    t = mean / math.sqrt(var / n)
    p = 2.0 * float(scipy_stats.t.sf(abs(t), df=n - 1))
    return TTestResult(t=t, p=p, significant=p < threshold, threshold=threshold)
