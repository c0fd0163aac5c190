"""IR metrics over run files and qrels: MAP, nDCG@k, Recall@k, capped Recall@k.

All metrics depend only on the ordering of the run, never on score magnitudes,
and every function here is pure, so queries may be evaluated concurrently.
"""

from __future__ import annotations

import math
import sys
from pathlib import Path

from .errors import ParseError, ValidationError
from .fileio import atomic_write

Ranking = list[tuple[str, float]]
Qrels = dict[tuple[str, str], int]

KNOWN_METRICS = ("map", "ndcg@10", "recall@100", "capped_recall@100")


def _check_no_duplicates(ranking: Ranking) -> None:
    seen: set[str] = set()
    for doc_id, _ in ranking:
        if doc_id in seen:
            raise ValidationError(f"duplicate document in ranking: {doc_id!r}")
        seen.add(doc_id)


def average_precision(ranking: Ranking, relevant: set[str]) -> float:
    """Mean of precision@k at each relevant document's rank; 0 if nothing is relevant."""
    _check_no_duplicates(ranking)
    if not relevant:
        return 0.0
    hits = 0
    total = 0.0
    for rank, (doc_id, _) in enumerate(ranking, start=1):
        if doc_id in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def ndcg_at_k(ranking: Ranking, grades: dict[str, int], k: int = 10) -> float:
    """Linear-gain nDCG with a log2(rank+1) discount; 0 when no document is relevant."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    _check_no_duplicates(ranking)
    dcg = 0.0
    for rank, (doc_id, _) in enumerate(ranking[:k], start=1):
        dcg += grades.get(doc_id, 0) / math.log2(rank + 1)
    ideal = sorted((g for g in grades.values() if g > 0), reverse=True)
    idcg = sum(g / math.log2(rank + 1) for rank, g in enumerate(ideal[:k], start=1))
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


def recall_at_k(ranking: Ranking, relevant: set[str], k: int = 100,
                capped: bool = False) -> float:
    """Fraction of relevant documents in the top k; the capped variant divides
    by min(k, |relevant|) instead of |relevant|."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    _check_no_duplicates(ranking)
    if not relevant:
        return 0.0
    hits = sum(1 for doc_id, _ in ranking[:k] if doc_id in relevant)
    denom = min(k, len(relevant)) if capped else len(relevant)
    return hits / denom


def _query_grades(qrels: Qrels, qid: str) -> dict[str, int]:
    return {did: grade for (q, did), grade in qrels.items() if q == qid}


def compute_metric(metric: str, ranking: Ranking, grades: dict[str, int]) -> float:
    relevant = {did for did, g in grades.items() if g > 0}
    if metric == "map":
        return average_precision(ranking, relevant)
    if metric.startswith("ndcg@"):
        return ndcg_at_k(ranking, grades, k=int(metric.split("@")[1]))
    if metric.startswith("capped_recall@"):
        return recall_at_k(ranking, relevant, k=int(metric.split("@")[1]), capped=True)
    if metric.startswith("recall@"):
        return recall_at_k(ranking, relevant, k=int(metric.split("@")[1]), capped=False)
    raise ValidationError(f"unknown metric: {metric!r}")


def evaluate_run(run: dict[str, Ranking], qrels: Qrels,
                 metrics: tuple[str, ...] | list[str] = KNOWN_METRICS,
                 warn_stream=None) -> dict[str, dict[str, float]]:
    """Per-query metric table plus an 'all' row of unweighted macro averages.

    Every query present in the run is evaluated; queries absent from the qrels
    universe score 0 on everything and trigger a warning.
    """
    if not run:
        raise ValidationError("empty run")
    qrels_queries = {qid for qid, _ in qrels}
    table: dict[str, dict[str, float]] = {}
    for qid in sorted(run):
        if qid not in qrels_queries:
            print(f"warning: query {qid!r} not in qrels; scoring 0",
                  file=warn_stream if warn_stream is not None else sys.stderr)
        grades = _query_grades(qrels, qid)
        table[qid] = {m: compute_metric(m, run[qid], grades) for m in metrics}
    table["all"] = {m: sum(row[m] for q, row in table.items() if q != "all") / len(run)
                    for m in metrics}
    return table


# ---------------------------------------------------------------------------
# TREC run files and reports.

def save_run(path: str | Path, run: dict[str, Ranking], tag: str = "kgrank") -> None:
    """Write 'qid Q0 docid rank score tag' lines, ties broken by doc id ascending."""
    lines = []
    for qid in sorted(run):
        ordered = sorted(run[qid], key=lambda item: (-item[1], item[0]))
        for rank, (doc_id, score) in enumerate(ordered, start=1):
            lines.append(f"{qid} Q0 {doc_id} {rank} {score!r} {tag}")
    atomic_write(path, "\n".join(lines) + ("\n" if lines else ""))


def load_run(path: str | Path) -> dict[str, Ranking]:
    run: dict[str, Ranking] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ParseError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            qid, _, did, _, score_s, _ = parts
            try:
                score = float(score_s)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric score {score_s!r}") from exc
            run.setdefault(qid, []).append((did, score))
    for qid, ranking in run.items():
        ranking.sort(key=lambda item: (-item[1], item[0]))
        seen: set[str] = set()
        for did, _ in ranking:
            if did in seen:
                raise ParseError(f"{path}: duplicate (query, doc) pair ({qid!r}, {did!r})")
            seen.add(did)
    return run


def save_report(path: str | Path, table: dict[str, dict[str, float]],
                metrics: list[str]) -> None:
    """CSV report 'qid,metric,value' with an 'all' row per metric."""
    lines = ["qid,metric,value"]
    for qid in sorted(q for q in table if q != "all"):
        for metric in metrics:
            lines.append(f"{qid},{metric},{table[qid][metric]!r}")
    for metric in metrics:
        lines.append(f"all,{metric},{table['all'][metric]!r}")
    atomic_write(path, "\n".join(lines) + "\n")


def format_report(table: dict[str, dict[str, float]], metrics: list[str]) -> str:
    """Human-readable summary of the macro averages plus per-query rows."""
    width = max(len(m) for m in metrics)
    out = ["== macro averages =="]
    for metric in metrics:
        out.append(f"  {metric:<{width}}  {table['all'][metric]:.4f}")
    out.append(f"== {len(table) - 1} queries ==")
    for qid in sorted(q for q in table if q != "all"):
        vals = "  ".join(f"{m}={table[qid][m]:.4f}" for m in metrics)
        out.append(f"  {qid}: {vals}")
    return "\n".join(out)
