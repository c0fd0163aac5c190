"""Objective assembly, negative sampling, Adam, and the training loop.

The objective per example is -ln p(y | prompt) plus alpha/S times the summed
per-layer KL terms, averaged over the batch. One noise draw per fused layer
per example per step estimates the bottleneck penalty; inference uses the
Gaussian mean (no noise).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tz
from .corpus import Document, Query
from .errors import ComputationError, UsageError, ValidationError
from .fileio import atomic_write
from .kg import DEFAULT_MAX_NODES, KnowledgeGraph, QuerySubgraph, subgraph_for_pair
from .model import ForwardTrace, ModelConfig, RankerModel
from .tensor import Tensor, backward

DEFAULT_LR = 3e-4
DEFAULT_EPOCHS = 3
DEFAULT_BATCH_SIZE = 8
DEFAULT_NEGATIVES = 2
GRAD_CLIP_NORM = 1.0


@dataclass(frozen=True)
class TrainingExample:
    query_id: str
    doc_id: str
    label: bool  # True iff qrels grade > 0 for this pair


def sample_training_set(qrels: dict[tuple[str, str], int], corpus_ids: list[str],
                        negatives_per_positive: int = DEFAULT_NEGATIVES,
                        seed: int = 42) -> list[TrainingExample]:
    """One true example per positive pair plus uniform negatives outside the
    query's relevant set."""
    if negatives_per_positive < 0:
        raise ValidationError(f"negatives_per_positive must be >= 0, got {negatives_per_positive}")
    relevant: dict[str, set[str]] = {}
    for (qid, did), grade in qrels.items():
        if grade > 0:
            relevant.setdefault(qid, set()).add(did)
    corpus_sorted = sorted(corpus_ids)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5e6]))
    examples: list[TrainingExample] = []
    eligible_cache: dict[str, list[str]] = {}
    for qid, did in sorted(k for k, grade in qrels.items() if grade > 0):
        examples.append(TrainingExample(qid, did, True))
        if negatives_per_positive == 0:
            continue
        eligible = eligible_cache.get(qid)
        if eligible is None:
            eligible = [d for d in corpus_sorted if d not in relevant[qid]]
            eligible_cache[qid] = eligible
        if len(eligible) < negatives_per_positive:
            raise ValidationError(
                f"corpus too small to sample {negatives_per_positive} negatives for query {qid!r}")
        picks = rng.choice(len(eligible), size=negatives_per_positive, replace=False)
        for i in sorted(picks):
            examples.append(TrainingExample(qid, eligible[i], False))
    return examples


def loss_from_trace(trace: ForwardTrace, label: bool, alpha: float, s_layers: int) -> Tensor:
    """Minimized objective: -ln p(y) + (alpha / S) * sum of KL terms."""
    if len(trace.kl_tensors) != s_layers:
        raise UsageError(f"expected {s_layers} KL terms, got {len(trace.kl_tensors)}")
    if not (0.0 < trace.score < 1.0):
        raise ComputationError(f"score {trace.score} outside (0, 1)")
    p = trace.score_tensor if label else (1.0 - trace.score_tensor)
    loss = tz.log(p) * -1.0
    if trace.kl_tensors:
        kl_sum = trace.kl_tensors[0]
        for kl in trace.kl_tensors[1:]:
            kl_sum = kl_sum + kl
        loss = loss + kl_sum * (alpha / s_layers)
    return loss


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = DEFAULT_LR,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise ComputationError(f"non-finite gradient for parameter {name!r}")
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p.data -= self.lr * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)


def clip_gradients(params: dict[str, Tensor], max_norm: float = GRAD_CLIP_NORM) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad ** 2).sum())
    norm = total ** 0.5
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class EpochStats:
    epoch: int
    mean_nll: float
    mean_kl: float
    wall_time_s: float


class SubgraphProvider:
    """Serves per-(query, doc) subgraphs from a cache, extracting on miss."""

    def __init__(self, kg: KnowledgeGraph | None,
                 queries_by_id: dict[str, Query], docs_by_id: dict[str, Document],
                 cache: dict[tuple[str, str], QuerySubgraph] | None = None,
                 max_nodes: int = DEFAULT_MAX_NODES):
        self.kg = kg
        self.queries_by_id = queries_by_id
        self.docs_by_id = docs_by_id
        self.cache = dict(cache) if cache else {}
        self.max_nodes = max_nodes

    def get(self, qid: str, did: str) -> QuerySubgraph:
        key = (qid, did)
        sub = self.cache.get(key)
        if sub is None:
            if self.kg is None:
                raise UsageError(f"no cached subgraph for {key} and no KG to extract from")
            sub = subgraph_for_pair(self.kg, self.queries_by_id[qid].text,
                                    self.docs_by_id[did].text, self.max_nodes)
            self.cache[key] = sub
        return sub


def train_model(cfg: ModelConfig, corpus: list[Document], queries: list[Query],
                qrels: dict[tuple[str, str], int], kg: KnowledgeGraph | None,
                *, epochs: int = DEFAULT_EPOCHS, batch_size: int = DEFAULT_BATCH_SIZE,
                seed: int = 42, lr: float = DEFAULT_LR,
                negatives_per_positive: int = DEFAULT_NEGATIVES,
                max_nodes: int = DEFAULT_MAX_NODES,
                cache: dict[tuple[str, str], QuerySubgraph] | None = None,
                ) -> tuple[RankerModel, list[EpochStats]]:
    """Train from scratch; deterministic given the seed (wall time aside)."""
    if epochs < 1 or batch_size < 1:
        raise ValidationError(f"need epochs >= 1 and batch_size >= 1")
    model = RankerModel.build(cfg, seed=seed)
    docs_by_id = {d.id: d for d in corpus}
    queries_by_id = {q.id: q for q in queries}
    examples = sample_training_set(qrels, list(docs_by_id), negatives_per_positive, seed)
    for ex in examples:
        if ex.query_id not in queries_by_id:
            raise ValidationError(f"qrels query {ex.query_id!r} missing from queries file")
    provider = SubgraphProvider(kg, queries_by_id, docs_by_id, cache, max_nodes)
    optimizer = Adam(model.params, lr=lr)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5f1e]))
    noise_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xe95]))
    stats: list[EpochStats] = []
    for epoch in range(1, epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(len(examples))
        nll_total, kl_total = 0.0, 0.0
        for lo in range(0, len(order), batch_size):
            batch = order[lo:lo + batch_size]
            optimizer.zero_grad()
            batch_losses: list[Tensor] = []
            for idx in batch:
                ex = examples[int(idx)]
                noise = [noise_rng.normal(size=(1, cfg.d_z)) for _ in range(cfg.S)]
                sub = None if cfg.text_only else provider.get(ex.query_id, ex.doc_id)
                trace = model.forward(queries_by_id[ex.query_id], docs_by_id[ex.doc_id],
                                      sub, noise=noise)
                batch_losses.append(loss_from_trace(trace, ex.label, cfg.alpha, cfg.S))
                p_y = trace.score if ex.label else 1.0 - trace.score
                nll_total += -math.log(p_y)
                kl_total += float(np.mean(trace.kl_terms))
            total = batch_losses[0]
            for extra in batch_losses[1:]:
                total = total + extra
            backward(total * (1.0 / len(batch_losses)))
            clip_gradients(model.params)
            optimizer.step()
        stats.append(EpochStats(epoch=epoch,
                                mean_nll=nll_total / len(examples),
                                mean_kl=kl_total / len(examples),
                                wall_time_s=time.perf_counter() - started))
    return model, stats


def save_metrics(path: str | Path, stats: list[EpochStats]) -> None:
    lines = ["epoch,mean_nll,mean_kl,wall_time_s"]
    for s in stats:
        lines.append(f"{s.epoch},{s.mean_nll!r},{s.mean_kl!r},{s.wall_time_s:.3f}")
    atomic_write(path, "\n".join(lines) + "\n")


def rerank_run(model: RankerModel, run: dict[str, list[tuple[str, float]]],
               queries_by_id: dict[str, Query], docs_by_id: dict[str, Document],
               provider: SubgraphProvider, workers: int = 1,
               ) -> dict[str, list[tuple[str, float]]]:
    """Re-score every candidate with the model (eps = 0); the candidate set per
    query is preserved exactly."""
    pairs = [(qid, did) for qid in sorted(run) for did, _ in run[qid]]

    def score(pair: tuple[str, str]) -> float:
        qid, did = pair
        sub = None if model.cfg.text_only else provider.get(qid, did)
        return model.forward(queries_by_id[qid], docs_by_id[did], sub).score

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(score, pairs))
    else:
        scores = [score(pair) for pair in pairs]
    out: dict[str, list[tuple[str, float]]] = {}
    for (qid, did), s in zip(pairs, scores):
        out.setdefault(qid, []).append((did, s))
    for qid in out:
        out[qid].sort(key=lambda item: (-item[1], item[0]))
    return out
