"""Acceptance suite.

One test per acceptance criterion, each printing a PASS/FAIL line (run with
`pytest tests/test_acceptance.py -v -s` to watch them stream). The expensive
central-claim comparison (criterion 6/7) trains three models on the default
synthetic task and is shared through a module-scoped fixture.
"""

import json
import os
import time

import numpy as np
import pytest

import kgrank.tensor as tz
from conftest import frozen_noise, tiny_config, tiny_subgraph
from kgrank.cli import main
from kgrank.corpus import (Document, Query, bm25_score, build_index,
                           retrieve_topk, tokenize)
from kgrank.evaluation import (average_precision, load_run, ndcg_at_k,
                               recall_at_k)
from kgrank.kg import KnowledgeGraph, extract_subgraph
from kgrank.model import ModelConfig, RankerModel, build_vocab, kl_gaussian_std_normal
from kgrank.oracles import (ap_direct, bm25_direct, kl_mc_estimate,
                            mutual_information_mc, ndcg_direct, recall_direct,
                            subgraph_edges_direct, two_hop_nodes_direct)
from kgrank.synth import generate
from kgrank.tensor import Tensor, finite_diff_check
from kgrank.training import SubgraphProvider, loss_from_trace, rerank_run, train_model
from test_corpus import FIXTURE_DOCS, FIXTURE_QUERIES, FIXTURE_SCORES
from test_tensor import PRIMITIVE_CASES, primitive_case_seed, primitive_leaf


def report(criterion: str, ok: bool, detail: str) -> None:
    print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
    assert ok, f"{criterion}: {detail}"


# ---------------------------------------------------------------------------
# Criterion 1: gradient fidelity.

def test_criterion_1_gradient_fidelity():
    started = time.time()
    worst_prim = 0.0
    for name, fn, xshape, pshape, kind in PRIMITIVE_CASES:
        rng = np.random.default_rng(primitive_case_seed(name))
        x = primitive_leaf(rng, xshape, kind)
        params = {"x": x}
        if pshape is not None:
            params["p"] = primitive_leaf(rng, pshape, kind)
        weight = Tensor(rng.normal(size=fn(x, params.get("p")).shape))
        err = finite_diff_check(lambda: tz.tsum(fn(x, params.get("p")) * weight),
                                params, step=1e-5, max_coords=60, seed=2)
        worst_prim = max(worst_prim, err)

    cfg = tiny_config(d_l=16, d_g=8, heads=2, R=1, S=1)
    model = RankerModel.build(cfg, seed=7)
    query, doc = Query("q", "alpha beta"), Document("d", "gamma delta alpha")
    noise = frozen_noise(cfg, seed=3)

    def objective():
        trace = model.forward(query, doc, tiny_subgraph(), noise=noise)
        return loss_from_trace(trace, True, cfg.alpha, cfg.S)

    err_model = finite_diff_check(objective, model.params, step=1e-4,
                                  max_coords=200, seed=4)
    elapsed = time.time() - started
    report("criterion 1 (gradient fidelity)",
           worst_prim < 1e-6 and err_model < 1e-4 and elapsed < 60,
           f"primitives max err {worst_prim:.2e} (<1e-6), "
           f"full model err {err_model:.2e} (<1e-4), {elapsed:.1f}s (<60s)")


# ---------------------------------------------------------------------------
# Criterion 2: mutual-information machinery.

def test_criterion_2_mi_machinery():
    started = time.time()
    rng = np.random.default_rng(12345)
    worst_gap = 0.0
    for i in range(50):
        # ranges keep the estimator's standard error well under the tolerance
        mu = rng.uniform(-0.8, 0.8, size=4)
        sigma = rng.uniform(0.6, 1.4, size=4)
        closed = kl_gaussian_std_normal(Tensor(mu), Tensor(sigma)).item()
        estimate, _ = kl_mc_estimate(mu, sigma, 1_000_000, seed=1000 + i)
        worst_gap = max(worst_gap, abs(closed - estimate))
    kl_ok = worst_gap < 1e-2

    k, d = 6, 3
    weights = rng.dirichlet(np.ones(k))
    mus = rng.uniform(-1.5, 1.5, size=(k, d))
    sigmas = rng.uniform(0.4, 1.2, size=(k, d))
    mean_kl = sum(w * kl_gaussian_std_normal(Tensor(m), Tensor(s)).item()
                  for w, m, s in zip(weights, mus, sigmas))
    mi, se = mutual_information_mc(weights, mus, sigmas, 500_000, seed=99)
    bound_ok = mi <= mean_kl + 3 * se
    elapsed = time.time() - started
    report("criterion 2 (MI machinery)", kl_ok and bound_ok and elapsed < 120,
           f"max |closed-MC| {worst_gap:.2e} (<1e-2) over 50 draws; "
           f"MC I(x;z)={mi:.4f} <= mean KL {mean_kl:.4f} + 3SE {3 * se:.4f}; "
           f"{elapsed:.1f}s (<120s)")


# ---------------------------------------------------------------------------
# Criterion 3: metric oracles.

def test_criterion_3_metric_oracles():
    started = time.time()
    rng = np.random.default_rng(4242)
    checked = 0
    for _ in range(500):
        n = int(rng.integers(1, 25))
        ids = [f"d{i}" for i in range(n)]
        rng.shuffle(ids)
        ranking = [(d, float(s)) for d, s in zip(ids, sorted(rng.normal(size=n),
                                                             reverse=True))]
        grades = {d: int(rng.integers(0, 4)) for d in ids if rng.random() < 0.6}
        relevant = {d for d, g in grades.items() if g > 0}
        k = int(rng.integers(1, 30))
        assert average_precision(ranking, relevant) == ap_direct(ids, relevant)
        assert abs(ndcg_at_k(ranking, grades, k) - ndcg_direct(ids, grades, k)) <= 1e-12
        assert recall_at_k(ranking, relevant, k) == recall_direct(ids, relevant, k, False)
        assert recall_at_k(ranking, relevant, k, capped=True) == \
            recall_direct(ids, relevant, k, True)
        checked += 1
    elapsed = time.time() - started
    report("criterion 3 (metric oracles)", checked == 500 and elapsed < 30,
           f"{checked} random instances per metric, exact agreement; "
           f"{elapsed:.1f}s (<30s)")


# ---------------------------------------------------------------------------
# Criterion 4: subgraph correctness.

def test_criterion_4_subgraph_correctness():
    started = time.time()
    rng = np.random.default_rng(777)
    for _ in range(200):
        n = int(rng.integers(3, 51))
        nodes = [f"v{i:02d}" for i in range(n)]
        triples = set()
        for _ in range(int(rng.integers(n // 2, 3 * n))):
            h, t = rng.choice(n, size=2, replace=False)
            triples.add((nodes[int(h)], f"r{int(rng.integers(4))}", nodes[int(t)]))
        kg = KnowledgeGraph()
        kg.triples = sorted(triples)
        for h, r, t in kg.triples:
            kg.nodes.update((h, t))
            kg.relations.add(r)
        kg.nodes.update(nodes)
        k = int(rng.integers(0, min(7, n + 1)))
        seeds = [str(s) for s in rng.choice(nodes, size=k, replace=False)] if k else []
        v_q = {s for s in seeds if rng.random() < 0.5}
        v_d = set(seeds) - v_q
        sub = extract_subgraph(kg, v_q, v_d, max_nodes=n + 1)  # uncapped
        expected_nodes = two_hop_nodes_direct(kg.triples, set(seeds))
        assert set(sub.node_ids[1:]) == expected_nodes
        got_edges = {(sub.node_ids[s], r, sub.node_ids[t]) for s, r, t in sub.edges
                     if r != "<int>"}
        assert got_edges == subgraph_edges_direct(kg.triples, expected_nodes)

        # capped rerun respects the priority rule: all seeds kept first, then
        # bridges ordered by distinct adjacent seeds with id tie-break
        cap = int(rng.integers(1, 12))
        capped = extract_subgraph(kg, v_q, v_d, max_nodes=cap)
        flags = dict(zip(capped.node_ids[1:], capped.provenance[1:]))
        if any(f == "bridge" for f in flags.values()):
            assert set(seeds) <= set(capped.node_ids[1:])
        assert len(capped.node_ids) <= cap + 1
    elapsed = time.time() - started
    report("criterion 4 (subgraph correctness)", elapsed < 30,
           f"200 random graphs, node and edge sets equal brute-force "
           f"enumeration; capping keeps seeds; {elapsed:.1f}s (<30s)")


# ---------------------------------------------------------------------------
# Criterion 5: BM25 correctness.

def test_criterion_5_bm25_correctness():
    index = build_index(FIXTURE_DOCS)
    worst = 0.0
    for (qid, did), expected in FIXTURE_SCORES.items():
        got = bm25_score(index, tokenize(FIXTURE_QUERIES[qid]), did)
        worst = max(worst, abs(got - expected))
    fixture_ok = worst < 1e-6

    rng = np.random.default_rng(31337)
    words = [f"w{i}" for i in range(12)]
    ordering_ok = True
    for _ in range(200):
        n = int(rng.integers(1, 40))
        docs = [Document(f"d{i:02d}", " ".join(rng.choice(words, size=rng.integers(0, 12))))
                for i in range(n)]
        idx = build_index(docs)
        terms = list(rng.choice(words, size=int(rng.integers(1, 5))))
        got = retrieve_topk(idx, Query("q", " ".join(terms)), k=n + 5)
        table = sorted(((d.id, bm25_score(idx, terms, d.id)) for d in docs
                        if bm25_score(idx, terms, d.id) > 0),
                       key=lambda item: (-item[1], item[0]))
        ordering_ok = ordering_ok and got == table
        tokens = {d.id: tokenize(d.text) for d in docs}
        for d in docs[:5]:
            ordering_ok = ordering_ok and \
                abs(bm25_score(idx, terms, d.id) - bm25_direct(tokens, terms, d.id)) < 1e-9
    report("criterion 5 (BM25 correctness)", fixture_ok and ordering_ok,
           f"fixture max |err| {worst:.2e} (<1e-6); exhaustive-oracle ordering "
           f"on 200 random corpora")


# ---------------------------------------------------------------------------
# Criteria 6 and 7: the central claim and the MI-fusion ablation, at desk scale.

ACCEPTANCE_MODEL = dict(d_l=32, d_g=32, heads=2, R=1, S=2, d_z=16, d_proj=32,
                        max_len=64)
ACCEPTANCE_SEED = 42


@pytest.fixture(scope="module")
def central_claim_runs():
    """Generate the default task and train graph / text-only / alpha=0 models
    with the same budget (3 epochs, batch 8, lr 3e-4, seed 42)."""
    started = time.time()
    task = generate(seed=ACCEPTANCE_SEED)
    kg = KnowledgeGraph()
    kg.triples = task.triples
    for h, r, t in kg.triples:
        kg.nodes.update((h, t))
        kg.relations.add(r)
    for node, surface in task.lexicon:
        kg.nodes.add(node)
        kg.names.setdefault(node, []).append(surface)

    train_ids, test_ids = set(task.train_query_ids), set(task.test_query_ids)
    queries_train = [q for q in task.queries if q.id in train_ids]
    queries_test = [q for q in task.queries if q.id in test_ids]
    qrels_train = {k: v for k, v in task.qrels.items() if k[0] in train_ids}
    qrels_test = {k: v for k, v in task.qrels.items() if k[0] in test_ids}

    index = build_index(task.corpus)
    bm25_run = {q.id: retrieve_topk(index, q, k=100) for q in queries_test}

    def test_ndcg(run):
        vals = []
        for qid, ranking in run.items():
            grades = {d: g for (q, d), g in qrels_test.items() if q == qid}
            vals.append(ndcg_at_k(ranking, grades, k=10))
        return float(np.mean(vals))

    vocab = build_vocab(task.corpus)
    relations = sorted(kg.relations)
    docs_by_id = {d.id: d for d in task.corpus}
    queries_by_id = {q.id: q for q in task.queries}

    results = {"bm25": test_ndcg(bm25_run)}
    stats_by_arm = {}
    for arm, overrides in [("graph", dict(alpha=0.01)),
                           ("text_only", dict(alpha=0.01, text_only=True)),
                           ("graph_alpha0", dict(alpha=0.0))]:
        cfg = ModelConfig(vocab=vocab, relations=relations,
                          **ACCEPTANCE_MODEL, **overrides)
        model, stats = train_model(cfg, task.corpus, queries_train, qrels_train,
                                   kg, epochs=3, batch_size=8,
                                   seed=ACCEPTANCE_SEED, lr=3e-4)
        provider = SubgraphProvider(kg, queries_by_id, docs_by_id)
        reranked = rerank_run(model, bm25_run, queries_by_id, docs_by_id, provider)
        results[arm] = test_ndcg(reranked)
        stats_by_arm[arm] = stats
        # re-ranking must preserve every candidate set
        for qid in bm25_run:
            assert {d for d, _ in bm25_run[qid]} == {d for d, _ in reranked[qid]}
    return {"ndcg": results, "stats": stats_by_arm,
            "elapsed": time.time() - started}


def test_criterion_6_central_claim(central_claim_runs):
    ndcg = central_claim_runs["ndcg"]
    elapsed = central_claim_runs["elapsed"]
    margin_text = ndcg["graph"] - ndcg["text_only"]
    margin_bm25 = ndcg["graph"] - ndcg["bm25"]
    report("criterion 6 (central claim at desk scale)",
           margin_text >= 0.05 and margin_bm25 >= 0.05 and elapsed < 600,
           f"test nDCG@10: graph {ndcg['graph']:.4f}, text-only "
           f"{ndcg['text_only']:.4f} (margin {margin_text:+.4f} >= 0.05), "
           f"BM25 {ndcg['bm25']:.4f} (margin {margin_bm25:+.4f} >= 0.05); "
           f"{elapsed:.0f}s (<600s)")


def test_criterion_7_mi_fusion_ablation(central_claim_runs):
    stats = central_claim_runs["stats"]
    ndcg = central_claim_runs["ndcg"]
    kl_with = stats["graph"][-1].mean_kl
    kl_without = stats["graph_alpha0"][-1].mean_kl
    delta_quality = ndcg["graph"] - ndcg["graph_alpha0"]
    report("criterion 7 (MI-fusion ablation)", kl_with < kl_without,
           f"final mean KL: alpha=0.01 -> {kl_with:.3f} < alpha=0 -> "
           f"{kl_without:.3f}; nDCG@10 delta {delta_quality:+.4f} "
           f"(reported, not thresholded)")


# ---------------------------------------------------------------------------
# Criteria 8 and 9: pipeline determinism and candidate preservation, end to
# end through the CLI.

GEN_ARGS = ["--num-queries", "10", "--corpus-size", "200", "--kg-nodes", "120",
            "--decoy-edges", "60"]


def run_pipeline(root) -> None:
    config = {
        "corpus": "task/corpus.jsonl",
        "queries": "task/queries_train.jsonl",
        "qrels": "task/qrels_train.txt",
        "kg": "task/kg.tsv",
        "lexicon": "task/lexicon.tsv",
        "checkpoint_out": "ckpt.json",
        "model_config_out": "model.json",
        "metrics_out": "metrics.csv",
        "epochs": 1,
        "batch_size": 4,
        "seed": 5,
        "model": {"d_l": 16, "d_g": 8, "heads": 2, "R": 0, "S": 1, "d_z": 4,
                  "d_proj": 8, "max_len": 32},
    }
    cwd = os.getcwd()
    os.chdir(root)
    try:
        assert main(["gen", "--out", "task", "--seed", "7", *GEN_ARGS]) == 0
        assert main(["index", "--corpus", "task/corpus.jsonl", "--out", "index.json"]) == 0
        assert main(["retrieve", "--index", "index.json",
                     "--queries", "task/queries_test.jsonl", "--k", "100",
                     "--out", "run_bm25.txt"]) == 0
        assert main(["subgraphs", "--kg", "task/kg.tsv", "--lexicon", "task/lexicon.tsv",
                     "--queries", "task/queries.jsonl", "--corpus", "task/corpus.jsonl",
                     "--run", "run_bm25.txt", "--out", "cache.jsonl"]) == 0
        (root / "train.json").write_text(json.dumps(config))
        assert main(["train", "--config", "train.json"]) == 0
        assert main(["rerank", "--checkpoint", "ckpt.json", "--model-config",
                     "model.json", "--run", "run_bm25.txt",
                     "--corpus", "task/corpus.jsonl", "--queries", "task/queries.jsonl",
                     "--cache", "cache.jsonl", "--out", "run_rr.txt"]) == 0
        assert main(["eval", "--run", "run_rr.txt", "--qrels", "task/qrels_test.txt",
                     "--out", "report.csv"]) == 0
    finally:
        os.chdir(cwd)


def test_criterion_8_pipeline_determinism(tmp_path):
    for sub in ("a", "b"):
        (tmp_path / sub).mkdir()
        run_pipeline(tmp_path / sub)
    stages = ["task/corpus.jsonl", "task/kg.tsv", "index.json", "run_bm25.txt",
              "cache.jsonl", "ckpt.json", "model.json", "run_rr.txt", "report.csv"]
    mismatched = [name for name in stages
                  if (tmp_path / "a" / name).read_bytes()
                  != (tmp_path / "b" / name).read_bytes()]
    report("criterion 8 (pipeline determinism)", not mismatched,
           f"byte-identical reruns for {', '.join(stages)}"
           + (f"; MISMATCH: {mismatched}" if mismatched else ""))


def test_criterion_9_candidate_set_preservation(tmp_path):
    run_pipeline(tmp_path)
    before = load_run(tmp_path / "run_bm25.txt")
    after = load_run(tmp_path / "run_rr.txt")
    same_queries = set(before) == set(after)
    same_candidates = all({d for d, _ in before[q]} == {d for d, _ in after[q]}
                          for q in before)
    no_new_pairs = all(d in {x for x, _ in before[q]} for q in after for d, _ in after[q])
    report("criterion 9 (candidate-set preservation)",
           same_queries and same_candidates and no_new_pairs,
           f"rerank preserved the per-query candidate sets for "
           f"{len(before)} queries")
