"""Knowledge-graph loading, entity linking, and 2-hop subgraph extraction.

A query-document subgraph keeps the linked entities of both texts plus every
node bridging two of them through paths of length <= 2 (undirected), capped to
a node budget. An interaction node is prepended and connected to every retained
node in both directions with the reserved relation, giving the two modalities a
single exchange point.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .fileio import atomic_write, dump_json, read_jsonl

INTERACTION_RELATION = "<int>"
INTERACTION_NODE = "<interaction>"
SELF_RELATION = "<self>"
DEFAULT_MAX_NODES = 10
NODE_INIT_STD = 0.02

_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass
class KnowledgeGraph:
    nodes: set[str] = field(default_factory=set)
    relations: set[str] = field(default_factory=set)
    triples: list[tuple[str, str, str]] = field(default_factory=list)
    names: dict[str, list[str]] = field(default_factory=dict)
    # derived lookup structures, built lazily and reused across calls
    _surfaces: dict[tuple[str, ...], str] | None = field(default=None, repr=False)
    _adjacency: dict[str, set[str]] | None = field(default=None, repr=False)
    _by_head: dict[str, list[tuple[str, str, str]]] | None = field(default=None, repr=False)

    def surface_names(self, node: str) -> list[str]:
        return self.names.get(node, [node])

    def surface_index(self) -> dict[tuple[str, ...], str]:
        if self._surfaces is None:
            self._surfaces = _surface_index(self)
        return self._surfaces

    def adjacency(self) -> dict[str, set[str]]:
        if self._adjacency is None:
            adj: dict[str, set[str]] = {}
            for head, _, tail in self.triples:
                adj.setdefault(head, set()).add(tail)
                adj.setdefault(tail, set()).add(head)
            self._adjacency = adj
        return self._adjacency

    def triples_by_head(self) -> dict[str, list[tuple[str, str, str]]]:
        if self._by_head is None:
            by_head: dict[str, list[tuple[str, str, str]]] = {}
            for triple in self.triples:
                by_head.setdefault(triple[0], []).append(triple)
            self._by_head = by_head
        return self._by_head


@dataclass(frozen=True)
class EntityMention:
    node: str
    start: int
    end: int
    source: str  # "query" or "document"


@dataclass
class QuerySubgraph:
    """Retained nodes (interaction node first) and the edges among them.

    provenance[i] is one of interaction/query-seed/doc-seed/both/bridge;
    edges are (source index, relation, target index) triples and include the
    bidirectional interaction edges.
    """

    node_ids: list[str]
    provenance: list[str]
    edges: list[tuple[int, str, int]]

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)


def load_kg(path: str | Path, lexicon_path: str | Path | None = None) -> KnowledgeGraph:
    """Load 'head<TAB>relation<TAB>tail' triples, deduplicated and canonically sorted."""
    triples: set[tuple[str, str, str]] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise ParseError(f"{path}:{lineno}: expected 'head<TAB>relation<TAB>tail'")
            head, rel, tail = (p.strip() for p in parts)
            if rel in (INTERACTION_RELATION, SELF_RELATION):
                raise ParseError(f"{path}:{lineno}: relation {rel!r} is reserved")
            if INTERACTION_NODE in (head, tail):
                raise ParseError(f"{path}:{lineno}: node id {INTERACTION_NODE!r} is reserved")
            triples.add((head, rel, tail))
    kg = KnowledgeGraph()
    kg.triples = sorted(triples)
    for head, rel, tail in kg.triples:
        kg.nodes.add(head)
        kg.nodes.add(tail)
        kg.relations.add(rel)
    if lexicon_path is not None:
        _load_lexicon(kg, lexicon_path)
    return kg


def _load_lexicon(kg: KnowledgeGraph, path: str | Path) -> None:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not all(p.strip() for p in parts):
                raise ParseError(f"{path}:{lineno}: expected 'node_id<TAB>surface name'")
            node, surface = (p.strip() for p in parts)
            kg.nodes.add(node)
            kg.names.setdefault(node, [])
            if surface not in kg.names[node]:
                kg.names[node].append(surface)


def _surface_index(kg: KnowledgeGraph) -> dict[tuple[str, ...], str]:
    """Lowercased surface token tuple -> smallest matching node id."""
    index: dict[tuple[str, ...], str] = {}
    for node in sorted(kg.nodes):
        for surface in kg.surface_names(node):
            key = tuple(_WORD_RE.findall(surface.lower()))
            if key and (key not in index or node < index[key]):
                index.setdefault(key, node)
    return index


def link_entities(text: str, kg: KnowledgeGraph,
                  source: str = "document") -> list[EntityMention]:
    """Greedy longest-match of node surface names against token n-grams (n <= 4).

    Overlaps resolve longer-span-first, then earlier start; the result is
    deterministic and mentions never overlap.
    """
    surface_index = kg.surface_index()
    tokens = [(m.group(), m.start(), m.end()) for m in _WORD_RE.finditer(text.lower())]
    candidates: list[tuple[int, int, int, str]] = []  # (-length, start, end, node)
    for i in range(len(tokens)):
        for n in range(1, min(4, len(tokens) - i) + 1):
            key = tuple(tok for tok, _, _ in tokens[i:i + n])
            node = surface_index.get(key)
            if node is not None:
                start, end = tokens[i][1], tokens[i + n - 1][2]
                candidates.append((-(end - start), start, end, node))
    candidates.sort()
    mentions: list[EntityMention] = []
    taken: list[tuple[int, int]] = []
    for _, start, end, node in candidates:
        if any(start < e and s < end for s, e in taken):
            continue
        taken.append((start, end))
        mentions.append(EntityMention(node=node, start=start, end=end, source=source))
    mentions.sort(key=lambda m: m.start)
    return mentions


def _provenance_rank(flag: str) -> int:
    return {"both": 0, "query-seed": 1, "doc-seed": 2}[flag]


def extract_subgraph(kg: KnowledgeGraph, v_q: set[str], v_d: set[str],
                     max_nodes: int = DEFAULT_MAX_NODES) -> QuerySubgraph:
    """Seeds plus all nodes on undirected length-<=2 paths between distinct seeds.

    Capping priority: seeds first (both, then query-seed, then doc-seed), then
    bridge nodes by descending count of distinct adjacent seeds; all ties break
    by node id ascending. Retained edges are every KG triple among retained
    nodes with its original direction.
    """
    if max_nodes < 1:
        raise ValidationError(f"max_nodes must be >= 1, got {max_nodes}")
    for seed in sorted((v_q | v_d) - kg.nodes):
        raise ValidationError(f"seed node not in knowledge graph: {seed!r}")

    seeds = v_q | v_d
    adjacency = kg.adjacency()

    bridge_scores: dict[str, int] = {}
    for node in adjacency:
        if node in seeds:
            continue
        adjacent_seeds = adjacency[node] & seeds
        if len(adjacent_seeds) >= 2:
            bridge_scores[node] = len(adjacent_seeds)

    def seed_flag(node: str) -> str:
        if node in v_q and node in v_d:
            return "both"
        return "query-seed" if node in v_q else "doc-seed"

    ordered = sorted(seeds, key=lambda n: (_provenance_rank(seed_flag(n)), n))
    ordered += sorted(bridge_scores, key=lambda n: (-bridge_scores[n], n))
    retained = ordered[:max_nodes]

    node_ids = [INTERACTION_NODE] + retained
    provenance = ["interaction"] + [seed_flag(n) if n in seeds else "bridge"
                                    for n in retained]
    position = {node: i for i, node in enumerate(node_ids)}

    edges: list[tuple[int, str, int]] = []
    by_head = kg.triples_by_head()
    for node in retained:
        for head, rel, tail in by_head.get(node, ()):
            if tail in position:
                edges.append((position[head], rel, position[tail]))
    edges.sort()
    for i in range(1, len(node_ids)):
        edges.append((0, INTERACTION_RELATION, i))
        edges.append((i, INTERACTION_RELATION, 0))
    return QuerySubgraph(node_ids=node_ids, provenance=provenance, edges=edges)


def subgraph_for_pair(kg: KnowledgeGraph, query_text: str, doc_text: str,
                      max_nodes: int = DEFAULT_MAX_NODES) -> QuerySubgraph:
    """Link both texts and extract their subgraph in one step."""
    v_q = {m.node for m in link_entities(query_text, kg, source="query")}
    v_d = {m.node for m in link_entities(doc_text, kg, source="document")}
    return extract_subgraph(kg, v_q, v_d, max_nodes=max_nodes)


def empty_subgraph() -> QuerySubgraph:
    """Interaction node only; used by the text-only ablation."""
    return QuerySubgraph(node_ids=[INTERACTION_NODE], provenance=["interaction"], edges=[])


def _node_key(node_id: str) -> int:
    digest = hashlib.sha256(node_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def init_node_embeddings(subgraph: QuerySubgraph, d_g: int, seed: int) -> np.ndarray:
    """Per-node N(0, 0.02^2) vectors keyed by (global node id, seed).

    The same entity receives the same vector in every subgraph. Row 0 (the
    interaction node) is zeros here; the model substitutes its learned vector.
    """
    if d_g < 1:
        raise ValidationError(f"d_g must be >= 1, got {d_g}")
    out = np.zeros((subgraph.num_nodes, d_g), dtype=np.float64)
    for i, node_id in enumerate(subgraph.node_ids):
        if i == 0:
            continue
        rng = np.random.default_rng(np.random.SeedSequence([seed, _node_key(node_id)]))
        out[i] = rng.normal(0.0, NODE_INIT_STD, size=d_g)
    return out


# ---------------------------------------------------------------------------
# Subgraph cache: JSON-lines keyed by (query id, doc id).

def save_subgraph_cache(path: str | Path,
                        cache: dict[tuple[str, str], QuerySubgraph]) -> None:
    lines = []
    for (qid, did), sub in sorted(cache.items()):
        lines.append(dump_json({
            "query_id": qid,
            "doc_id": did,
            "nodes": sub.node_ids,
            "provenance": sub.provenance,
            "edges": [[s, r, t] for s, r, t in sub.edges],
        }))
    atomic_write(path, "\n".join(lines) + ("\n" if lines else ""))


def load_subgraph_cache(path: str | Path) -> dict[tuple[str, str], QuerySubgraph]:
    cache: dict[tuple[str, str], QuerySubgraph] = {}
    for lineno, obj in read_jsonl(path):
        try:
            sub = QuerySubgraph(
                node_ids=list(obj["nodes"]),
                provenance=list(obj["provenance"]),
                edges=[(int(s), str(r), int(t)) for s, r, t in obj["edges"]],
            )
            key = (str(obj["query_id"]), str(obj["doc_id"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}:{lineno}: malformed subgraph record") from exc
        cache[key] = sub
    return cache
