"""Candidate pool generation and batch selection.

The pool couples each entity with its mutual top-N schema-signature
neighbors and keeps all relation/class pairs. Batch selection maximizes the
expected overall inference power of the labeled-match outcome; the gain of a
candidate has a closed polynomial form, greedy selection enjoys the usual
(1 - 1/e) submodular guarantee, and the partitioning variant trades a rho^mu
factor of it for speed by restricting path search to quotient-level hops.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .align import AlignmentModel, DerivedFeatures, lift_relation
from .align_graph import TYPE_INV_LABEL, TYPE_LABEL, AlignmentGraph
from .embed import EmbeddingSpace
from .infer import (
    InferencePowerTable,
    PathSearch,
    infer_pair_to_class,
    infer_pair_to_relation,
    infer_relation_to_pair,
)
from .kg import ElementPair, KnowledgeGraph


# ---------------------------------------------------------------------------
# schema signatures and pool generation
# ---------------------------------------------------------------------------

def schema_signature(
    kg: KnowledgeGraph,
    feats: DerivedFeatures,
    ent: int,
    side: int,
) -> np.ndarray:
    """Weighted mean of mean-relation embeddings (outgoing relations) joined
    with the weighted mean of mean-class embeddings (the entity's classes).

    Either half is the zero vector when the entity lacks that structure.
    """
    if side == 1:
        mean_rel, mean_cls = feats.mean_rel1, feats.mean_cls1
        rel_w, cls_w = feats.rel_w1, feats.cls_w1
    else:
        mean_rel, mean_cls = feats.mean_rel2, feats.mean_cls2
        rel_w, cls_w = feats.rel_w2, feats.cls_w2
    rels = sorted({r for r, _ in kg.out_edges(ent)})
    half1 = np.zeros(mean_rel.shape[1])
    if rels:
        w = rel_w[rels]
        den = w.sum()
        if abs(den) > 1e-9:
            half1 = (w[:, None] * mean_rel[rels]).sum(0) / den
    classes = kg.classes_of(ent)
    half2 = np.zeros(mean_cls.shape[1])
    if classes:
        w = cls_w[classes]
        den = w.sum()
        if abs(den) > 1e-9:
            half2 = (w[:, None] * mean_cls[classes]).sum(0) / den
    return np.concatenate([half1, half2])


def _comparison_matrix(kg, space, feats, model, side):
    """Signatures lifted to entity space; the left side is pre-mapped by A_ent
    so cosines compare across the two embedding spaces."""
    sigs = []
    defined = []
    dim_rel = feats.mean_rel1.shape[1] if side == 1 else feats.mean_rel2.shape[1]
    for e in range(kg.n_entities):
        sig = schema_signature(kg, feats, e, side)
        rel_half, cls_half = sig[:dim_rel], sig[dim_rel:]
        defined.append(bool(np.any(sig != 0.0)))
        rel_lift = lift_relation(space, rel_half)
        if side == 1:
            rel_lift = model.a_ent @ rel_lift
            cls_half = model.a_ent @ cls_half
        sigs.append(np.concatenate([rel_lift, cls_half]))
    return np.array(sigs), np.array(defined)


def generate_pool(
    kg1: KnowledgeGraph,
    kg2: KnowledgeGraph,
    s1: EmbeddingSpace,
    s2: EmbeddingSpace,
    model: AlignmentModel,
    feats: DerivedFeatures,
    n_neighbors: int,
) -> list[ElementPair]:
    """Mutual top-N entity pairs by signature cosine, plus all base-relation
    and class pairs (synthetic inverses stay out)."""
    if n_neighbors < 1:
        raise ValueError("n_neighbors must be at least 1")
    feats.require_fresh()
    pool: list[ElementPair] = [
        ElementPair("relation", r, rp)
        for r in kg1.base_relations()
        for rp in kg2.base_relations()
    ]
    pool += [
        ElementPair("class", c, cp)
        for c in range(kg1.n_classes)
        for cp in range(kg2.n_classes)
    ]
    if kg1.n_entities and kg2.n_entities:
        m1, def1 = _comparison_matrix(kg1, s1, feats, model, 1)
        m2, def2 = _comparison_matrix(kg2, s2, feats, model, 2)
        n1 = np.maximum(np.linalg.norm(m1, axis=1, keepdims=True), 1e-12)
        n2 = np.maximum(np.linalg.norm(m2, axis=1, keepdims=True), 1e-12)
        S = (m1 / n1) @ (m2 / n2).T
        S[~def1, :] = -np.inf
        S[:, ~def2] = -np.inf

        def top_n(scores, n):
            order = np.lexsort((np.arange(scores.shape[-1]), -scores))
            return order[:n]

        n = n_neighbors
        top_right = [set(top_n(S[i], n)) if def1[i] else set() for i in range(len(m1))]
        top_left = [set(top_n(S[:, j], n)) if def2[j] else set() for j in range(len(m2))]
        for i in range(len(m1)):
            for j in sorted(top_right[i]):
                if i in top_left[j] and np.isfinite(S[i, j]):
                    pool.append(ElementPair("entity", i, int(j)))
    return sorted(set(pool), key=lambda p: (p.kind, p.left, p.right))


def pool_recall(pool: list[ElementPair], gold_pairs_by_kind: dict[str, set]) -> float:
    """Fraction of gold matches present in the pool."""
    total = sum(len(v) for v in gold_pairs_by_kind.values())
    if total == 0:
        return 1.0
    have = {(p.kind, p.left, p.right) for p in pool}
    hit = sum(
        1
        for kind, pairs in gold_pairs_by_kind.items()
        for l, r in pairs
        if (kind, l, r) in have
    )
    return hit / total


# ---------------------------------------------------------------------------
# selection state and the gain
# ---------------------------------------------------------------------------

@dataclass
class SelectionState:
    pool: list[ElementPair]
    labeled: set[ElementPair]
    probs: dict[ElementPair, float]
    powers: InferencePowerTable
    budget: int = 0
    batch: list[ElementPair] = field(default_factory=list)
    partition_of: dict[ElementPair, int] | None = None

    def candidates(self) -> list[ElementPair]:
        used = self.labeled | set(self.batch)
        return [q for q in self.pool if q not in used]


def batch_probability(
    probs: dict[ElementPair, float],
    batch: list[ElementPair],
    positives: set[ElementPair],
) -> float:
    """Probability that exactly `positives` of the batch are true matches."""
    if not positives <= set(batch):
        raise ValueError("positives must be a subset of the batch")
    out = 1.0
    for q in batch:
        p = probs[q]
        out *= p if q in positives else (1.0 - p)
    return out


def _expected_clipped_drop(a: float, member_stats: list[tuple[float, float]]) -> float:
    """E over batch outcomes of |a - max_{selected matches} a_i|_+ .

    member_stats holds (power to the target, match probability) per batch
    member, any order. Decomposes by the best already-covered power.
    """
    stats = sorted(member_stats, key=lambda t: -t[0])
    out = 0.0
    none_better = 1.0
    for a_k, p_k in stats:
        if a_k < a:
            out += none_better * p_k * (a - a_k)
        none_better *= 1.0 - p_k
    out += none_better * a
    return out


def expected_gain(state: SelectionState, q: ElementPair) -> float:
    """Expected increase of the overall-power objective from adding q."""
    if q in state.batch:
        raise ValueError("candidate already in the batch")
    p_q = state.probs.get(q, 0.0)
    if p_q <= 0.0:
        return 0.0
    members = [(m, state.probs.get(m, 0.0)) for m in state.batch]
    total = 0.0
    for target, a in state.powers.row(q).items():
        stats = [(state.powers.get(m, target), p_m) for m, p_m in members]
        total += _expected_clipped_drop(a, stats)
    return p_q * total


def greedy_select(state: SelectionState, budget: int) -> list[ElementPair]:
    """Lazy greedy argmax-gain selection; ties break on the smaller pair id."""
    if budget > len(state.candidates()):
        raise ValueError("budget exceeds the unlabeled pool")
    heap = []
    for q in state.candidates():
        gain = expected_gain(state, q)
        heapq.heappush(heap, (-gain, (q.kind, q.left, q.right), q, len(state.batch)))
    while len(state.batch) < budget and heap:
        neg_gain, key, q, at = heapq.heappop(heap)
        if at == len(state.batch):
            state.batch.append(q)
        else:
            gain = expected_gain(state, q)
            heapq.heappush(heap, (-gain, key, q, len(state.batch)))
    return list(state.batch)


# ---------------------------------------------------------------------------
# power table construction
# ---------------------------------------------------------------------------

@dataclass
class PowerContext:
    """Everything the power calculus needs, bundled for table builders."""

    model: AlignmentModel
    s1: EmbeddingSpace
    s2: EmbeddingSpace
    feats: DerivedFeatures
    kg1: KnowledgeGraph
    kg2: KnowledgeGraph
    bounds1: dict
    bounds2: dict
    mu: int = 5
    beam: int | None = 64


def edge_powers(ctx: PowerContext, graph: AlignmentGraph):
    """One-hop power of every graph edge: (src, dst, label, power) tuples.

    Relation-pair edges use the bounded path difference; type edges use the
    gradient power onto the class pair; reverse type edges carry none.
    """
    out = []
    from .infer import _diff_map  # local import to keep module surfaces tidy

    for src, label, dst in graph.edges:
        if src == dst:
            continue
        sp, dp = graph.nodes[src], graph.nodes[dst]
        if label == TYPE_LABEL:
            p = infer_pair_to_class(
                ctx.model, ctx.s1, ctx.s2, ctx.feats, ctx.kg1, ctx.kg2,
                (sp.left, sp.right), (dp.left, dp.right),
            )
            if p > 0:
                out.append((src, dst, label, p))
            continue
        if label == TYPE_INV_LABEL:
            continue
        b1 = ctx.bounds1[(sp.left, label[0])]
        b2 = ctx.bounds2[(sp.right, label[1])]
        M = _diff_map(ctx.model, b1.r_tilde.shape[0])
        d = float(np.linalg.norm(M @ b1.r_tilde - b2.r_tilde)) + b1.d + b2.d
        out.append((src, dst, label, 1.0 / (1.0 + d)))
    return out


def build_power_table(
    ctx: PowerContext,
    graph: AlignmentGraph,
    pool: list[ElementPair],
    known_matches: set[tuple[int, int]],
    partition_of: list[int] | None = None,
) -> InferencePowerTable:
    """Powers from every pool pair to every inferable pool target.

    Entity-pair sources get path powers to entity pairs and gradient powers
    to schema pairs; relation-pair sources get their single-edge powers from
    currently known entity matches. With partition_of set, path search only
    hops into unvisited partitions (the quotient estimate).
    """
    table = InferencePowerTable()
    pool_set = set(pool)
    search = PathSearch(
        graph, ctx.bounds1, ctx.bounds2, ctx.model, ctx.mu, ctx.beam, partition_of
    )
    for src in pool:
        if src.kind != "entity" or src not in graph.node_index:
            continue
        src_idx = graph.node_index[src]
        for dst_idx, power in search.powers_from(src_idx).items():
            dst = graph.nodes[dst_idx]
            if dst in pool_set:
                table.add(src, dst, power)
        seen_labels = set()
        for label, dst_idx in graph.out[src_idx]:
            dst = graph.nodes[dst_idx]
            if label == TYPE_LABEL and dst in pool_set:
                p = infer_pair_to_class(
                    ctx.model, ctx.s1, ctx.s2, ctx.feats, ctx.kg1, ctx.kg2,
                    (src.left, src.right), (dst.left, dst.right),
                )
                table.add(src, dst, p)
            elif label[0] >= 0 and label not in seen_labels:
                seen_labels.add(label)
                rel_target = ElementPair("relation", label[0], label[1])
                if rel_target in pool_set:
                    p = infer_pair_to_relation(
                        ctx.model, ctx.s1, ctx.s2, ctx.feats, ctx.kg1, ctx.kg2,
                        graph, (src.left, src.right), label,
                    )
                    table.add(src, rel_target, p)
    targets_by_label: dict[tuple[int, int], set[int]] = {}
    for _, edge_label, edge_dst in graph.edges:
        targets_by_label.setdefault(edge_label, set()).add(edge_dst)
    for src in pool:
        if src.kind != "relation":
            continue
        label = (src.left, src.right)
        for edge_dst in sorted(targets_by_label.get(label, ())):
            dst = graph.nodes[edge_dst]
            if dst not in pool_set:
                continue
            p = infer_relation_to_pair(
                graph, ctx.bounds1, ctx.bounds2, ctx.model, label, dst, known_matches
            )
            table.add(src, dst, p)
    return table


# ---------------------------------------------------------------------------
# graph partitioning (quotient-estimate selection)
# ---------------------------------------------------------------------------

def partition_pool(
    graph: AlignmentGraph,
    edge_tuples: list[tuple[int, int, tuple[int, int], float]],
    rho: float,
) -> list[int]:
    """Split partitions until every member keeps a >= rho fraction of its
    one-hop power outside its own partition. Returns node -> partition id."""
    n = len(graph.nodes)
    if rho >= 1.0:
        return list(range(n))   # degenerate case: exact search, greedy-equivalent
    neighbor_power: list[dict[int, float]] = [dict() for _ in range(n)]
    for s, d, label, p in edge_tuples:
        if p > neighbor_power[s].get(d, 0.0):
            neighbor_power[s][d] = p
    partitions: list[set[int]] = [set(range(n))]
    part_of = [0] * n

    def ratio(q: int) -> float:
        inner = outer = 0.0
        for d, p in neighbor_power[q].items():
            if part_of[d] == part_of[q]:
                inner += p
            else:
                outer += p
        if inner + outer == 0.0:
            return 1.0
        return outer / (inner + outer)

    for _ in range(n):   # each split strictly shrinks a partition
        split_done = False
        for i, part in enumerate(partitions):
            if len(part) <= 1:
                continue
            worst_q, worst = None, np.inf
            for q in sorted(part):
                rq = ratio(q)
                if rq < worst:
                    worst_q, worst = q, rq
            if worst >= rho:
                continue
            label_power: dict[tuple[int, int], float] = {}
            for s, d, label, p in edge_tuples:
                if part_of[s] == i and part_of[d] == i and s in part and d in part:
                    label_power[label] = label_power.get(label, 0.0) + p
            movers: set[int] = set()
            if label_power:
                best_label = max(sorted(label_power), key=lambda l: label_power[l])
                movers = {
                    s for s, d, label, p in edge_tuples
                    if label == best_label and s in part
                }
            if not movers or movers == part:
                movers = {worst_q}   # guaranteed progress when the rule stalls
            new_id = len(partitions)
            partitions.append(movers)
            part -= movers
            for q in movers:
                part_of[q] = new_id
            split_done = True
            break
        if not split_done:
            break
    return part_of


def partition_select(
    state: SelectionState,
    graph: AlignmentGraph,
    ctx: PowerContext,
    budget: int,
    rho: float,
    known_matches: set[tuple[int, int]] | None = None,
) -> list[ElementPair]:
    """Quotient-estimate batch selection with the rho^mu (1 - 1/e) guarantee."""
    if not (0.0 < rho <= 1.0):
        raise ValueError("rho must lie in (0,1]")
    tuples = edge_powers(ctx, graph)
    part_of = partition_pool(graph, tuples, rho)
    table_hat = build_power_table(
        ctx, graph, state.pool, known_matches or set(), partition_of=part_of
    )
    state.partition_of = {graph.nodes[i]: part_of[i] for i in range(len(graph.nodes))}
    inner = SelectionState(
        pool=state.pool,
        labeled=state.labeled,
        probs=state.probs,
        powers=table_hat,
        budget=budget,
    )
    batch = greedy_select(inner, budget)
    state.batch = list(batch)
    return batch
