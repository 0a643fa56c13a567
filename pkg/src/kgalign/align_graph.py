"""Pool-restricted product graph over element pairs.

Nodes are the pool's element pairs; an edge (q, (r, r'), q'') exists iff the
two underlying triplets exist in their KGs and all three pairs sit in the
pool. Type rows connect entity pairs to class pairs under a reserved label,
and inverse relations give every edge a reverse twin, so traversal is
effectively bidirectional.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .kg import ElementPair, KnowledgeGraph

TYPE_LABEL = (-1, -1)       # entity pair -> class pair via (type, type)
TYPE_INV_LABEL = (-2, -2)   # class pair -> entity pair (reverse twin)


@dataclass
class AlignmentGraph:
    nodes: list[ElementPair]
    node_index: dict[ElementPair, int]
    edges: list[tuple[int, tuple[int, int], int]]   # (src idx, label, dst idx)
    out: list[list[tuple[tuple[int, int], int]]]    # adjacency: node -> [(label, dst)]

    def __len__(self) -> int:
        return len(self.nodes)

    def neighbors(self, pair: ElementPair) -> list[tuple[tuple[int, int], ElementPair]]:
        """Outgoing (relation-pair label, target pair) adjacency of one node."""
        if pair not in self.node_index:
            raise KeyError(f"{pair} is not a node of this graph")
        return [(label, self.nodes[dst]) for label, dst in self.out[self.node_index[pair]]]

    def degree(self, pair: ElementPair) -> int:
        idx = self.node_index.get(pair)
        return len(self.out[idx]) if idx is not None else 0


def build(
    kg1: KnowledgeGraph,
    kg2: KnowledgeGraph,
    pool: list[ElementPair],
    rel_pair_scores: dict[tuple[int, int], float] | None = None,
    floor: float = 0.0,
) -> AlignmentGraph:
    """Exact product construction restricted by the pool.

    Relation pairs in the pool implicitly admit their inverse twins, which is
    what makes paths traversable against edge direction. Optional pruning
    drops edges whose relation-pair similarity falls below `floor`; it is off
    unless scores are supplied.
    """
    nodes = sorted(set(pool), key=lambda p: (p.kind, p.left, p.right))
    node_index = {p: i for i, p in enumerate(nodes)}
    ent_pairs = {(p.left, p.right): i for p, i in node_index.items() if p.kind == "entity"}
    cls_pairs = {(p.left, p.right): i for p, i in node_index.items() if p.kind == "class"}
    rel_pairs = {(p.left, p.right) for p in nodes if p.kind == "relation"}
    rel_pairs |= {(kg1.inverse(r), kg2.inverse(rp)) for r, rp in rel_pairs}
    if rel_pair_scores is not None:
        rel_pairs = {
            pair for pair in rel_pairs
            if rel_pair_scores.get(pair, rel_pair_scores.get(
                (kg1.inverse(pair[0]), kg2.inverse(pair[1])), 0.0)) >= floor
        }

    rights_of: dict[int, list[int]] = {}
    for l, r in ent_pairs:
        rights_of.setdefault(l, []).append(r)

    edges: list[tuple[int, tuple[int, int], int]] = []
    for x, r, x2 in kg1.rel_triplets:
        for xp in rights_of.get(x, ()):
            src = ent_pairs[(x, xp)]
            for rp, x3 in kg2.out_edges(xp):
                if (r, rp) in rel_pairs and (x2, x3) in ent_pairs:
                    edges.append((src, (r, rp), ent_pairs[(x2, x3)]))

    cls2_of: dict[int, list[int]] = {}
    for e, c in kg2.type_triplets:
        cls2_of.setdefault(e, []).append(c)
    for e, c in kg1.type_triplets:
        for ep in rights_of.get(e, ()):
            src = ent_pairs[(e, ep)]
            for cp in cls2_of.get(ep, ()):
                dst = cls_pairs.get((c, cp))
                if dst is not None:
                    edges.append((src, TYPE_LABEL, dst))
                    edges.append((dst, TYPE_INV_LABEL, src))

    edges = sorted(set(edges))
    out: list[list[tuple[tuple[int, int], int]]] = [[] for _ in nodes]
    for src, label, dst in edges:
        out[src].append((label, dst))
    return AlignmentGraph(nodes, node_index, edges, out)
