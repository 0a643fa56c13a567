"""Experimental harness: simulated oracle, metrics, baselines, active loop.

The loop follows the standard protocol: train structure embeddings, pretrain
the alignment model on a seed share of gold matches, then rounds of select ->
oracle -> fine-tune -> evaluate until the label budget runs out. Reports are
JSON-lines (one record per round, no volatile fields, byte-reproducible under
a fixed seed) plus a plot-ready CSV.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .align import (
    AlignmentModel,
    LabeledSets,
    compute_derived,
    fine_tune,
    init_model,
    pool_match_probabilities,
    sim_vector,
    train_alignment,
)
from .align_graph import AlignmentGraph, build
from .config import Config
from .embed import init_space, train
from .infer import compute_bounds
from .kg import ElementPair, GoldLinks, KnowledgeGraph
from .select import (
    PowerContext,
    SelectionState,
    build_power_table,
    generate_pool,
    greedy_select,
    partition_select,
)

SELECTORS = ("random", "degree", "pagerank", "uncertainty", "daakg_greedy", "daakg_partition")

# Full-scale benchmark figures from the original evaluation of this method,
# kept for orientation only; desk-scale runs do not reproduce them.
REFERENCE_FULL_SCALE = {
    "dataset_stats": {
        "D-W": {"entities": (100_000, 70_000), "relations": (413, 261),
                "classes": (167, 116), "matches": 70_193},
        "D-Y": {"entities": (100_000, 70_000), "relations": (287, 32),
                "classes": (13, 9), "matches": 70_030},
        "EN-DE": {"entities": (100_000, 70_000), "relations": (381, 196),
                  "classes": (109, 76), "matches": 70_248},
        "EN-FR": {"entities": (100_000, 70_000), "relations": (400, 300),
                  "classes": (174, 121), "matches": 70_308},
    },
    "entity_h1_f1_transe_dw": (0.608, 0.692),
    "inference_accuracy_transe": {"D-W": 0.933, "D-Y": 0.948, "EN-DE": 0.977, "EN-FR": 0.965},
    "pool_recall_top1000_min": 0.806,
    "partition_rho080_speedup": 2.5,
    "partition_rho080_power_kept": 0.88,
}


class OracleSim:
    """Gold-link oracle: always answers the true label, counts every query."""

    def __init__(self, links: GoldLinks):
        self.links = links
        self.queries = 0
        self.per_kind = {"entity": 0, "relation": 0, "class": 0}

    def label(self, pair: ElementPair) -> int:
        self.queries += 1
        self.per_kind[pair.kind] += 1
        return 1 if (pair.left, pair.right) in self.links.by_kind(pair.kind) else -1


@dataclass
class KindMetrics:
    h1: float = 0.0
    h10: float = 0.0
    mrr: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    n_test: int = 0

    def as_dict(self) -> dict:
        return {
            "h1": self.h1, "h10": self.h10, "mrr": self.mrr,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "n_test": self.n_test,
        }


@dataclass
class MetricsReport:
    per_kind: dict[str, KindMetrics]
    labels_used: int = 0
    runtime_s: float = 0.0

    def as_dict(self) -> dict:
        return {kind: km.as_dict() for kind, km in sorted(self.per_kind.items())}


def _greedy_matching(S: np.ndarray, floor: float = 0.0) -> list[tuple[int, int]]:
    """One-to-one matching: sweep cells by descending similarity above floor."""
    cells = [
        (float(S[i, j]), i, j)
        for i in range(S.shape[0])
        for j in range(S.shape[1])
        if S[i, j] > floor
    ]
    cells.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_i, used_j, out = set(), set(), []
    for _, i, j in cells:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        out.append((i, j))
    return out


def _candidates(kind: str, kg: KnowledgeGraph) -> list[int]:
    if kind == "entity":
        return list(range(kg.n_entities))
    if kind == "relation":
        return kg.base_relations()
    return list(range(kg.n_classes))


def evaluate(
    model: AlignmentModel,
    s1, s2, feats,
    kg1: KnowledgeGraph,
    kg2: KnowledgeGraph,
    test_links: GoldLinks,
    sim_floor: float = 0.0,
) -> MetricsReport:
    """Ranking metrics over full candidate sets plus greedy-matching P/R/F1.

    Rankings go left to right; the F1 matching is restricted to the elements
    that appear in the test split, which keeps splits self-contained.
    """
    if all(not test_links.by_kind(k) for k in ("entity", "relation", "class")):
        raise ValueError("empty test split")
    out: dict[str, KindMetrics] = {}
    for kind in ("entity", "relation", "class"):
        gold = sorted(test_links.by_kind(kind))
        if not gold:
            out[kind] = KindMetrics()
            continue
        cands = _candidates(kind, kg2)
        pos_of = {c: i for i, c in enumerate(cands)}
        h1 = h10 = mrr = 0.0
        for l, r in gold:
            sims = sim_vector(model, s1, s2, feats, kind, l, cands)
            rank = 1 + int(np.sum(sims > sims[pos_of[r]]))
            h1 += rank <= 1
            h10 += rank <= 10
            mrr += 1.0 / rank
        n = len(gold)

        lefts = sorted({l for l, _ in gold})
        rights = sorted({r for _, r in gold})
        S = np.stack([sim_vector(model, s1, s2, feats, kind, l, rights) for l in lefts])
        pred = {
            (lefts[i], rights[j]) for i, j in _greedy_matching(S, sim_floor)
        }
        gold_set = set(gold)
        tp = len(pred & gold_set)
        precision = tp / len(pred) if pred else 0.0
        recall = tp / len(gold_set)
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out[kind] = KindMetrics(h1 / n, h10 / n, mrr / n, precision, recall, f1, n)
    return MetricsReport(out)


def inference_accuracy(
    inferred: set[ElementPair], links: GoldLinks
) -> float | None:
    """Share of inferred pairs that are gold matches; None when nothing inferred."""
    if not inferred:
        return None
    hits = sum(
        1 for p in inferred if (p.left, p.right) in links.by_kind(p.kind)
    )
    return hits / len(inferred)


# ---------------------------------------------------------------------------
# baseline selectors
# ---------------------------------------------------------------------------

def pagerank_scores(graph: AlignmentGraph, damping: float = 0.85, iterations: int = 50):
    n = len(graph.nodes)
    if n == 0:
        return np.zeros(0)
    r = np.full(n, 1.0 / n)
    out_deg = np.array([len(adj) for adj in graph.out], dtype=float)
    for _ in range(iterations):
        nxt = np.zeros(n)
        dangling = r[out_deg == 0].sum()
        for src, adj in enumerate(graph.out):
            if adj:
                share = r[src] / len(adj)
                for _, dst in adj:
                    nxt[dst] += share
        r = (1 - damping) / n + damping * (nxt + dangling / n)
    return r


def baseline_select(
    strategy: str,
    state: SelectionState,
    graph: AlignmentGraph,
    budget: int,
    rng: np.random.Generator,
) -> list[ElementPair]:
    cands = state.candidates()
    budget = min(budget, len(cands))
    if budget <= 0:
        return []
    if strategy == "random":
        idx = rng.choice(len(cands), size=budget, replace=False)
        batch = [cands[i] for i in sorted(idx)]
    elif strategy == "degree":
        batch = sorted(
            cands, key=lambda p: (-graph.degree(p), p.kind, p.left, p.right)
        )[:budget]
    elif strategy == "pagerank":
        scores = pagerank_scores(graph)
        batch = sorted(
            cands,
            key=lambda p: (
                -(scores[graph.node_index[p]] if p in graph.node_index else 0.0),
                p.kind, p.left, p.right,
            ),
        )[:budget]
    elif strategy == "uncertainty":
        def entropy(p):
            if p <= 0.0 or p >= 1.0:
                return 0.0
            return -(p * np.log(p) + (1 - p) * np.log(1 - p))

        batch = sorted(
            cands,
            key=lambda q: (-entropy(state.probs.get(q, 0.0)), q.kind, q.left, q.right),
        )[:budget]
    else:
        raise ValueError(f"unknown baseline strategy {strategy!r}")
    state.batch = list(batch)
    return batch


# ---------------------------------------------------------------------------
# the active loop
# ---------------------------------------------------------------------------

def split_gold(links: GoldLinks, cfg: Config, rng: np.random.Generator):
    """Per kind: (seed-labeled, test, open) partition of the gold matches."""
    seed_links, test_links, open_links = GoldLinks(), GoldLinks(), GoldLinks()
    for kind in ("entity", "relation", "class"):
        pairs = sorted(links.by_kind(kind))
        order = rng.permutation(len(pairs))
        n_test = int(round(cfg.test_match_fraction * len(pairs)))
        n_seed = max(1, int(round(cfg.seed_match_fraction * len(pairs)))) if pairs else 0
        n_seed = min(n_seed, len(pairs) - n_test)
        test_idx = set(order[:n_test].tolist())
        seed_idx = set(order[n_test : n_test + n_seed].tolist())
        for i, pair in enumerate(pairs):
            target = (
                test_links if i in test_idx else seed_links if i in seed_idx else open_links
            )
            target.by_kind(kind).add(pair)
    return seed_links, test_links, open_links


@dataclass
class LoopState:
    """Everything a running active-alignment session carries between rounds."""

    cfg: Config
    kg1: KnowledgeGraph
    kg2: KnowledgeGraph
    links: GoldLinks
    s1: object = None
    s2: object = None
    model: AlignmentModel | None = None
    feats: object = None
    labeled: LabeledSets = field(default_factory=LabeledSets)
    pool: list[ElementPair] = field(default_factory=list)
    test_links: GoldLinks = field(default_factory=GoldLinks)
    round: int = 0
    labels_used: int = 0
    records: list[dict] = field(default_factory=list)
    selection_seconds: list[float] = field(default_factory=list)


def prepare_loop(kg1, kg2, links, cfg: Config) -> LoopState:
    """Train embeddings, pretrain alignment on the seed split, build the pool."""
    state = LoopState(cfg=cfg, kg1=kg1, kg2=kg2, links=links)
    rng = np.random.default_rng([cfg.seed, 1])
    seed_links, test_links, _ = split_gold(links, cfg, rng)
    state.test_links = test_links

    state.s1 = init_space(kg1, cfg, np.random.default_rng([cfg.seed, 2]))
    state.s2 = init_space(kg2, cfg, np.random.default_rng([cfg.seed, 3]))
    train(state.s1, kg1, cfg, seed=cfg.seed * 7 + 1)
    train(state.s2, kg2, cfg, seed=cfg.seed * 7 + 2)

    state.model = init_model(cfg, np.random.default_rng([cfg.seed, 4]))
    for kind in ("entity", "relation", "class"):
        for l, r in sorted(seed_links.by_kind(kind)):
            state.labeled.add(ElementPair(kind, l, r), 1)
    state.feats = train_alignment(
        state.model, state.s1, state.s2, kg1, kg2, state.labeled, cfg,
        seed=cfg.seed * 7 + 3, epochs=cfg.align_epochs, focal=False,
    )
    pool = generate_pool(kg1, kg2, state.s1, state.s2, state.model, state.feats, cfg.pool_top_n)
    test_keys = {
        (kind, l, r)
        for kind in ("entity", "relation", "class")
        for l, r in test_links.by_kind(kind)
    }
    state.pool = [p for p in pool if (p.kind, p.left, p.right) not in test_keys]
    entity_pool = [(p.left, p.right) for p in state.pool if p.kind == "entity"]
    state.feats = train_alignment(
        state.model, state.s1, state.s2, kg1, kg2, state.labeled, cfg,
        seed=cfg.seed * 7 + 4, epochs=max(cfg.align_epochs // 2, 1), focal=False,
        entity_pool=entity_pool,
    )
    return state


def select_batch(state: LoopState, batch_size: int) -> list[ElementPair]:
    """Pick one batch with the configured selector; timing is recorded."""
    cfg = state.cfg
    labeled_pairs = {
        ElementPair(kind, l, r)
        for kind in ("entity", "relation", "class")
        for l, r in state.labeled.labeled_keys(kind)
    }
    candidates = [p for p in state.pool if p not in labeled_pairs]
    if not candidates or batch_size <= 0:
        return []
    batch_size = min(batch_size, len(candidates))
    probs = pool_match_probabilities(state.model, state.s1, state.s2, state.feats, candidates)
    graph = build(state.kg1, state.kg2, state.pool)
    sel = SelectionState(
        pool=candidates, labeled=set(), probs=probs,
        powers=None, budget=batch_size,
    )
    started = time.perf_counter()
    if cfg.selector in ("daakg_greedy", "daakg_partition"):
        ctx = PowerContext(
            state.model, state.s1, state.s2, state.feats, state.kg1, state.kg2,
            compute_bounds(state.s1, state.kg1, cfg.bound_samples),
            compute_bounds(state.s2, state.kg2, cfg.bound_samples),
            mu=cfg.mu, beam=cfg.beam_width,
        )
        known = set(state.labeled.matches["entity"])
        if cfg.selector == "daakg_greedy":
            sel.powers = build_power_table(ctx, graph, candidates, known)
            batch = greedy_select(sel, batch_size)
        else:
            sel.powers = None
            batch = partition_select(sel, graph, ctx, batch_size, cfg.rho, known)
    else:
        rng = np.random.default_rng([cfg.seed, 5, state.round])
        batch = baseline_select(cfg.selector, sel, graph, batch_size, rng)
    state.selection_seconds.append(time.perf_counter() - started)
    return batch


def run_round(state: LoopState, oracle: OracleSim, batch: list[ElementPair]) -> None:
    """Label a batch, fine-tune on it, refresh features."""
    cfg = state.cfg
    new_labels = [(pair, oracle.label(pair)) for pair in batch]
    state.labels_used += len(new_labels)
    entity_pool = [(p.left, p.right) for p in state.pool if p.kind == "entity"]
    state.feats = fine_tune(
        state.model, state.s1, state.s2, state.kg1, state.kg2, state.labeled,
        new_labels, cfg, seed=cfg.seed * 7 + 10 + state.round, entity_pool=entity_pool,
    )
    state.round += 1


def record_metrics(state: LoopState) -> dict:
    report = evaluate(
        state.model, state.s1, state.s2, state.feats,
        state.kg1, state.kg2, state.test_links,
    )
    total_matches = sum(
        len(state.links.by_kind(k)) for k in ("entity", "relation", "class")
    )
    labeled_matches = sum(
        len(state.labeled.matches[k]) for k in ("entity", "relation", "class")
    )
    record = {
        "selector": state.cfg.selector,
        "round": state.round,
        "labels_used": state.labels_used,
        "labeled_match_fraction": labeled_matches / total_matches if total_matches else 0.0,
        "metrics": report.as_dict(),
    }
    state.records.append(record)
    return record


def active_loop(
    kg1: KnowledgeGraph,
    kg2: KnowledgeGraph,
    links: GoldLinks,
    cfg: Config,
    out_dir: str | Path | None = None,
) -> list[dict]:
    """Full simulated loop; returns (and optionally writes) per-round records."""
    if cfg.selector not in SELECTORS:
        raise ValueError(f"unknown selector {cfg.selector!r}; pick one of {SELECTORS}")
    state = prepare_loop(kg1, kg2, links, cfg)
    oracle = OracleSim(links)
    record_metrics(state)
    total_budget = cfg.total_budget if cfg.total_budget >= 0 else cfg.rounds * cfg.budget
    while state.labels_used < total_budget and state.round < cfg.rounds:
        batch = select_batch(state, min(cfg.budget, total_budget - state.labels_used))
        if not batch:
            break
        run_round(state, oracle, batch)
        record_metrics(state)
    if out_dir is not None:
        write_reports(state.records, out_dir)
    return state.records


def write_reports(records: list[dict], out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(rec, sort_keys=True) for rec in records]
    (out / "rounds.jsonl").write_text("\n".join(lines) + "\n")
    rows = ["selector,round,labels_used,labeled_match_fraction,kind,h1,h10,mrr,precision,recall,f1"]
    for rec in records:
        for kind, m in sorted(rec["metrics"].items()):
            rows.append(
                f"{rec['selector']},{rec['round']},{rec['labels_used']},"
                f"{rec['labeled_match_fraction']:.6f},{kind},"
                f"{m['h1']:.6f},{m['h10']:.6f},{m['mrr']:.6f},"
                f"{m['precision']:.6f},{m['recall']:.6f},{m['f1']:.6f}"
            )
    (out / "curves.csv").write_text("\n".join(rows) + "\n")
