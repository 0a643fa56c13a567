import itertools

import numpy as np
import pytest

from kgalign.align import compute_derived, init_model
from kgalign.config import Config
from kgalign.embed import init_space
from kgalign.infer import InferencePowerTable, compute_bounds
from kgalign.align_graph import build
from kgalign.kg import ElementPair, SynthSpec, synth_kg_pair
from kgalign.select import (
    PowerContext,
    SelectionState,
    batch_probability,
    build_power_table,
    edge_powers,
    expected_gain,
    generate_pool,
    greedy_select,
    partition_pool,
    partition_select,
    pool_recall,
    schema_signature,
)

CFG = Config(dim_entity=6, dim_class=4)


def clone_setting(seed=0, n=10, density=2.0, cfg=CFG, identical=True):
    kg1, kg2, links = synth_kg_pair(
        SynthSpec(n_entities=n, density=density, n_relations=4, n_classes=3,
                  classes_per_entity=2),
        seed=seed,
    )
    rng = np.random.default_rng(seed + 1)
    s1 = init_space(kg1, cfg, rng)
    s2 = s1.copy() if identical else init_space(kg2, cfg, rng)
    model = init_model(cfg, rng)
    if identical:
        model.a_ent[...] = np.eye(cfg.dim_entity)
        model.a_rel[...] = np.eye(cfg.dim_relation)
        model.a_cls[...] = np.eye(cfg.dim_class)
    feats = compute_derived(model, s1, s2, kg1, kg2)
    return kg1, kg2, links, s1, s2, model, feats


def pair(i, j=None, kind="entity"):
    return ElementPair(kind, i, i if j is None else j)


def random_state(seed, n_pool=10, n_batch=0, dense=0.6):
    rng = np.random.default_rng(seed)
    pool = [pair(i) for i in range(n_pool)]
    table = InferencePowerTable()
    for src in pool:
        for dst in pool:
            if src != dst and rng.random() < dense:
                table.add(src, dst, float(rng.uniform(0.05, 1.0)))
    probs = {q: float(rng.uniform(0.05, 0.95)) for q in pool}
    state = SelectionState(pool=pool, labeled=set(), probs=probs, powers=table)
    state.batch = pool[:n_batch]
    return state


class TestSchemaSignature:
    def test_single_relation_single_class(self):
        kg1, kg2, _, s1, _, model, feats = clone_setting()
        kg1.rel_triplets[:] = [(0, 0, 1), (1, 1, 0)]
        kg1.type_triplets[:] = [(0, 2)]
        kg1._out = None
        sig = schema_signature(kg1, feats, 0, side=1)
        dim_rel = feats.mean_rel1.shape[1]
        assert np.allclose(sig[:dim_rel], feats.mean_rel1[0])
        assert np.allclose(sig[dim_rel:], feats.mean_cls1[2])

    def test_no_classes_zero_half(self):
        kg1, _, _, s1, _, _, feats = clone_setting()
        kg1.type_triplets[:] = [(e, c) for e, c in kg1.type_triplets if e != 0]
        sig = schema_signature(kg1, feats, 0, side=1)
        dim_rel = feats.mean_rel1.shape[1]
        assert np.all(sig[dim_rel:] == 0.0)

    def test_formula_oracle(self):
        kg1, _, _, s1, _, _, feats = clone_setting(seed=3)
        for e in range(kg1.n_entities):
            rels = sorted({r for r, _ in kg1.out_edges(e)})
            classes = kg1.classes_of(e)
            dim_rel = feats.mean_rel1.shape[1]
            got = schema_signature(kg1, feats, e, side=1)
            if rels:
                w = feats.rel_w1[rels]
                want1 = (w[:, None] * feats.mean_rel1[rels]).sum(0) / w.sum()
                assert np.allclose(got[:dim_rel], want1, atol=1e-12)
            if classes:
                w = feats.cls_w1[classes]
                want2 = (w[:, None] * feats.mean_cls1[classes]).sum(0) / w.sum()
                assert np.allclose(got[dim_rel:], want2, atol=1e-12)


class TestGeneratePool:
    def test_saturated_top_n_includes_all_defined(self):
        kg1, kg2, _, s1, s2, model, feats = clone_setting(seed=5)
        pool = generate_pool(kg1, kg2, s1, s2, model, feats, n_neighbors=1000)
        ent_pairs = {(p.left, p.right) for p in pool if p.kind == "entity"}
        defined1 = [
            e for e in range(kg1.n_entities)
            if np.any(schema_signature(kg1, feats, e, 1) != 0.0)
        ]
        defined2 = [
            e for e in range(kg2.n_entities)
            if np.any(schema_signature(kg2, feats, e, 2) != 0.0)
        ]
        assert ent_pairs == {(i, j) for i in defined1 for j in defined2}

    def test_clone_top1_recovers_all_matches(self):
        kg1, kg2, links, s1, s2, model, feats = clone_setting(seed=7, n=20, density=2.5)
        # precondition of the check: signatures must be pairwise distinct
        sigs = [schema_signature(kg1, feats, e, 1) for e in range(kg1.n_entities)]
        for a, b in itertools.combinations(range(len(sigs)), 2):
            na, nb = np.linalg.norm(sigs[a]), np.linalg.norm(sigs[b])
            assert sigs[a] @ sigs[b] < na * nb * (1 - 1e-9)
        pool = generate_pool(kg1, kg2, s1, s2, model, feats, n_neighbors=1)
        have = {(p.left, p.right) for p in pool if p.kind == "entity"}
        assert links.entity_matches <= have

    def test_relation_and_class_pairs_always_present(self):
        kg1, kg2, _, s1, s2, model, feats = clone_setting()
        pool = generate_pool(kg1, kg2, s1, s2, model, feats, n_neighbors=2)
        rel_pairs = {(p.left, p.right) for p in pool if p.kind == "relation"}
        assert rel_pairs == {
            (r, rp) for r in kg1.base_relations() for rp in kg2.base_relations()
        }
        cls_pairs = {(p.left, p.right) for p in pool if p.kind == "class"}
        assert cls_pairs == {
            (c, cp) for c in range(kg1.n_classes) for cp in range(kg2.n_classes)
        }

    def test_recall_monotone_in_n(self):
        kg1, kg2, links, s1, s2, model, feats = clone_setting(seed=13, n=15, identical=False)
        gold = {"entity": links.entity_matches}
        last = 0.0
        for n in (1, 2, 4, 8, 16):
            pool = generate_pool(kg1, kg2, s1, s2, model, feats, n_neighbors=n)
            rec = pool_recall(
                [p for p in pool if p.kind == "entity"], gold
            )
            assert rec >= last - 1e-12
            last = rec


class TestBatchProbability:
    def test_empty_batch(self):
        assert batch_probability({}, [], set()) == 1.0

    def test_singleton(self):
        q = pair(0)
        assert batch_probability({q: 0.7}, [q], {q}) == pytest.approx(0.7)
        assert batch_probability({q: 0.7}, [q], set()) == pytest.approx(0.3)

    def test_subset_check(self):
        q, w = pair(0), pair(1)
        with pytest.raises(ValueError):
            batch_probability({q: 0.5}, [q], {w})

    @pytest.mark.parametrize("size", [1, 4, 10])
    def test_total_probability_sums_to_one(self, size):
        rng = np.random.default_rng(size)
        batch = [pair(i) for i in range(size)]
        probs = {q: float(rng.uniform(0, 1)) for q in batch}
        total = 0.0
        for bits in itertools.product([0, 1], repeat=size):
            positives = {q for q, b in zip(batch, bits) if b}
            total += batch_probability(probs, batch, positives)
        assert total == pytest.approx(1.0, abs=1e-9)


class TestExpectedGain:
    def test_empty_batch_reduction(self):
        state = random_state(seed=1, n_batch=0)
        q = state.pool[0]
        want = state.probs[q] * sum(state.powers.row(q).values())
        assert expected_gain(state, q) == pytest.approx(want, abs=1e-12)

    def test_zero_probability_gives_zero(self):
        state = random_state(seed=2, n_batch=3)
        q = state.pool[-1]
        state.probs[q] = 0.0
        assert expected_gain(state, q) == 0.0

    def enumeration_oracle(self, state, q):
        batch = state.batch
        total = 0.0
        for bits in itertools.product([0, 1], repeat=len(batch)):
            positives = [m for m, b in zip(batch, bits) if b]
            p_outcome = 1.0
            for m, b in zip(batch, bits):
                p_outcome *= state.probs[m] if b else 1.0 - state.probs[m]
            inc = 0.0
            for target, a in state.powers.row(q).items():
                covered = max((state.powers.get(m, target) for m in positives), default=0.0)
                inc += max(a - covered, 0.0)
            total += p_outcome * inc
        return state.probs[q] * total

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_subset_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        state = random_state(seed=seed + 50, n_pool=12, n_batch=int(rng.integers(1, 9)))
        for q in state.candidates()[:4]:
            assert expected_gain(state, q) == pytest.approx(
                self.enumeration_oracle(state, q), abs=1e-9
            )

    @pytest.mark.parametrize("seed", range(6))
    def test_monotone_and_submodular(self, seed):
        state_small = random_state(seed=seed + 100, n_pool=10, n_batch=2)
        state_big = SelectionState(
            pool=state_small.pool,
            labeled=set(),
            probs=state_small.probs,
            powers=state_small.powers,
        )
        state_big.batch = state_small.pool[:4]   # superset of the small batch
        for q in state_small.pool[5:]:
            g_small = expected_gain(state_small, q)
            g_big = expected_gain(state_big, q)
            assert g_small >= -1e-12
            assert g_big <= g_small + 1e-9


def realized_objective(state, batch):
    """Expected overall power of a batch, by exhaustive outcome enumeration."""
    total = 0.0
    for bits in itertools.product([0, 1], repeat=len(batch)):
        positives = [m for m, b in zip(batch, bits) if b]
        p_outcome = 1.0
        for m, b in zip(batch, bits):
            p_outcome *= state.probs[m] if b else 1.0 - state.probs[m]
        inc = 0.0
        for target in state.pool:
            inc += max(
                (state.powers.get(m, target) for m in positives), default=0.0
            )
        total += p_outcome * inc
    return total


class TestGreedy:
    def test_zero_budget(self):
        state = random_state(seed=7)
        assert greedy_select(state, 0) == []

    def test_full_pool_budget(self):
        state = random_state(seed=8, n_pool=6)
        batch = greedy_select(state, 6)
        assert sorted(batch, key=repr) == sorted(state.pool, key=repr)

    def test_budget_too_large(self):
        state = random_state(seed=9, n_pool=3)
        with pytest.raises(ValueError):
            greedy_select(state, 4)

    def test_deterministic(self):
        b1 = greedy_select(random_state(seed=10, n_pool=8), 4)
        b2 = greedy_select(random_state(seed=10, n_pool=8), 4)
        assert b1 == b2

    @pytest.mark.parametrize("seed", range(5))
    def test_approximation_ratio(self, seed):
        state = random_state(seed=seed + 200, n_pool=9)
        budget = 3
        batch = greedy_select(state, budget)
        got = realized_objective(state, batch)
        best = max(
            realized_objective(state, list(combo))
            for combo in itertools.combinations(state.pool, budget)
        )
        assert got >= (1 - 1 / np.e) * best - 1e-9


@pytest.fixture(scope="module")
def graph_setting():
    kg1, kg2, links, s1, s2, model, feats = clone_setting(seed=17, n=8, identical=False)
    pool = generate_pool(kg1, kg2, s1, s2, model, feats, n_neighbors=3)
    graph = build(kg1, kg2, pool)
    ctx = PowerContext(
        model, s1, s2, feats, kg1, kg2,
        compute_bounds(s1, kg1), compute_bounds(s2, kg2), mu=3, beam=None,
    )
    return kg1, kg2, links, pool, graph, ctx


class TestPartition:
    def test_rho_one_is_exact(self, graph_setting):
        kg1, kg2, links, pool, graph, ctx = graph_setting
        part_of = partition_pool(graph, edge_powers(ctx, graph), rho=1.0)
        assert part_of == list(range(len(graph.nodes)))

    def test_quotient_powers_never_exceed_exact(self, graph_setting):
        kg1, kg2, links, pool, graph, ctx = graph_setting
        exact = build_power_table(ctx, graph, pool, set())
        for rho in (0.5, 0.8, 0.95):
            part_of = partition_pool(graph, edge_powers(ctx, graph), rho=rho)
            hat = build_power_table(ctx, graph, pool, set(), partition_of=part_of)
            for src, row in hat.powers.items():
                for dst, p in row.items():
                    assert p <= exact.get(src, dst) + 1e-9

    def test_partition_ratio_condition_holds(self, graph_setting):
        kg1, kg2, links, pool, graph, ctx = graph_setting
        tuples = edge_powers(ctx, graph)
        rho = 0.8
        part_of = partition_pool(graph, tuples, rho=rho)
        neighbor_power = {}
        for s, d, label, p in tuples:
            neighbor_power.setdefault(s, {})
            neighbor_power[s][d] = max(neighbor_power[s].get(d, 0.0), p)
        for q, nbrs in neighbor_power.items():
            part = {n for n in range(len(graph.nodes)) if part_of[n] == part_of[q]}
            if len(part) <= 1:
                continue
            inner = sum(p for d, p in nbrs.items() if part_of[d] == part_of[q])
            outer = sum(p for d, p in nbrs.items() if part_of[d] != part_of[q])
            if inner + outer > 0:
                assert outer / (inner + outer) >= rho - 1e-12

    def test_partition_select_runs_and_respects_budget(self, graph_setting):
        kg1, kg2, links, pool, graph, ctx = graph_setting
        table = build_power_table(ctx, graph, pool, set())
        rng = np.random.default_rng(0)
        probs = {q: float(rng.uniform(0.1, 0.9)) for q in pool}
        state = SelectionState(pool=pool, labeled=set(), probs=probs, powers=table)
        batch = partition_select(state, graph, ctx, budget=4, rho=0.8)
        assert len(batch) == 4
        assert len(set(batch)) == 4
