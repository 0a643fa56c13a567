import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kgalign.align import (
    AlignmentModel,
    DerivedFeatures,
    LabeledSets,
    alignment_loss,
    compute_derived,
    directional_probabilities,
    entity_similarity_matrix,
    fine_tune,
    init_model,
    lift_relation,
    match_probability,
    mean_class_embedding,
    mean_relation_embedding,
    pool_match_probabilities,
    semi_loss,
    semi_supervised_mine,
    sim,
    sim_vector,
    train_alignment,
)
from kgalign.config import Config
from kgalign.embed import init_space, score_er
from kgalign.kg import ElementPair, SynthSpec, synth_kg_pair

from oracles import cosine, fd_max_rel_err

CFG = Config(dim_entity=8, dim_class=4, negatives_per_pos=2, align_lr=0.1, grad_clip=0.0)


def make_pair(seed=0, n=12, model_kind="transe", cfg=CFG):
    kg1, kg2, links = synth_kg_pair(
        SynthSpec(n_entities=n, density=2.0, n_relations=3, n_classes=2), seed=seed
    )
    rng = np.random.default_rng(seed + 100)
    cfg = cfg.replace(model_kind=model_kind)
    s1 = init_space(kg1, cfg, rng)
    s2 = init_space(kg2, cfg, rng)
    model = init_model(cfg, rng)
    feats = compute_derived(model, s1, s2, kg1, kg2)
    return kg1, kg2, links, s1, s2, model, feats


def densify(grads, model, s1, s2):
    arrays = align_arrays(model, s1, s2)
    dense = {k: np.zeros_like(v) for k, v in arrays.items()}
    for key, g in grads.items():
        if isinstance(key, tuple):
            path, idx = key
            dense[path][idx] += g
        else:
            dense[key] += g
    return dense


def align_arrays(model, s1, s2):
    return {
        "model.a_ent": model.a_ent,
        "model.a_rel": model.a_rel,
        "model.a_cls": model.a_cls,
        "s1.ent": s1.ent,
        "s1.rel": s1.rel,
        "s1.cls_b": s1.cls_b,
        "s2.ent": s2.ent,
        "s2.rel": s2.rel,
        "s2.cls_b": s2.cls_b,
    }


class TestSim:
    def test_identity_self_cosine(self):
        kg1, kg2, _, s1, s2, model, feats = make_pair()
        model.a_ent[...] = np.eye(s1.dim_entity)
        s2.ent[0] = s1.ent[0]
        assert sim(model, s1, s2, feats, ElementPair("entity", 0, 0)) == pytest.approx(1.0)

    def test_antipodal(self):
        kg1, kg2, _, s1, s2, model, feats = make_pair()
        s2.ent[1] = -(model.a_ent @ s1.ent[2])
        assert sim(model, s1, s2, feats, ElementPair("entity", 2, 1)) == pytest.approx(-1.0)

    def test_relation_max_rule(self):
        _, _, _, s1, s2, model, feats = make_pair()
        model.a_rel[...] = np.eye(s1.rel.shape[1])
        model.a_ent[...] = np.eye(s1.dim_entity)
        a1, a2 = np.arccos(0.3), np.arccos(0.8)
        s1.rel[0] = 0.0
        s1.rel[0][:2] = (1.0, 0.0)
        s2.rel[0] = 0.0
        s2.rel[0][:2] = (np.cos(a1), np.sin(a1))
        feats.mean_rel1[0] = 0.0
        feats.mean_rel1[0][:2] = (1.0, 0.0)
        feats.mean_rel2[0] = 0.0
        feats.mean_rel2[0][:2] = (np.cos(a2), np.sin(a2))
        got = sim(model, s1, s2, feats, ElementPair("relation", 0, 0))
        assert got == pytest.approx(0.8)

    def test_zero_norm_defined_as_zero(self):
        _, _, _, s1, s2, model, feats = make_pair()
        s1.ent[3] = 0.0
        assert sim(model, s1, s2, feats, ElementPair("entity", 3, 0)) == 0.0

    @given(seed=st.integers(0, 500))
    @settings(max_examples=15, deadline=None)
    def test_bounded(self, seed):
        _, _, _, s1, s2, model, feats = make_pair(seed=seed)
        rng = np.random.default_rng(seed)
        for kind, n1, n2 in (
            ("entity", s1.ent.shape[0], s2.ent.shape[0]),
            ("relation", s1.rel.shape[0], s2.rel.shape[0]),
            ("class", s1.cls_b.shape[0], s2.cls_b.shape[0]),
        ):
            pair = ElementPair(kind, int(rng.integers(n1)), int(rng.integers(n2)))
            v = sim(model, s1, s2, model and feats, pair)
            assert -1.0 - 1e-9 <= v <= 1.0 + 1e-9


class TestMeanEmbeddings:
    def test_single_triplet_transe(self):
        kg1, _, _, s1, _, _, feats = make_pair()
        h, r, t = kg1.rel_triplets[0]
        w = np.full(kg1.n_entities, 0.37)
        got, flag = mean_relation_embedding(s1, kg1, r, w)
        only = [tr for tr in kg1.rel_triplets if tr[1] == r]
        if len(only) == 1:
            assert not flag
            assert np.allclose(got, s1.ent[t] - s1.ent[h])

    def test_uniform_weights_are_plain_mean(self):
        kg1, _, _, s1, _, _, _ = make_pair(seed=3)
        w = np.full(kg1.n_entities, 0.5)
        rel = kg1.rel_triplets[0][1]
        got, flag = mean_relation_embedding(s1, kg1, rel, w)
        deltas = [s1.ent[t] - s1.ent[h] for h, r, t in kg1.rel_triplets if r == rel]
        assert not flag
        assert np.allclose(got, np.mean(deltas, axis=0))

    def test_matches_numeric_minimization_oracle(self):
        kg1, _, _, s1, _, _, _ = make_pair(seed=5)
        rng = np.random.default_rng(8)
        w = rng.uniform(0.2, 0.9, size=kg1.n_entities)
        rel = kg1.rel_triplets[0][1]
        rows = [(h, t) for h, r, t in kg1.rel_triplets if r == rel]

        def gd_argmin(h, t):
            # numeric descent on the squared triplet score; no closed form used
            r = np.zeros(s1.rel.shape[1])
            for _ in range(200):
                g = np.zeros_like(r)
                for i in range(r.size):
                    eps = 1e-4
                    r[i] += eps
                    up = score_er_with(s1, h, r, t) ** 2
                    r[i] -= 2 * eps
                    dn = score_er_with(s1, h, r, t) ** 2
                    r[i] += eps
                    g[i] = (up - dn) / (2 * eps)
                r -= 0.4 * g
            return r

        def score_er_with(space, h, r_vec, t):
            saved = space.rel[0].copy()
            space.rel[0] = r_vec
            try:
                return score_er(space, h, 0, t)
            finally:
                space.rel[0] = saved

        num = sum(min(w[h], w[t]) * gd_argmin(h, t) for h, t in rows)
        den = sum(min(w[h], w[t]) for h, t in rows)
        want = num / den
        got, _ = mean_relation_embedding(s1, kg1, rel, w)
        assert np.allclose(got, want, atol=1e-6)

    def test_class_single_member(self):
        kg1, _, _, s1, _, _, _ = make_pair()
        members = {}
        for e, c in kg1.type_triplets:
            members.setdefault(c, []).append(e)
        single = [c for c, es in members.items() if len(set(es)) == 1]
        w = np.full(kg1.n_entities, 0.4)
        if single:
            c = single[0]
            got, flag = mean_class_embedding(s1, kg1, c, w)
            assert not flag
            assert np.allclose(got, s1.ent[members[c][0]])

    def test_class_weighted_average(self):
        kg1, _, _, s1, _, _, _ = make_pair()
        kg1.type_triplets[:] = [(0, 0), (1, 0)]
        s1.ent[0, :] = 0.0
        s1.ent[0, 0] = 1.0
        s1.ent[1, :] = 0.0
        s1.ent[1, 1] = 1.0
        w = np.zeros(kg1.n_entities)
        w[0], w[1] = 0.9, 0.1
        got, _ = mean_class_embedding(s1, kg1, 0, w)
        want = np.zeros(s1.dim_entity)
        want[0], want[1] = 0.9, 0.1
        assert np.allclose(got, want)
        mid, _ = mean_class_embedding(s1, kg1, 0, np.full(kg1.n_entities, 0.5))
        assert np.allclose(mid, 0.5 * (s1.ent[0] + s1.ent[1]))

    def test_empty_class_flagged(self):
        kg1, _, _, s1, _, _, _ = make_pair()
        kg1.type_triplets[:] = []
        got, flag = mean_class_embedding(s1, kg1, 0, np.ones(kg1.n_entities))
        assert flag and np.all(got == 0)


class TestAlignmentLoss:
    def test_saturated_softmax_near_zero(self):
        kg1, kg2, _, s1, s2, model, feats = make_pair()
        labeled = LabeledSets()
        labeled.matches["entity"].add((0, 0))
        labeled.nonmatches["entity"].update({(0, 1), (0, 2)})
        s2.ent[0] = model.a_ent @ s1.ent[0]
        s2.ent[1] = -(model.a_ent @ s1.ent[0])
        s2.ent[2] = -(model.a_ent @ s1.ent[0])
        loss, _, _ = alignment_loss(
            model, s1, s2, feats, kg1, kg2, labeled, 2, False, np.random.default_rng(0)
        )
        assert loss == pytest.approx(0.0, abs=1e-10)

    def test_focal_zero_at_saturation(self):
        kg1, kg2, _, s1, s2, model, feats = make_pair()
        labeled = LabeledSets()
        labeled.matches["entity"].add((0, 0))
        labeled.nonmatches["entity"].update({(0, 1), (0, 2)})
        s2.ent[0] = model.a_ent @ s1.ent[0]
        s2.ent[1] = -(model.a_ent @ s1.ent[0])
        s2.ent[2] = -(model.a_ent @ s1.ent[0])
        loss, _, _ = alignment_loss(
            model, s1, s2, feats, kg1, kg2, labeled, 2, True, np.random.default_rng(0)
        )
        assert loss == 0.0

    @pytest.mark.parametrize("focal", [False, True])
    @pytest.mark.parametrize("model_kind", ["transe", "rotate"])
    def test_gradients_match_finite_differences(self, focal, model_kind):
        kg1, kg2, _, s1, s2, model, feats = make_pair(seed=11, model_kind=model_kind)
        labeled = LabeledSets()
        labeled.matches["entity"].update({(0, 0), (3, 4)})
        labeled.matches["relation"].add((0, 2))
        labeled.matches["class"].add((0, 1))

        def loss_fn():
            loss, grads, _ = alignment_loss(
                model, s1, s2, feats, kg1, kg2, labeled, 2, focal,
                np.random.default_rng(77),
            )
            return loss, densify(grads, model, s1, s2)

        err = fd_max_rel_err(loss_fn, align_arrays(model, s1, s2), 150, np.random.default_rng(4))
        assert err < 1e-4

    def test_semi_loss_gradients(self):
        kg1, kg2, _, s1, s2, model, feats = make_pair(seed=13)
        semi = [
            (ElementPair("entity", 1, 2), 0.95),
            (ElementPair("relation", 0, 0), 0.92),
            (ElementPair("class", 1, 0), 0.91),
        ]

        def loss_fn():
            loss, grads = semi_loss(model, s1, s2, feats, semi)
            return loss, densify(grads, model, s1, s2)

        err = fd_max_rel_err(loss_fn, align_arrays(model, s1, s2), 120, np.random.default_rng(5))
        assert err < 1e-4


class TestSemiMine:
    def test_nothing_above_threshold(self):
        kg1, kg2, _, s1, s2, model, feats = make_pair(seed=17)
        out = semi_supervised_mine(
            model, s1, s2, feats, kg1, kg2, [(0, 0), (1, 1)], LabeledSets(), tau=0.999999
        )
        assert out == [p for p in out if p[1] > 0.999999]

    def test_conflict_resolution(self):
        kg1, kg2, _, s1, s2, model, feats = make_pair()
        model.a_ent[...] = np.eye(s1.dim_entity)
        s1.ent[0, :] = 0.0
        s1.ent[0, 0] = 1.0
        for j, c in ((0, 0.95), (1, 0.92)):
            a = np.arccos(c)
            s2.ent[j, :] = 0.0
            s2.ent[j, 0], s2.ent[j, 1] = np.cos(a), np.sin(a)
        out = semi_supervised_mine(
            model, s1, s2, feats, kg1, kg2, [(0, 0), (0, 1)], LabeledSets(), tau=0.9
        )
        ent_pairs = [(p.left, p.right) for p, _ in out if p.kind == "entity"]
        assert (0, 0) in ent_pairs and (0, 1) not in ent_pairs

    def test_matches_brute_force_sweep(self):
        kg1, kg2, _, s1, s2, model, feats = make_pair(seed=23, n=20)
        tau = 0.2
        pool = [(i, j) for i in range(kg1.n_entities) for j in range(kg2.n_entities)]
        got = {
            (p.left, p.right): s
            for p, s in semi_supervised_mine(
                model, s1, s2, feats, kg1, kg2, pool, LabeledSets(), tau
            )
            if p.kind == "entity"
        }
        # oracle: direct cosine matrix, sort desc, sweep skipping used endpoints
        cand = []
        for i in range(kg1.n_entities):
            for j in range(kg2.n_entities):
                v = cosine(model.a_ent @ s1.ent[i], s2.ent[j])
                if v > tau:
                    cand.append((v, i, j))
        cand.sort(key=lambda t: (-t[0], t[1], t[2]))
        used_i, used_j, want = set(), set(), {}
        for v, i, j in cand:
            if i in used_i or j in used_j:
                continue
            used_i.add(i)
            used_j.add(j)
            want[(i, j)] = v
        assert set(got) == set(want)
        for key in want:
            assert got[key] == pytest.approx(want[key], abs=1e-9)


class TestMatchProbability:
    def test_degenerate_candidate_sets(self):
        _, _, _, s1, s2, model, feats = make_pair()
        p = match_probability(model, s1, s2, feats, ElementPair("entity", 0, 0), [0], [0])
        assert p == pytest.approx(1.0)

    def test_uniform_similarities(self):
        _, _, _, s1, s2, model, feats = make_pair()
        n = 5
        for j in range(n):
            s2.ent[j] = s2.ent[0]
        for i in range(n):
            s1.ent[i] = s1.ent[0]
        p = match_probability(
            model, s1, s2, feats, ElementPair("entity", 0, 0), list(range(n)), list(range(n))
        )
        assert p == pytest.approx(1.0 / n, abs=1e-9)

    def test_formula_oracle_5x5(self):
        _, _, _, s1, s2, model, feats = make_pair(seed=31)
        cand1, cand2 = list(range(5)), list(range(5))
        S = np.array(
            [[cosine(model.a_ent @ s1.ent[i], s2.ent[j]) for j in cand2] for i in cand1]
        )
        for i in cand1:
            for j in cand2:
                er = np.exp(S[i] / model.z_ent)
                ec = np.exp(S[:, j] / model.z_ent)
                want = min(er[j] / er.sum(), ec[i] / ec.sum())
                got = match_probability(
                    model, s1, s2, feats, ElementPair("entity", i, j), cand2, cand1
                )
                assert got == pytest.approx(want, abs=1e-12)

    def test_directional_softmax_sums_to_one(self):
        _, _, _, s1, s2, model, feats = make_pair(seed=37)
        probs = directional_probabilities(model, s1, s2, feats, "entity", 2, list(range(8)))
        assert probs.sum() == pytest.approx(1.0, abs=1e-6)

    def test_lower_temperature_sharpens_argmax(self):
        _, _, _, s1, s2, model, feats = make_pair(seed=41)
        cands = list(range(6))
        warm = directional_probabilities(model, s1, s2, feats, "entity", 0, cands)
        model.z_ent /= 2
        cold = directional_probabilities(model, s1, s2, feats, "entity", 0, cands)
        assert cold.max() > warm.max()
        assert np.argmax(cold) == np.argmax(warm)

    def test_pool_probabilities_match_pointwise(self):
        kg1, kg2, _, s1, s2, model, feats = make_pair(seed=43)
        pool = [ElementPair("entity", i, j) for i in range(4) for j in range(4)]
        got = pool_match_probabilities(model, s1, s2, feats, pool)
        for pair in pool:
            want = match_probability(
                model, s1, s2, feats, pair, list(range(4)), list(range(4))
            )
            assert got[pair] == pytest.approx(want, abs=1e-12)


class TestWeights:
    def test_removing_counterpart_never_increases_weight(self):
        _, _, _, s1, s2, model, _ = make_pair(seed=47)
        S = entity_similarity_matrix(model, s1, s2)
        full = S.max(axis=1)
        for j in range(s2.ent.shape[0]):
            reduced = np.delete(S, j, axis=1).max(axis=1)
            assert np.all(reduced <= full + 1e-12)


class TestFineTune:
    def test_noop_without_labels_or_epochs(self):
        kg1, kg2, _, s1, s2, model, feats = make_pair()
        cfg = CFG.replace(finetune_epochs=0)
        before = model.a_ent.copy()
        fine_tune(model, s1, s2, kg1, kg2, LabeledSets(), [], cfg, seed=0)
        assert np.array_equal(model.a_ent, before)

    def test_new_matches_gain_similarity(self):
        kg1, kg2, links, s1, s2, model, feats = make_pair(seed=53)
        new = [(ElementPair("entity", l, r), 1) for l, r in sorted(links.entity_matches)[:4]]
        before = np.mean(
            [sim(model, s1, s2, feats, p) for p, _ in new]
        )
        cfg = CFG.replace(finetune_epochs=25)
        feats2 = fine_tune(model, s1, s2, kg1, kg2, LabeledSets(), new, cfg, seed=1)
        after = np.mean([sim(model, s1, s2, feats2, p) for p, _ in new])
        assert after > before

    def test_determinism(self):
        outs = []
        for _ in range(2):
            kg1, kg2, links, s1, s2, model, _ = make_pair(seed=59)
            new = [(ElementPair("entity", l, r), 1) for l, r in sorted(links.entity_matches)[:3]]
            cfg = CFG.replace(finetune_epochs=10)
            fine_tune(model, s1, s2, kg1, kg2, LabeledSets(), new, cfg, seed=2)
            outs.append((model.a_ent.copy(), s1.ent.copy()))
        assert np.array_equal(outs[0][0], outs[1][0])
        assert np.array_equal(outs[0][1], outs[1][1])

    def test_rejects_relabeling(self):
        kg1, kg2, _, s1, s2, model, _ = make_pair()
        labeled = LabeledSets()
        labeled.matches["entity"].add((0, 0))
        with pytest.raises(ValueError):
            fine_tune(
                model, s1, s2, kg1, kg2, labeled,
                [(ElementPair("entity", 0, 0), 1)], CFG, seed=0,
            )
