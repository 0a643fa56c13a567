import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kgalign.config import Config
from kgalign.embed import (
    EmbeddingSpace,
    class_members,
    init_space,
    local_optimum_relation,
    loss_ec,
    loss_er,
    rotate_apply,
    score_ec,
    score_er,
    train,
)
from kgalign.kg import SynthSpec, synth_kg_pair

from oracles import fd_max_rel_err


def tiny_space(model_kind="transe", n_e=6, n_r=4, n_c=3, d_e=8, d_c=4, seed=0):
    rng = np.random.default_rng(seed)
    cfg = Config(model_kind=model_kind, dim_entity=d_e, dim_class=d_c)
    kg_like = type("KG", (), {"n_entities": n_e, "n_relations": n_r, "n_classes": n_c})()
    return init_space(kg_like, cfg, rng)


class TestScoreEr:
    def test_transe_exact_translation(self):
        sp = tiny_space(d_e=2)
        sp.ent[0] = (1.0, 0.0)
        sp.rel[0] = (0.0, 1.0)
        sp.ent[1] = (1.0, 1.0)
        assert score_er(sp, 0, 0, 1) == pytest.approx(0.0)

    def test_transe_euclidean_norm(self):
        sp = tiny_space(d_e=2)
        sp.ent[0] = (0.0, 0.0)
        sp.rel[0] = (0.0, 0.0)
        sp.ent[1] = (3.0, 4.0)
        assert score_er(sp, 0, 0, 1) == pytest.approx(5.0)

    def test_rotate_constructed_tail(self):
        sp = tiny_space(model_kind="rotate", d_e=8, seed=3)
        sp.ent[1] = rotate_apply(sp, sp.ent[0], 2)
        assert score_er(sp, 0, 2, 1) == pytest.approx(0.0, abs=1e-12)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_rotate_preserves_norm(self, seed):
        sp = tiny_space(model_kind="rotate", seed=seed)
        rotated = rotate_apply(sp, sp.ent[0], 1)
        assert np.linalg.norm(rotated) == pytest.approx(np.linalg.norm(sp.ent[0]), abs=1e-9)

    def test_rotate_local_optimum_recovers_phases(self):
        sp = tiny_space(model_kind="rotate", seed=5)
        sp.ent[1] = rotate_apply(sp, sp.ent[0], 0)
        got = local_optimum_relation(sp, 0, 1)
        want = np.mod(sp.rel[0] + np.pi, 2 * np.pi) - np.pi
        assert np.allclose(got, want, atol=1e-9)


class TestScoreEc:
    def test_constructed_membership(self):
        sp = tiny_space()
        from kgalign.embed import _ffnn_forward

        _, _, H = _ffnn_forward(sp, sp.ent[2][None, :])
        sp.cls_w[1] = np.eye(sp.dim_class)
        sp.cls_b[1] = H[0]
        assert score_ec(sp, 2, 1) == pytest.approx(0.0, abs=1e-12)

    def test_zero_map_covers_everything(self):
        sp = tiny_space()
        sp.cls_w[0] = 0.0
        sp.cls_b[0] = 0.0
        for e in range(6):
            assert score_ec(sp, e, 0) == pytest.approx(0.0)

    def test_formula_oracle(self):
        sp = tiny_space(seed=12)
        for e, c in [(0, 0), (3, 2), (5, 1)]:
            z = np.tanh(sp.w1 @ sp.ent[e] + sp.b1)
            h = sp.w2 @ z + sp.b2
            want = np.linalg.norm(sp.cls_w[c] @ h - sp.cls_b[c])
            assert score_ec(sp, e, c) == pytest.approx(want, abs=1e-12)


class TestLossEr:
    def test_satisfied_margin_is_zero(self):
        sp = tiny_space(n_e=2, d_e=2)
        sp.ent[0] = (0.0, 0.0)
        sp.ent[1] = (10.0, 10.0)
        sp.rel[0] = (0.0, 0.0)
        loss, grads, _ = loss_er(
            sp, [(0, 0, 0)], 2, np.random.default_rng(0), known={(0, 0, 0)}
        )
        assert loss == 0.0
        assert all(np.all(g == 0) for g in grads.values())

    def test_hinge_at_margin(self):
        sp = tiny_space(n_e=1, d_e=4)
        loss, _, _ = loss_er(sp, [(0, 1, 0)], 3, np.random.default_rng(0))
        assert loss == pytest.approx(3 * sp.margin_er)

    @pytest.mark.parametrize("model_kind", ["transe", "rotate"])
    def test_gradients_match_finite_differences(self, model_kind):
        sp = tiny_space(model_kind=model_kind, seed=7)
        batch = [(0, 0, 1), (2, 1, 3), (4, 2, 5), (1, 3, 0)]

        def loss_fn():
            loss, grads, _ = loss_er(sp, batch, 2, np.random.default_rng(42))
            return loss, grads

        err = fd_max_rel_err(
            loss_fn, {"ent": sp.ent, "rel": sp.rel}, 120, np.random.default_rng(1)
        )
        assert err < 1e-4


class TestLossEc:
    def test_degenerate_class_skipped(self):
        sp = tiny_space(n_e=4)
        members = {0: {0, 1, 2, 3}}
        loss, grads, stats = loss_ec(sp, [(1, 0)], 2, np.random.default_rng(0), members)
        assert loss == 0.0
        assert stats["skipped"] == 1
        assert all(np.all(g == 0) for g in grads.values())

    def test_gradients_match_finite_differences(self):
        sp = tiny_space(seed=9)
        members = {0: {0}, 1: {1, 2}, 2: {3}}
        batch = [(0, 0), (1, 1), (2, 1), (3, 2)]

        def loss_fn():
            loss, grads, _ = loss_ec(sp, batch, 2, np.random.default_rng(5), members)
            return loss, grads

        arrays = {n: getattr(sp, n) for n in ("ent", "cls_w", "cls_b", "w1", "b1", "w2", "b2")}
        err = fd_max_rel_err(loss_fn, arrays, 120, np.random.default_rng(2))
        assert err < 1e-4


@pytest.fixture(scope="module")
def kg():
    kg1, _, _ = synth_kg_pair(SynthSpec(n_entities=50, density=2.0, n_classes=3), seed=21)
    return kg1


class TestTrain:
    CFG = Config(dim_entity=16, dim_class=8, epochs=0, batch_size=128, lr=0.05)

    def test_zero_epochs_unchanged(self, kg):
        rng = np.random.default_rng(0)
        sp = init_space(kg, self.CFG, rng)
        before = {k: v.copy() for k, v in sp.params().items()}
        train(sp, kg, self.CFG, seed=1)
        for name, arr in sp.params().items():
            assert np.array_equal(arr, before[name])

    def test_determinism(self, kg):
        cfg = self.CFG.replace(epochs=5)
        outs = []
        for _ in range(2):
            sp = init_space(kg, cfg, np.random.default_rng(3))
            train(sp, kg, cfg, seed=4)
            outs.append(sp)
        for name in EmbeddingSpace.PARAM_NAMES:
            assert np.array_equal(getattr(outs[0], name), getattr(outs[1], name))

    def test_training_separates_scores(self, kg):
        cfg = self.CFG.replace(epochs=120)
        sp = init_space(kg, cfg, np.random.default_rng(5))
        init_pos = np.mean([score_er(sp, h, r, t) for h, r, t in kg.rel_triplets])
        train(sp, kg, cfg, seed=6)
        pos = np.mean([score_er(sp, h, r, t) for h, r, t in kg.rel_triplets])
        rng = np.random.default_rng(7)
        neg = np.mean(
            [
                score_er(sp, h, r, int(rng.integers(kg.n_entities)))
                for h, r, t in kg.rel_triplets
            ]
        )
        assert pos < init_pos
        assert pos < neg

    def test_class_separation(self, kg):
        cfg = self.CFG.replace(epochs=120)
        sp = init_space(kg, cfg, np.random.default_rng(8))
        train(sp, kg, cfg, seed=9)
        members = class_members(kg)
        inside, outside = [], []
        for c, mem in members.items():
            for e in range(kg.n_entities):
                (inside if e in mem else outside).append(score_ec(sp, e, c))
        assert np.median(inside) < np.median(outside)
