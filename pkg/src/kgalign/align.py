"""Joint alignment across two embedding spaces.

A learnable mapping matrix per element kind carries one space into the other;
similarity is cosine after mapping. Relation and class pairs additionally
compare dangling-weighted mean embeddings (built from entity embeddings and
mapped with the entity matrix). Match probabilities come from two directional
temperature-scaled softmaxes, taking the conservative minimum.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .config import Config
from .embed import DivergenceError, EmbeddingSpace, local_optimum_relation
from .kg import ElementPair, KnowledgeGraph

log = logging.getLogger(__name__)


@dataclass
class AlignmentModel:
    a_ent: np.ndarray
    a_rel: np.ndarray
    a_cls: np.ndarray
    z_ent: float = 0.05
    z_rel: float = 0.1
    z_cls: float = 0.1
    tau: float = 0.9
    gamma: float = 2.0

    MATRIX_NAMES = ("a_ent", "a_rel", "a_cls")

    def matrix_for(self, kind: str) -> np.ndarray:
        return {"entity": self.a_ent, "relation": self.a_rel, "class": self.a_cls}[kind]

    def temperature_for(self, kind: str) -> float:
        return {"entity": self.z_ent, "relation": self.z_rel, "class": self.z_cls}[kind]

    def copy(self) -> "AlignmentModel":
        return AlignmentModel(
            self.a_ent.copy(), self.a_rel.copy(), self.a_cls.copy(),
            self.z_ent, self.z_rel, self.z_cls, self.tau, self.gamma,
        )

    def check_finite(self) -> None:
        for name in self.MATRIX_NAMES:
            if not np.isfinite(getattr(self, name)).all():
                raise DivergenceError(f"non-finite values in {name}")

    def save(self, path: str | Path) -> None:
        meta = {
            "kind": "alignment-model",
            "z_ent": self.z_ent, "z_rel": self.z_rel, "z_cls": self.z_cls,
            "tau": self.tau, "gamma": self.gamma,
        }
        save_arrays(path, meta, {n: getattr(self, n) for n in self.MATRIX_NAMES})

    @classmethod
    def load(cls, path: str | Path) -> "AlignmentModel":
        meta, arrays = load_arrays(path)
        if meta.get("kind") != "alignment-model":
            raise ValueError(f"{path}: not an alignment-model checkpoint")
        return cls(arrays["a_ent"], arrays["a_rel"], arrays["a_cls"],
                   meta["z_ent"], meta["z_rel"], meta["z_cls"], meta["tau"], meta["gamma"])


def init_model(cfg: Config, rng: np.random.Generator) -> AlignmentModel:
    def near_identity(d):
        return np.eye(d) + 0.01 * rng.standard_normal((d, d))

    return AlignmentModel(
        near_identity(cfg.dim_entity),
        near_identity(cfg.dim_relation),
        near_identity(cfg.dim_class),
        z_ent=cfg.z_ent, z_rel=cfg.z_rel, z_cls=cfg.z_cls,
        tau=cfg.tau, gamma=cfg.focal_gamma,
    )


@dataclass
class LabeledSets:
    """Oracle-labeled matches/non-matches per kind plus mined soft-labeled pairs."""

    matches: dict[str, set[tuple[int, int]]] = field(
        default_factory=lambda: {"entity": set(), "relation": set(), "class": set()}
    )
    nonmatches: dict[str, set[tuple[int, int]]] = field(
        default_factory=lambda: {"entity": set(), "relation": set(), "class": set()}
    )
    semi: list[tuple[ElementPair, float]] = field(default_factory=list)

    def add(self, pair: ElementPair, label: int) -> None:
        pos, neg = self.matches[pair.kind], self.nonmatches[pair.kind]
        key = (pair.left, pair.right)
        if label > 0:
            if key in neg:
                raise ValueError(f"{pair} already labeled non-match")
            pos.add(key)
        else:
            if key in pos:
                raise ValueError(f"{pair} already labeled match")
            neg.add(key)
        self.semi = [(p, s) for p, s in self.semi if p != pair]

    def labeled_keys(self, kind: str) -> set[tuple[int, int]]:
        return self.matches[kind] | self.nonmatches[kind]

    def n_labels(self) -> int:
        return sum(len(s) for s in self.matches.values()) + sum(
            len(s) for s in self.nonmatches.values()
        )


@dataclass
class DerivedFeatures:
    """Entity/relation/class weights and mean embeddings; refresh per round."""

    ent_w1: np.ndarray
    ent_w2: np.ndarray
    mean_rel1: np.ndarray       # relation-parameter space (see local_optimum_relation)
    mean_rel2: np.ndarray
    mean_rel_flag1: np.ndarray  # True where the relation had no usable triplets
    mean_rel_flag2: np.ndarray
    mean_cls1: np.ndarray       # entity space
    mean_cls2: np.ndarray
    mean_cls_flag1: np.ndarray
    mean_cls_flag2: np.ndarray
    rel_w1: np.ndarray
    rel_w2: np.ndarray
    cls_w1: np.ndarray
    cls_w2: np.ndarray
    stale: bool = False

    def require_fresh(self):
        if self.stale:
            raise RuntimeError("DerivedFeatures are stale; recompute before use")


# ---------------------------------------------------------------------------
# cosine plumbing
# ---------------------------------------------------------------------------

def _cos_rows(x: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """cos(x, row) per row of Y, with zero-norm vectors scoring 0."""
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(Y, axis=1)
    if nx < 1e-12:
        log.debug("zero-norm vector in similarity; returning 0")
        return np.zeros(len(Y))
    out = Y @ x / (np.maximum(ny, 1e-300) * nx)
    out[ny < 1e-12] = 0.0
    return out


def _cos(x, y) -> float:
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx < 1e-12 or ny < 1e-12:
        log.debug("zero-norm vector in similarity; returning 0")
        return 0.0
    return float(x @ y / (nx * ny))


def _cos_grads(A, x, y):
    """cos(A x, y) with gradients wrt A, x, y."""
    u = A @ x
    nu, ny = np.linalg.norm(u), np.linalg.norm(y)
    if nu < 1e-12 or ny < 1e-12:
        return 0.0, np.zeros_like(A), np.zeros_like(x), np.zeros_like(y)
    c = float(u @ y / (nu * ny))
    du = y / (nu * ny) - c * u / nu**2
    dy = u / (nu * ny) - c * y / ny**2
    return c, np.outer(du, x), A.T @ du, dy


def lift_relation(space: EmbeddingSpace, vec: np.ndarray) -> np.ndarray:
    """Map a relation-parameter vector into entity space for A_ent products.

    transe’s relation parameters already live there; rotate phases are lifted
    to the unit complex vector [cos th | sin th].
    """
    if space.model_kind == "rotate":
        return np.concatenate([np.cos(vec), np.sin(vec)], axis=-1)
    return vec


# ---------------------------------------------------------------------------
# derived features
# ---------------------------------------------------------------------------

def entity_similarity_matrix(model: AlignmentModel, s1: EmbeddingSpace, s2: EmbeddingSpace):
    M = s1.ent @ model.a_ent.T
    n1 = np.maximum(np.linalg.norm(M, axis=1, keepdims=True), 1e-12)
    n2 = np.maximum(np.linalg.norm(s2.ent, axis=1, keepdims=True), 1e-12)
    return (M / n1) @ (s2.ent / n2).T


def mean_relation_embedding(
    space: EmbeddingSpace, kg: KnowledgeGraph, rel: int, ent_weights: np.ndarray
) -> tuple[np.ndarray, bool]:
    """min(w_h, w_t)-weighted mean of per-triplet optimal relation parameters."""
    num = None
    den = 0.0
    for h, r, t in kg.rel_triplets:
        if r != rel:
            continue
        w = min(ent_weights[h], ent_weights[t])
        opt = local_optimum_relation(space, h, t)
        num = w * opt if num is None else num + w * opt
        den += w
    if num is None or abs(den) < 1e-9:
        dim = space.rel.shape[1]
        return np.zeros(dim), True
    return num / den, False


def mean_class_embedding(
    space: EmbeddingSpace, kg: KnowledgeGraph, cls: int, ent_weights: np.ndarray
) -> tuple[np.ndarray, bool]:
    """Weight-averaged member entity embedding."""
    members = [e for e, c in kg.type_triplets if c == cls]
    if not members:
        return np.zeros(space.dim_entity), True
    w = ent_weights[members]
    den = w.sum()
    if abs(den) < 1e-9:
        return np.zeros(space.dim_entity), True
    return (w[:, None] * space.ent[members]).sum(0) / den, False


def _all_mean_relations(space, kg, w):
    n_r, dim = kg.n_relations, space.rel.shape[1]
    if not kg.rel_triplets:
        return np.zeros((n_r, dim)), np.ones(n_r, dtype=bool)
    tri = np.array(kg.rel_triplets)
    h_idx, r_idx, t_idx = tri[:, 0], tri[:, 1], tri[:, 2]
    weights = np.minimum(w[h_idx], w[t_idx])
    if space.model_kind == "rotate":
        half = space.dim_entity // 2
        hc = space.ent[h_idx, :half] + 1j * space.ent[h_idx, half:]
        tc = space.ent[t_idx, :half] + 1j * space.ent[t_idx, half:]
        safe = np.where(np.abs(hc) < 1e-12, 1.0, hc)
        opts = np.angle(tc / safe)
    else:
        opts = space.ent[t_idx] - space.ent[h_idx]
    num = np.zeros((n_r, dim))
    den = np.zeros(n_r)
    np.add.at(num, r_idx, weights[:, None] * opts)
    np.add.at(den, r_idx, weights)
    flags = np.abs(den) < 1e-9
    den_safe = np.where(flags, 1.0, den)
    means = num / den_safe[:, None]
    means[flags] = 0.0
    return means, flags


def _all_mean_classes(space, kg, w):
    n_c = kg.n_classes
    means = np.zeros((n_c, space.dim_entity))
    flags = np.ones(n_c, dtype=bool)
    if kg.type_triplets:
        tt = np.array(kg.type_triplets)
        e_idx, c_idx = tt[:, 0], tt[:, 1]
        num = np.zeros((n_c, space.dim_entity))
        den = np.zeros(n_c)
        np.add.at(num, c_idx, w[e_idx][:, None] * space.ent[e_idx])
        np.add.at(den, c_idx, w[e_idx])
        ok = np.abs(den) >= 1e-9
        means[ok] = num[ok] / den[ok][:, None]
        flags = ~ok
    return means, flags


def compute_derived(
    model: AlignmentModel,
    s1: EmbeddingSpace,
    s2: EmbeddingSpace,
    kg1: KnowledgeGraph,
    kg2: KnowledgeGraph,
) -> DerivedFeatures:
    S = entity_similarity_matrix(model, s1, s2)
    w1 = S.max(axis=1) if S.size else np.zeros(kg1.n_entities)
    w2 = S.max(axis=0) if S.size else np.zeros(kg2.n_entities)

    mr1, fr1 = _all_mean_relations(s1, kg1, w1)
    mr2, fr2 = _all_mean_relations(s2, kg2, w2)
    mc1, fc1 = _all_mean_classes(s1, kg1, w1)
    mc2, fc2 = _all_mean_classes(s2, kg2, w2)

    feats = DerivedFeatures(w1, w2, mr1, mr2, fr1, fr2, mc1, mc2, fc1, fc2,
                            rel_w1=np.zeros(kg1.n_relations), rel_w2=np.zeros(kg2.n_relations),
                            cls_w1=np.zeros(kg1.n_classes), cls_w2=np.zeros(kg2.n_classes))
    # schema weights need similarities, which need the mean embeddings above
    for i in range(kg1.n_relations):
        sims = sim_vector(model, s1, s2, feats, "relation", i, np.arange(kg2.n_relations))
        feats.rel_w1[i] = sims.max() if sims.size else 0.0
    for j in range(kg2.n_relations):
        sims = sim_vector_rev(model, s1, s2, feats, "relation", j, np.arange(kg1.n_relations))
        feats.rel_w2[j] = sims.max() if sims.size else 0.0
    for i in range(kg1.n_classes):
        sims = sim_vector(model, s1, s2, feats, "class", i, np.arange(kg2.n_classes))
        feats.cls_w1[i] = sims.max() if sims.size else 0.0
    for j in range(kg2.n_classes):
        sims = sim_vector_rev(model, s1, s2, feats, "class", j, np.arange(kg1.n_classes))
        feats.cls_w2[j] = sims.max() if sims.size else 0.0
    return feats


# ---------------------------------------------------------------------------
# similarity
# ---------------------------------------------------------------------------

def sim_vector(model, s1, s2, feats, kind, left, right_ids) -> np.ndarray:
    """S(left, j) for every j in right_ids (vectorized over the right side)."""
    right_ids = np.asarray(right_ids, dtype=int)
    if right_ids.size == 0:
        return np.zeros(0)
    if kind == "entity":
        return _cos_rows(model.a_ent @ s1.ent[left], s2.ent[right_ids])
    if kind == "relation":
        orig = _cos_rows(model.a_rel @ s1.rel[left], s2.rel[right_ids])
        mean = _cos_rows(
            model.a_ent @ lift_relation(s1, feats.mean_rel1[left]),
            lift_relation(s2, feats.mean_rel2[right_ids]),
        )
        return np.maximum(orig, mean)
    orig = _cos_rows(model.a_cls @ s1.cls_b[left], s2.cls_b[right_ids])
    mean = _cos_rows(model.a_ent @ feats.mean_cls1[left], feats.mean_cls2[right_ids])
    return np.maximum(orig, mean)


def sim_vector_rev(model, s1, s2, feats, kind, right, left_ids) -> np.ndarray:
    """S(i, right) for every i in left_ids (vectorized over the left side)."""
    left_ids = np.asarray(left_ids, dtype=int)
    if left_ids.size == 0:
        return np.zeros(0)
    if kind == "entity":
        M = s1.ent[left_ids] @ model.a_ent.T
        return _cos_rows(s2.ent[right], M)
    if kind == "relation":
        orig = _cos_rows(s2.rel[right], s1.rel[left_ids] @ model.a_rel.T)
        mean = _cos_rows(
            lift_relation(s2, feats.mean_rel2[right]),
            lift_relation(s1, feats.mean_rel1[left_ids]) @ model.a_ent.T,
        )
        return np.maximum(orig, mean)
    orig = _cos_rows(s2.cls_b[right], s1.cls_b[left_ids] @ model.a_cls.T)
    mean = _cos_rows(feats.mean_cls2[right], feats.mean_cls1[left_ids] @ model.a_ent.T)
    return np.maximum(orig, mean)


def sim(model, s1, s2, feats, pair: ElementPair) -> float:
    if pair.kind != "entity":
        feats.require_fresh()
    return float(sim_vector(model, s1, s2, feats, pair.kind, pair.left, [pair.right])[0])


def _sim_grads(model, s1, s2, feats, kind, left, right):
    """Similarity with gradients onto the active branch's parameters.

    Returns (value, grads) with grads keyed by parameter path. Mean embeddings
    are round constants, so their branch only feeds the entity matrix.
    """
    if kind == "entity":
        c, dA, dx, dy = _cos_grads(model.a_ent, s1.ent[left], s2.ent[right])
        return c, {"model.a_ent": dA, ("s1.ent", left): dx, ("s2.ent", right): dy}
    if kind == "relation":
        c_orig, dA, dx, dy = _cos_grads(model.a_rel, s1.rel[left], s2.rel[right])
        lm1 = lift_relation(s1, feats.mean_rel1[left])
        lm2 = lift_relation(s2, feats.mean_rel2[right])
        c_mean, dAe, _, _ = _cos_grads(model.a_ent, lm1, lm2)
        if c_orig >= c_mean:
            return c_orig, {"model.a_rel": dA, ("s1.rel", left): dx, ("s2.rel", right): dy}
        return c_mean, {"model.a_ent": dAe}
    c_orig, dA, dx, dy = _cos_grads(model.a_cls, s1.cls_b[left], s2.cls_b[right])
    c_mean, dAe, _, _ = _cos_grads(model.a_ent, feats.mean_cls1[left], feats.mean_cls2[right])
    if c_orig >= c_mean:
        return c_orig, {"model.a_cls": dA, ("s1.cls_b", left): dx, ("s2.cls_b", right): dy}
    return c_mean, {"model.a_ent": dAe}


# ---------------------------------------------------------------------------
# alignment losses
# ---------------------------------------------------------------------------

def _candidate_ids(kind: str, kg: KnowledgeGraph) -> list[int]:
    if kind == "entity":
        return list(range(kg.n_entities))
    if kind == "relation":
        return kg.base_relations()   # synthetic inverses are not alignment candidates
    return list(range(kg.n_classes))


def _accumulate(total: dict, part: dict, scale: float) -> None:
    for key, g in part.items():
        if key in total:
            total[key] += scale * g
        else:
            total[key] = scale * g


def alignment_loss(
    model: AlignmentModel,
    s1: EmbeddingSpace,
    s2: EmbeddingSpace,
    feats: DerivedFeatures,
    kg1: KnowledgeGraph,
    kg2: KnowledgeGraph,
    labeled: LabeledSets,
    negatives_per_pos: int,
    focal: bool,
    rng: np.random.Generator,
) -> tuple[float, dict, dict]:
    """Listwise softmax loss over labeled matches of all three kinds.

    Per match: -log softmax(scores / Z)[positive] over the positive plus
    sampled negatives obtained by substituting either side. The focal variant
    multiplies each term by (1 - p)^gamma. Labeled non-matches that share an
    element with the positive are used as guaranteed negatives first.
    """
    total = 0.0
    grads: dict = {}
    stats = {"terms": 0}
    for kind in ("entity", "relation", "class"):
        matches = sorted(labeled.matches[kind])
        if not matches:
            continue
        z = model.temperature_for(kind)
        cand1 = _candidate_ids(kind, kg1)
        cand2 = _candidate_ids(kind, kg2)
        known = labeled.matches[kind]
        stored_neg = sorted(labeled.nonmatches[kind])
        for l, r in matches:
            negs: list[tuple[int, int]] = [
                p for p in stored_neg if p[0] == l or p[1] == r
            ][:negatives_per_pos]
            guard = 0
            while len(negs) < negatives_per_pos and guard < 50:
                guard += 1
                if rng.random() < 0.5 and len(cand1) > 1:
                    cand = (int(cand1[rng.integers(len(cand1))]), r)
                else:
                    cand = (l, int(cand2[rng.integers(len(cand2))]))
                if cand == (l, r) or cand in known or cand in negs:
                    continue
                negs.append(cand)
            if not negs:
                continue
            rows = [(l, r)] + negs
            vals, row_grads = [], []
            for a, b in rows:
                v, g = _sim_grads(model, s1, s2, feats, kind, a, b)
                vals.append(v)
                row_grads.append(g)
            scores = np.array(vals) / z
            scores -= scores.max()
            exp = np.exp(scores)
            soft = exp / exp.sum()
            p = float(soft[0])
            base = -np.log(max(p, 1e-300))
            if focal and model.gamma > 0:
                term = (1.0 - p) ** model.gamma * base
                # d term/d s_k via p: term'(p) * dp/ds_k
                dterm_dp = (
                    -model.gamma * (1.0 - p) ** (model.gamma - 1.0) * base
                    - (1.0 - p) ** model.gamma / max(p, 1e-300)
                )
                delta = np.eye(len(rows))[0]
                dp_ds = p * (delta - soft) / z
                coefs = dterm_dp * dp_ds
            else:
                term = base
                coefs = (soft - np.eye(len(rows))[0]) / z
            total += term
            stats["terms"] += 1
            for coef, g in zip(coefs, row_grads):
                _accumulate(grads, g, coef)
    return total, grads, stats


def semi_loss(
    model: AlignmentModel,
    s1: EmbeddingSpace,
    s2: EmbeddingSpace,
    feats: DerivedFeatures,
    semi: list[tuple[ElementPair, float]],
) -> tuple[float, dict]:
    """Mined-pair objective: maximize frozen-confidence-weighted similarity."""
    total = 0.0
    grads: dict = {}
    for pair, soft in semi:
        v, g = _sim_grads(model, s1, s2, feats, pair.kind, pair.left, pair.right)
        total += -soft * v
        _accumulate(grads, g, -soft)
    return total, grads


def semi_supervised_mine(
    model: AlignmentModel,
    s1: EmbeddingSpace,
    s2: EmbeddingSpace,
    feats: DerivedFeatures,
    kg1: KnowledgeGraph,
    kg2: KnowledgeGraph,
    entity_pairs: list[tuple[int, int]],
    labeled: LabeledSets,
    tau: float,
) -> list[tuple[ElementPair, float]]:
    """Confident, conflict-free unlabeled pairs with frozen soft labels.

    Greedy by descending similarity, one partner per element and side; the
    current model is the frozen snapshot whose scores become the soft labels.
    """
    feats.require_fresh()
    scored: list[tuple[float, str, int, int]] = []
    for l, r in entity_pairs:
        if (l, r) in labeled.labeled_keys("entity"):
            continue
        v = float(sim_vector(model, s1, s2, feats, "entity", l, [r])[0])
        if v > tau:
            scored.append((v, "entity", l, r))
    for kind in ("relation", "class"):
        for l in _candidate_ids(kind, kg1):
            cands = np.array(_candidate_ids(kind, kg2), dtype=int)
            if not cands.size:
                continue
            vals = sim_vector(model, s1, s2, feats, kind, l, cands)
            for r, v in zip(cands, vals):
                if (l, int(r)) in labeled.labeled_keys(kind):
                    continue
                if v > tau:
                    scored.append((float(v), kind, l, int(r)))
    scored.sort(key=lambda t: (-t[0], t[1], t[2], t[3]))
    used_l: dict[str, set[int]] = {"entity": set(), "relation": set(), "class": set()}
    used_r: dict[str, set[int]] = {"entity": set(), "relation": set(), "class": set()}
    out = []
    for v, kind, l, r in scored:
        if l in used_l[kind] or r in used_r[kind]:
            continue
        used_l[kind].add(l)
        used_r[kind].add(r)
        out.append((ElementPair(kind, l, r), v))
    return out


# ---------------------------------------------------------------------------
# probability calibration
# ---------------------------------------------------------------------------

def _softmax(scores: np.ndarray) -> np.ndarray:
    scores = scores - scores.max()
    exp = np.exp(scores)
    return exp / exp.sum()


def directional_probabilities(
    model, s1, s2, feats, kind: str, left: int, cand_right: list[int]
) -> np.ndarray:
    """Pr[candidate | left]: temperature softmax over the candidate set."""
    z = model.temperature_for(kind)
    return _softmax(sim_vector(model, s1, s2, feats, kind, left, cand_right) / z)


def directional_probabilities_rev(
    model, s1, s2, feats, kind: str, right: int, cand_left: list[int]
) -> np.ndarray:
    z = model.temperature_for(kind)
    return _softmax(sim_vector_rev(model, s1, s2, feats, kind, right, cand_left) / z)


def match_probability(
    model: AlignmentModel,
    s1: EmbeddingSpace,
    s2: EmbeddingSpace,
    feats: DerivedFeatures,
    pair: ElementPair,
    cand_right: list[int],
    cand_left: list[int],
) -> float:
    """min of the two directional softmax probabilities at the kind temperature."""
    cand_right = sorted(set(cand_right) | {pair.right})
    cand_left = sorted(set(cand_left) | {pair.left})
    p_right = directional_probabilities(model, s1, s2, feats, pair.kind, pair.left, cand_right)
    p_left = directional_probabilities_rev(model, s1, s2, feats, pair.kind, pair.right, cand_left)
    return min(
        float(p_right[cand_right.index(pair.right)]),
        float(p_left[cand_left.index(pair.left)]),
    )


def pool_match_probabilities(
    model, s1, s2, feats, pool_pairs: list[ElementPair]
) -> dict[ElementPair, float]:
    """Probabilities for every pool pair, candidate sets induced by the pool."""
    by_kind: dict[str, list[ElementPair]] = {}
    for p in pool_pairs:
        by_kind.setdefault(p.kind, []).append(p)
    out: dict[ElementPair, float] = {}
    for kind, pairs in sorted(by_kind.items()):
        rights_of: dict[int, list[int]] = {}
        lefts_of: dict[int, list[int]] = {}
        for p in pairs:
            rights_of.setdefault(p.left, []).append(p.right)
            lefts_of.setdefault(p.right, []).append(p.left)
        z = model.temperature_for(kind)
        p_dir: dict[tuple[int, int], float] = {}
        for l, rights in sorted(rights_of.items()):
            scores = sim_vector(model, s1, s2, feats, kind, l, rights) / z
            scores -= scores.max()
            exp = np.exp(scores)
            soft = exp / exp.sum()
            for r, pr in zip(rights, soft):
                p_dir[(l, r)] = float(pr)
        for r, lefts in sorted(lefts_of.items()):
            scores = sim_vector_rev(model, s1, s2, feats, kind, r, lefts) / z
            scores -= scores.max()
            exp = np.exp(scores)
            soft = exp / exp.sum()
            for l, pl in zip(lefts, soft):
                out[ElementPair(kind, l, r)] = min(p_dir[(l, r)], float(pl))
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _apply_align_grads(model, s1, s2, grads: dict, lr: float, clip: float) -> None:
    targets = {"s1": s1, "s2": s2}
    sq = 0.0
    for g in grads.values():
        sq += float((g ** 2).sum())
    scale = 1.0 if clip <= 0 or sq <= clip**2 else clip / np.sqrt(sq)
    for key, g in grads.items():
        if isinstance(key, tuple):
            path, idx = key
            owner, attr = path.split(".")
            getattr(targets[owner], attr)[idx] -= lr * scale * g
        else:
            _, attr = key.split(".")
            getattr(model, attr)[...] -= lr * scale * g


def _structure_epoch(space, kg, cfg, rng, known, members) -> None:
    """One pass of the structure losses, keeping embeddings graph-coherent
    while alignment pulls anchor pairs together."""
    from .embed import apply_grads, fit_loss, loss_ec, loss_er, project_entities

    triplets = kg.rel_triplets
    if triplets:
        order = rng.permutation(len(triplets))
        for start in range(0, len(order), cfg.batch_size):
            chunk = [triplets[i] for i in order[start : start + cfg.batch_size]]
            _, grads, _ = loss_er(space, chunk, cfg.negatives_per_pos, rng, known)
            apply_grads(space, grads, cfg.lr, cfg.grad_clip)
            if cfg.fit_weight > 0:
                _, fgrads = fit_loss(space, chunk, cfg.fit_weight)
                apply_grads(space, fgrads, cfg.lr, cfg.grad_clip)
    if kg.type_triplets:
        order = rng.permutation(len(kg.type_triplets))
        for start in range(0, len(order), cfg.batch_size):
            chunk = [kg.type_triplets[i] for i in order[start : start + cfg.batch_size]]
            _, grads, _ = loss_ec(space, chunk, cfg.negatives_per_pos, rng, members)
            apply_grads(space, grads, cfg.lr, cfg.grad_clip)
    if cfg.normalize_entities:
        project_entities(space)


def train_alignment(
    model: AlignmentModel,
    s1: EmbeddingSpace,
    s2: EmbeddingSpace,
    kg1: KnowledgeGraph,
    kg2: KnowledgeGraph,
    labeled: LabeledSets,
    cfg: Config,
    seed: int,
    epochs: int,
    focal: bool,
    entity_pool: list[tuple[int, int]] | None = None,
) -> DerivedFeatures:
    """Shared optimizer for pretraining (focal off) and fine-tuning (focal on).

    Joint training: each epoch interleaves one structure pass per KG with the
    alignment losses, so anchor information percolates through the graphs
    instead of resting on a linear map alone. Mines semi-supervised pairs once
    against the starting snapshot; returns fresh derived features.
    """
    rng = np.random.default_rng(seed)
    feats = compute_derived(model, s1, s2, kg1, kg2)
    if epochs <= 0:
        return feats
    if entity_pool is not None:
        labeled.semi = semi_supervised_mine(
            model, s1, s2, feats, kg1, kg2, entity_pool, labeled, model.tau
        )
    from .embed import class_members

    known1, known2 = set(kg1.rel_triplets), set(kg2.rel_triplets)
    members1, members2 = class_members(kg1), class_members(kg2)
    for _ in range(epochs):
        if cfg.joint_structure:
            _structure_epoch(s1, kg1, cfg, rng, known1, members1)
            _structure_epoch(s2, kg2, cfg, rng, known2, members2)
        loss, grads, _ = alignment_loss(
            model, s1, s2, feats, kg1, kg2, labeled,
            cfg.negatives_per_pos, focal, rng,
        )
        if labeled.semi:
            sloss, sgrads = semi_loss(model, s1, s2, feats, labeled.semi)
            loss += sloss
            _accumulate(grads, sgrads, 1.0)
        if not np.isfinite(loss):
            raise DivergenceError(f"alignment loss diverged to {loss}")
        _apply_align_grads(model, s1, s2, grads, cfg.align_lr, cfg.grad_clip)
        model.check_finite()
        s1.check_finite()
        s2.check_finite()
    feats.stale = True
    return compute_derived(model, s1, s2, kg1, kg2)


def fine_tune(
    model: AlignmentModel,
    s1: EmbeddingSpace,
    s2: EmbeddingSpace,
    kg1: KnowledgeGraph,
    kg2: KnowledgeGraph,
    labeled: LabeledSets,
    new_labels: list[tuple[ElementPair, int]],
    cfg: Config,
    seed: int,
    entity_pool: list[tuple[int, int]] | None = None,
) -> DerivedFeatures:
    """Absorb newly-labeled pairs with focal-loss epochs over old plus new."""
    for pair, label in new_labels:
        key = (pair.left, pair.right)
        if key in labeled.labeled_keys(pair.kind):
            raise ValueError(f"{pair} is already labeled")
    for pair, label in new_labels:
        labeled.add(pair, label)
    return train_alignment(
        model, s1, s2, kg1, kg2, labeled, cfg, seed,
        epochs=cfg.finetune_epochs, focal=True, entity_pool=entity_pool,
    )
