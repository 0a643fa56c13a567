"""Structure embeddings for a single KG: entity-relation and entity-class scoring.

Two scoring functions are trained jointly with margin hinge losses:
translation scores over relation triplets (TransE or RotatE), and class
subspace membership scores ||W_c FFNN(e) - b_c|| over type triplets.
All gradients are analytic; no autodiff framework is involved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .config import Config
from .kg import KnowledgeGraph


class DivergenceError(RuntimeError):
    """Training hit NaN/Inf parameters."""


@dataclass
class EmbeddingSpace:
    model_kind: str             # transe | rotate
    ent: np.ndarray             # (n_e, d_e); rotate packs [re | im] halves
    rel: np.ndarray             # (n_r, d_e) for transe, (n_r, d_e/2) phases for rotate
    cls_w: np.ndarray           # (n_c, d_c, d_c)
    cls_b: np.ndarray           # (n_c, d_c)
    w1: np.ndarray              # FFNN entity->class-space: hidden tanh layer
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    margin_er: float = 1.0
    margin_ec: float = 1.0

    PARAM_NAMES = ("ent", "rel", "cls_w", "cls_b", "w1", "b1", "w2", "b2")

    @property
    def dim_entity(self) -> int:
        return self.ent.shape[1]

    @property
    def dim_class(self) -> int:
        return self.cls_b.shape[1] if self.cls_b.size else self.b1.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def copy(self) -> "EmbeddingSpace":
        return EmbeddingSpace(
            self.model_kind,
            *(getattr(self, n).copy() for n in self.PARAM_NAMES),
            margin_er=self.margin_er,
            margin_ec=self.margin_ec,
        )

    def check_finite(self) -> None:
        for name, arr in self.params().items():
            if arr.size and not np.isfinite(arr).all():
                raise DivergenceError(f"non-finite values in {name}")

    def save(self, path: str | Path) -> None:
        meta = {
            "kind": "embedding-space",
            "model_kind": self.model_kind,
            "margin_er": self.margin_er,
            "margin_ec": self.margin_ec,
        }
        save_arrays(path, meta, self.params())

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingSpace":
        meta, arrays = load_arrays(path)
        if meta.get("kind") != "embedding-space":
            raise ValueError(f"{path}: not an embedding-space checkpoint")
        return cls(
            meta["model_kind"],
            *(arrays[n] for n in cls.PARAM_NAMES),
            margin_er=meta["margin_er"],
            margin_ec=meta["margin_ec"],
        )


def init_space(kg: KnowledgeGraph, cfg: Config, rng: np.random.Generator) -> EmbeddingSpace:
    d_e, d_c = cfg.dim_entity, cfg.dim_class
    scale = 6.0 / np.sqrt(d_e)
    ent = rng.uniform(-scale, scale, size=(kg.n_entities, d_e))
    if cfg.model_kind == "rotate":
        rel = rng.uniform(-np.pi, np.pi, size=(kg.n_relations, d_e // 2))
    else:
        rel = rng.uniform(-scale, scale, size=(kg.n_relations, d_e))
    cls_w = np.stack([np.eye(d_c) + 0.1 * rng.standard_normal((d_c, d_c)) for _ in range(kg.n_classes)]) \
        if kg.n_classes else np.zeros((0, d_c, d_c))
    cls_b = 0.1 * rng.standard_normal((kg.n_classes, d_c)) if kg.n_classes else np.zeros((0, d_c))
    w1 = rng.standard_normal((d_c, d_e)) / np.sqrt(d_e)
    b1 = np.zeros(d_c)
    w2 = rng.standard_normal((d_c, d_c)) / np.sqrt(d_c)
    b2 = np.zeros(d_c)
    return EmbeddingSpace(
        cfg.model_kind, ent, rel, cls_w, cls_b, w1, b1, w2, b2,
        margin_er=cfg.margin_er, margin_ec=cfg.margin_ec,
    )


# ---------------------------------------------------------------------------
# entity-relation scoring
# ---------------------------------------------------------------------------

def _sg_transe(H, R, T):
    """Score ||h + r - t|| with unit gradients wrt (h, r, t)."""
    delta = H + R - T
    s = np.linalg.norm(delta, axis=-1)
    u = delta / np.maximum(s, 1e-12)[..., None]
    return s, u, u, -u


def _sg_rotate(H, TH, T):
    """Score ||h o e^{i theta} - t|| with gradients wrt (h, theta, t)."""
    half = H.shape[-1] // 2
    a, b = H[..., :half], H[..., half:]
    ap, bp = T[..., :half], T[..., half:]
    c, s_ = np.cos(TH), np.sin(TH)
    dre = a * c - b * s_ - ap
    dim_ = a * s_ + b * c - bp
    sc = np.sqrt((dre ** 2 + dim_ ** 2).sum(-1))
    denom = np.maximum(sc, 1e-12)[..., None]
    vre, vim = dre / denom, dim_ / denom
    gh = np.concatenate([vre * c + vim * s_, -vre * s_ + vim * c], axis=-1)
    gth = vre * (-a * s_ - b * c) + vim * (a * c - b * s_)
    gt = np.concatenate([-vre, -vim], axis=-1)
    return sc, gh, gth, gt


def _score_grads(space: EmbeddingSpace, H, R, T):
    if space.model_kind == "rotate":
        return _sg_rotate(H, R, T)
    return _sg_transe(H, R, T)


def score_er(space: EmbeddingSpace, head: int, rel: int, tail: int) -> float:
    s, *_ = _score_grads(space, space.ent[head], space.rel[rel], space.ent[tail])
    return float(s)


def rotate_apply(space: EmbeddingSpace, ent_vec: np.ndarray, rel: int) -> np.ndarray:
    """Rotate an entity vector by a relation's phases (rotate model only)."""
    half = ent_vec.shape[-1] // 2
    a, b = ent_vec[..., :half], ent_vec[..., half:]
    th = space.rel[rel]
    return np.concatenate([a * np.cos(th) - b * np.sin(th), a * np.sin(th) + b * np.cos(th)], axis=-1)


def translation_vector(space: EmbeddingSpace, head: int, rel: int) -> np.ndarray:
    """Entity-space displacement the relation applies to this head.

    transe: r itself. rotate: (h o r) - h, the deterministic tail minus head.
    """
    if space.model_kind == "rotate":
        return rotate_apply(space, space.ent[head], rel) - space.ent[head]
    return space.rel[rel].copy()


def local_optimum_relation(space: EmbeddingSpace, head: int, tail: int) -> np.ndarray:
    """argmin_r of the triplet score, in relation-parameter space.

    transe: t - h. rotate: elementwise principal phase of t/h (complex view).
    """
    h, t = space.ent[head], space.ent[tail]
    if space.model_kind == "rotate":
        half = h.shape[0] // 2
        hc = h[:half] + 1j * h[half:]
        tc = t[:half] + 1j * t[half:]
        safe = np.where(np.abs(hc) < 1e-12, 1.0, hc)
        return np.angle(tc / safe)
    return t - h


# ---------------------------------------------------------------------------
# entity-class scoring
# ---------------------------------------------------------------------------

def _ffnn_forward(space: EmbeddingSpace, E):
    U = E @ space.w1.T + space.b1
    Z = np.tanh(U)
    H = Z @ space.w2.T + space.b2
    return U, Z, H


def score_ec(space: EmbeddingSpace, ent: int, cls: int) -> float:
    _, _, H = _ffnn_forward(space, space.ent[ent][None, :])
    v = space.cls_w[cls] @ H[0] - space.cls_b[cls]
    return float(np.linalg.norm(v))


def _ec_rows_backward(space, ent_idx, cls_idx, coefs, grads):
    """Accumulate coef * d||W_c FFNN(e) - b_c||/d(params) for a batch of rows."""
    E = space.ent[ent_idx]
    U, Z, H = _ffnn_forward(space, E)
    Wc = space.cls_w[cls_idx]
    V = np.einsum("nij,nj->ni", Wc, H) - space.cls_b[cls_idx]
    s = np.linalg.norm(V, axis=1)
    g = coefs[:, None] * V / np.maximum(s, 1e-12)[:, None]
    np.add.at(grads["cls_w"], cls_idx, np.einsum("ni,nj->nij", g, H))
    np.add.at(grads["cls_b"], cls_idx, -g)
    dH = np.einsum("nij,ni->nj", Wc, g)
    dZ = dH @ space.w2
    dU = dZ * (1.0 - Z ** 2)
    grads["w2"] += dH.T @ Z
    grads["b2"] += dH.sum(0)
    grads["w1"] += dU.T @ E
    grads["b1"] += dU.sum(0)
    np.add.at(grads["ent"], ent_idx, dU @ space.w1)
    return s


def zero_grads(space: EmbeddingSpace) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in space.params().items()}


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _sample_tails(n_ent, pos_tails, k, rng, forbidden=None, heads=None, rels=None):
    """Random substitute tails; resample the few that collide with known facts."""
    neg = rng.integers(0, n_ent, size=(len(pos_tails), k))
    if forbidden is not None:
        for _ in range(8):
            bad = np.zeros(neg.shape, dtype=bool)
            for i in range(neg.shape[0]):
                for j in range(neg.shape[1]):
                    if (heads[i], rels[i], int(neg[i, j])) in forbidden:
                        bad[i, j] = True
            if not bad.any():
                break
            neg[bad] = rng.integers(0, n_ent, size=int(bad.sum()))
    return neg


def loss_er(
    space: EmbeddingSpace,
    batch: list[tuple[int, int, int]],
    negatives_per_pos: int,
    rng: np.random.Generator,
    known: set | None = None,
) -> tuple[float, dict[str, np.ndarray], dict]:
    """Margin hinge over tail-substituted negatives; returns (loss, grads, stats)."""
    if not batch:
        raise ValueError("empty batch")
    grads = zero_grads(space)
    h_idx = np.array([h for h, _, _ in batch])
    r_idx = np.array([r for _, r, _ in batch])
    t_idx = np.array([t for _, _, t in batch])
    k = negatives_per_pos
    neg = _sample_tails(space.ent.shape[0], t_idx, k, rng, known, h_idx, r_idx)

    H, R, T = space.ent[h_idx], space.rel[r_idx], space.ent[t_idx]
    s_pos, gh_p, gr_p, gt_p = _score_grads(space, H, R, T)
    Tn = space.ent[neg]
    s_neg, gh_n, gr_n, gt_n = _score_grads(space, H[:, None, :], R[:, None, :], Tn)

    hinge = space.margin_er + s_pos[:, None] - s_neg
    active = hinge > 0
    loss = float(hinge[active].sum())

    a = active.sum(1).astype(float)                      # per-positive multiplicity
    np.add.at(grads["ent"], h_idx, a[:, None] * gh_p - (active[..., None] * gh_n).sum(1))
    np.add.at(grads["rel"], r_idx, a[:, None] * gr_p - (active[..., None] * gr_n).sum(1))
    np.add.at(grads["ent"], t_idx, a[:, None] * gt_p)
    flat = active.ravel()
    np.add.at(grads["ent"], neg.ravel()[flat], -gt_n.reshape(-1, gt_n.shape[-1])[flat])
    return loss, grads, {"active_pairs": int(active.sum())}


def fit_loss(
    space: EmbeddingSpace, batch: list[tuple[int, int, int]], weight: float
) -> tuple[float, dict[str, np.ndarray]]:
    """weight * sum of squared positive scores.

    The margin hinge stops once ranking margins hold; this term additionally
    pulls stored triplets toward exact fits, which the bounded-error
    inference calculus presumes.
    """
    grads = zero_grads(space)
    if not batch or weight <= 0:
        return 0.0, grads
    h_idx = np.array([h for h, _, _ in batch])
    r_idx = np.array([r for _, r, _ in batch])
    t_idx = np.array([t for _, _, t in batch])
    s, gh, gr, gt = _score_grads(space, space.ent[h_idx], space.rel[r_idx], space.ent[t_idx])
    coef = (2.0 * weight) * s[:, None]
    np.add.at(grads["ent"], h_idx, coef * gh)
    np.add.at(grads["rel"], r_idx, coef * gr)
    np.add.at(grads["ent"], t_idx, coef * gt)
    return float(weight * (s ** 2).sum()), grads


def loss_ec(
    space: EmbeddingSpace,
    batch: list[tuple[int, int]],
    negatives_per_pos: int,
    rng: np.random.Generator,
    members: dict[int, set[int]] | None = None,
) -> tuple[float, dict[str, np.ndarray], dict]:
    """Hinge over entity-substituted negatives restricted to class non-members."""
    if not batch:
        raise ValueError("empty batch")
    n_ent = space.ent.shape[0]
    members = members or {}
    pos_e, pos_c, neg_e, neg_c = [], [], [], []
    skipped = 0
    for e, c in batch:
        member_set = members.get(c, set())
        candidates = n_ent - len(member_set)
        if candidates <= 0:
            skipped += 1
            continue
        negs = []
        while len(negs) < negatives_per_pos:
            cand = int(rng.integers(n_ent))
            if cand not in member_set:
                negs.append(cand)
        for cand in negs:
            pos_e.append(e)
            pos_c.append(c)
            neg_e.append(cand)
            neg_c.append(c)
    grads = zero_grads(space)
    stats = {"skipped": skipped}
    if not pos_e:
        return 0.0, grads, stats

    # scores first (forward only), then one backward pass over active rows
    E = space.ent[np.array(pos_e)]
    _, _, Hp = _ffnn_forward(space, E)
    Vp = np.einsum("nij,nj->ni", space.cls_w[pos_c], Hp) - space.cls_b[pos_c]
    s_pos = np.linalg.norm(Vp, axis=1)
    En = space.ent[np.array(neg_e)]
    _, _, Hn = _ffnn_forward(space, En)
    Vn = np.einsum("nij,nj->ni", space.cls_w[neg_c], Hn) - space.cls_b[neg_c]
    s_neg = np.linalg.norm(Vn, axis=1)

    hinge = space.margin_ec + s_pos - s_neg
    active = hinge > 0
    loss = float(hinge[active].sum())
    if active.any():
        idx = np.nonzero(active)[0]
        _ec_rows_backward(space, np.array(pos_e)[idx], np.array(pos_c)[idx],
                          np.ones(len(idx)), grads)
        _ec_rows_backward(space, np.array(neg_e)[idx], np.array(neg_c)[idx],
                          -np.ones(len(idx)), grads)
    return loss, grads, stats


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def class_members(kg: KnowledgeGraph) -> dict[int, set[int]]:
    members: dict[int, set[int]] = {}
    for e, c in kg.type_triplets:
        members.setdefault(c, set()).add(e)
    return members


def apply_grads(space: EmbeddingSpace, grads: dict[str, np.ndarray], lr: float, clip: float) -> None:
    for name, g in grads.items():
        if clip > 0:
            norm = np.linalg.norm(g)
            if norm > clip:
                g = g * (clip / norm)
        getattr(space, name)[...] -= lr * g


def project_entities(space: EmbeddingSpace) -> None:
    """Scale entity rows back onto the unit sphere (classic TransE practice)."""
    norms = np.maximum(np.linalg.norm(space.ent, axis=1, keepdims=True), 1e-12)
    space.ent /= norms


def train(
    space: EmbeddingSpace,
    kg: KnowledgeGraph,
    cfg: Config,
    seed: int = 0,
) -> dict:
    """Plain SGD over shuffled triplet batches; deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    known = set(kg.rel_triplets)
    members = class_members(kg)
    triplets = list(kg.rel_triplets)
    typed = list(kg.type_triplets)
    curve = []
    skips = 0
    if cfg.normalize_entities and cfg.epochs > 0:
        project_entities(space)
    for _ in range(cfg.epochs):
        total = 0.0
        order = rng.permutation(len(triplets))
        for start in range(0, len(order), cfg.batch_size):
            chunk = [triplets[i] for i in order[start : start + cfg.batch_size]]
            loss, grads, _ = loss_er(space, chunk, cfg.negatives_per_pos, rng, known)
            apply_grads(space, grads, cfg.lr, cfg.grad_clip)
            total += loss
            if cfg.fit_weight > 0:
                floss, fgrads = fit_loss(space, chunk, cfg.fit_weight)
                apply_grads(space, fgrads, cfg.lr, cfg.grad_clip)
                total += floss
        if typed:
            order = rng.permutation(len(typed))
            for start in range(0, len(order), cfg.batch_size):
                chunk = [typed[i] for i in order[start : start + cfg.batch_size]]
                loss, grads, stats = loss_ec(space, chunk, cfg.negatives_per_pos, rng, members)
                apply_grads(space, grads, cfg.lr, cfg.grad_clip)
                total += loss
                skips += stats["skipped"]
        if not np.isfinite(total):
            raise DivergenceError(f"loss diverged to {total}")
        if cfg.normalize_entities:
            project_entities(space)
        space.check_finite()
        curve.append(total)
    return {"loss_curve": curve, "ec_skipped": skips}
