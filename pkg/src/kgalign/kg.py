"""Knowledge graph data model, dataset IO, down-sampling and synthetic generation.

Ids are interned to dense integers at load time. Every base relation r gets a
synthetic inverse r^-1 stored at id r+1 (even/odd pairing), and every stored
triplet (h, r, t) is mirrored as (t, r^-1, h). The reserved relation name
``type`` never enters rel_triplets: those rows are split into type_triplets.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

INVERSE_SUFFIX = "⁻¹"  # superscript -1
DEFAULT_TYPE_ALIASES = ("type", "rdf:type")

MATCH = 1
NONMATCH = -1

KINDS = ("entity", "relation", "class")


class DatasetError(ValueError):
    """Malformed dataset file; message carries file name and line number."""


@dataclass(frozen=True)
class ElementPair:
    """A candidate correspondence between same-kind elements of the two KGs."""

    kind: str       # entity | relation | class
    left: int
    right: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown pair kind {self.kind!r}")


class LabelStore:
    """Pair labels; a label only ever moves from unlabeled to +1/-1, never back."""

    def __init__(self):
        self._labels: dict[ElementPair, int] = {}

    def get(self, pair: ElementPair) -> int | None:
        return self._labels.get(pair)

    def set(self, pair: ElementPair, label: int) -> None:
        if label not in (MATCH, NONMATCH):
            raise ValueError(f"label must be +1 or -1, got {label}")
        old = self._labels.get(pair)
        if old is not None and old != label:
            raise ValueError(f"{pair} already labeled {old}, refusing to flip")
        self._labels[pair] = label

    def items(self):
        return self._labels.items()

    def __len__(self):
        return len(self._labels)

    def __contains__(self, pair: ElementPair) -> bool:
        return pair in self._labels


@dataclass
class KnowledgeGraph:
    entity_names: list[str]
    relation_names: list[str]           # base relations at even ids, inverses at odd
    class_names: list[str]
    rel_triplets: list[tuple[int, int, int]]
    type_triplets: list[tuple[int, int]]
    _out: dict[int, list[tuple[int, int]]] | None = field(default=None, repr=False)

    # -- id sets ------------------------------------------------------------
    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def entities(self) -> set[int]:
        return set(range(self.n_entities))

    @property
    def relations(self) -> set[int]:
        return set(range(self.n_relations))

    @property
    def classes(self) -> set[int]:
        return set(range(self.n_classes))

    @staticmethod
    def inverse(rel: int) -> int:
        return rel ^ 1

    @staticmethod
    def is_inverse(rel: int) -> bool:
        return rel % 2 == 1

    def base_relations(self) -> list[int]:
        return list(range(0, self.n_relations, 2))

    def classes_without_instances(self) -> set[int]:
        used = {c for _, c in self.type_triplets}
        return set(range(self.n_classes)) - used

    # -- adjacency ----------------------------------------------------------
    def out_edges(self, ent: int) -> list[tuple[int, int]]:
        """Outgoing (relation, tail) pairs; inverses make this cover in-edges too."""
        if self._out is None:
            out: dict[int, list[tuple[int, int]]] = {}
            for h, r, t in self.rel_triplets:
                out.setdefault(h, []).append((r, t))
            object.__setattr__(self, "_out", out)
        return self._out.get(ent, [])

    def classes_of(self, ent: int) -> list[int]:
        return sorted({c for e, c in self.type_triplets if e == ent})

    def degree(self, ent: int) -> int:
        return len(self.out_edges(ent))

    # -- integrity ----------------------------------------------------------
    def validate(self) -> None:
        n_e, n_r, n_c = self.n_entities, self.n_relations, self.n_classes
        if n_r % 2 != 0:
            raise ValueError("relations must come in base/inverse pairs")
        for h, r, t in self.rel_triplets:
            if not (0 <= h < n_e and 0 <= t < n_e and 0 <= r < n_r):
                raise ValueError(f"dangling id in triplet {(h, r, t)}")
        for e, c in self.type_triplets:
            if not (0 <= e < n_e and 0 <= c < n_c):
                raise ValueError(f"dangling id in type triplet {(e, c)}")
        for name in self.relation_names:
            if name in DEFAULT_TYPE_ALIASES:
                raise ValueError(f"reserved relation name {name!r} in relation set")
        facts = set(self.rel_triplets)
        for h, r, t in facts:
            if (t, self.inverse(r), h) not in facts:
                raise ValueError(f"missing inverse of {(h, r, t)}")

    def as_name_facts(self):
        """Name-keyed view for id-order-independent equality checks."""
        base = {
            (self.entity_names[h], self.relation_names[r], self.entity_names[t])
            for h, r, t in self.rel_triplets
            if not self.is_inverse(r)
        }
        typed = {(self.entity_names[e], self.class_names[c]) for e, c in self.type_triplets}
        return (
            set(self.entity_names),
            {self.relation_names[r] for r in self.base_relations()},
            set(self.class_names),
            base,
            typed,
        )


@dataclass
class GoldLinks:
    """Reference matches; consumed by the simulated oracle and metrics only."""

    entity_matches: set[tuple[int, int]] = field(default_factory=set)
    relation_matches: set[tuple[int, int]] = field(default_factory=set)
    class_matches: set[tuple[int, int]] = field(default_factory=set)

    def by_kind(self, kind: str) -> set[tuple[int, int]]:
        return {
            "entity": self.entity_matches,
            "relation": self.relation_matches,
            "class": self.class_matches,
        }[kind]

    def validate(self, kg1: KnowledgeGraph, kg2: KnowledgeGraph) -> None:
        for l, r in self.entity_matches:
            if not (0 <= l < kg1.n_entities and 0 <= r < kg2.n_entities):
                raise ValueError(f"dangling entity link {(l, r)}")
        for l, r in self.relation_matches:
            if not (0 <= l < kg1.n_relations and 0 <= r < kg2.n_relations):
                raise ValueError(f"dangling relation link {(l, r)}")
        for l, r in self.class_matches:
            if not (0 <= l < kg1.n_classes and 0 <= r < kg2.n_classes):
                raise ValueError(f"dangling class link {(l, r)}")


# ---------------------------------------------------------------------------
# construction helpers
# ---------------------------------------------------------------------------

class _Interner:
    def __init__(self):
        self.ids: dict[str, int] = {}
        self.names: list[str] = []

    def intern(self, name: str) -> int:
        idx = self.ids.get(name)
        if idx is None:
            idx = len(self.names)
            self.ids[name] = idx
            self.names.append(name)
        return idx

    def lookup(self, name: str) -> int | None:
        return self.ids.get(name)


def build_kg(
    base_triples: list[tuple[str, str, str]],
    type_triples: list[tuple[str, str]],
    extra_entities: list[str] = (),
) -> KnowledgeGraph:
    """Intern names and synthesize inverse relations from raw string facts."""
    ents, rels, clss = _Interner(), _Interner(), _Interner()
    for name in extra_entities:
        ents.intern(name)
    rel_triplets: list[tuple[int, int, int]] = []
    for h, r, t in base_triples:
        hid, tid = ents.intern(h), ents.intern(t)
        if rels.lookup(r) is None:
            rels.intern(r)
            rels.intern(r + INVERSE_SUFFIX)
        rid = rels.lookup(r)
        rel_triplets.append((hid, rid, tid))
        rel_triplets.append((tid, rid ^ 1, hid))
    type_triplets = [(ents.intern(e), clss.intern(c)) for e, c in type_triples]
    kg = KnowledgeGraph(ents.names, rels.names, clss.names, rel_triplets, type_triplets)
    kg.validate()
    return kg


# ---------------------------------------------------------------------------
# dataset IO
# ---------------------------------------------------------------------------

def _read_triples(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"missing dataset file: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DatasetError(f"{path.name}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        rows.append((lineno, parts[0], parts[1], parts[2]))
    return rows


def _read_pairs(path: Path, optional: bool):
    if not path.exists():
        if optional:
            return []
        raise FileNotFoundError(f"missing dataset file: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DatasetError(f"{path.name}:{lineno}: expected 2 tab-separated fields, got {len(parts)}")
        rows.append((lineno, parts[0], parts[1]))
    return rows


def load_dataset(
    dir_path: str | Path,
    type_aliases: tuple[str, ...] = DEFAULT_TYPE_ALIASES,
) -> tuple[KnowledgeGraph, KnowledgeGraph, GoldLinks]:
    """Load `rel_triples_1/2` plus `ent_links` (and optional rel/cls links)."""
    root = Path(dir_path)
    kgs = []
    for side in ("1", "2"):
        base, typed = [], []
        for _, h, r, t in _read_triples(root / f"rel_triples_{side}"):
            if r in type_aliases:
                typed.append((h, t))
            else:
                base.append((h, r, t))
        kgs.append(build_kg(base, typed))
    kg1, kg2 = kgs

    links = GoldLinks()
    specs = [
        ("ent_links", False, lambda kg: kg.entity_names, links.entity_matches),
        ("rel_links", True, lambda kg: kg.relation_names, links.relation_matches),
        ("cls_links", True, lambda kg: kg.class_names, links.class_matches),
    ]
    for fname, optional, names_of, target in specs:
        idx1 = {n: i for i, n in enumerate(names_of(kg1))}
        idx2 = {n: i for i, n in enumerate(names_of(kg2))}
        for lineno, a, b in _read_pairs(root / fname, optional):
            if a not in idx1:
                raise DatasetError(f"{fname}:{lineno}: id {a!r} not present in KG1")
            if b not in idx2:
                raise DatasetError(f"{fname}:{lineno}: id {b!r} not present in KG2")
            target.add((idx1[a], idx2[b]))
    links.validate(kg1, kg2)
    return kg1, kg2, links


def save_dataset(
    kg1: KnowledgeGraph,
    kg2: KnowledgeGraph,
    links: GoldLinks,
    dir_path: str | Path,
    type_name: str = "type",
) -> None:
    """Write the same file layout load_dataset reads (base triples only)."""
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    for side, kg in (("1", kg1), ("2", kg2)):
        lines = [
            f"{kg.entity_names[h]}\t{kg.relation_names[r]}\t{kg.entity_names[t]}"
            for h, r, t in kg.rel_triplets
            if not kg.is_inverse(r)
        ]
        lines += [
            f"{kg.entity_names[e]}\t{type_name}\t{kg.class_names[c]}"
            for e, c in kg.type_triplets
        ]
        (root / f"rel_triples_{side}").write_text("\n".join(lines) + "\n", encoding="utf-8")
    pair_files = [
        ("ent_links", links.entity_matches, kg1.entity_names, kg2.entity_names),
        ("rel_links", links.relation_matches, kg1.relation_names, kg2.relation_names),
        ("cls_links", links.class_matches, kg1.class_names, kg2.class_names),
    ]
    for fname, pairs, names1, names2 in pair_files:
        lines = sorted(f"{names1[l]}\t{names2[r]}" for l, r in pairs)
        (root / fname).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


# ---------------------------------------------------------------------------
# down-sampling
# ---------------------------------------------------------------------------

def _random_walk_sample(kg: KnowledgeGraph, seeds: list[int], n: int, rng) -> list[int]:
    """Collect up to n distinct entities by restarting random walks from seeds."""
    if n <= 0 or not seeds:
        return []
    visited: dict[int, None] = {}
    cur = int(seeds[rng.integers(len(seeds))])
    visited[cur] = None
    stall = 0
    while len(visited) < n and stall < 50 * n:
        stall += 1
        edges = kg.out_edges(cur)
        if not edges or rng.random() < 0.15:
            pool = seeds if rng.random() < 0.5 else list(visited)
            cur = int(pool[rng.integers(len(pool))])
            continue
        _, nxt = edges[rng.integers(len(edges))]
        if nxt not in visited:
            visited[nxt] = None
        cur = nxt
    return list(visited)[:n]


def _induce(kg: KnowledgeGraph, keep: set[int]) -> tuple[list, list, list[str]]:
    """Base triples/type triples (as names) induced by an entity subset."""
    base = [
        (kg.entity_names[h], kg.relation_names[r], kg.entity_names[t])
        for h, r, t in kg.rel_triplets
        if not kg.is_inverse(r) and h in keep and t in keep
    ]
    typed = [
        (kg.entity_names[e], kg.class_names[c]) for e, c in kg.type_triplets if e in keep
    ]
    names = [kg.entity_names[e] for e in sorted(keep)]
    return base, typed, names


def _relink(
    kg1: KnowledgeGraph, kg2: KnowledgeGraph, links: GoldLinks,
    new1: KnowledgeGraph, new2: KnowledgeGraph,
) -> GoldLinks:
    out = GoldLinks()
    tables = [
        (links.entity_matches, kg1.entity_names, kg2.entity_names,
         new1.entity_names, new2.entity_names, out.entity_matches),
        (links.relation_matches, kg1.relation_names, kg2.relation_names,
         new1.relation_names, new2.relation_names, out.relation_matches),
        (links.class_matches, kg1.class_names, kg2.class_names,
         new1.class_names, new2.class_names, out.class_matches),
    ]
    for pairs, names1, names2, nnames1, nnames2, target in tables:
        idx1 = {n: i for i, n in enumerate(nnames1)}
        idx2 = {n: i for i, n in enumerate(nnames2)}
        for l, r in pairs:
            a, b = names1[l], names2[r]
            if a in idx1 and b in idx2:
                target.add((idx1[a], idx2[b]))
    return out


def subsample(
    kg1: KnowledgeGraph,
    kg2: KnowledgeGraph,
    links: GoldLinks,
    n_entities: int,
    seed: int,
    dangling: float = 0.0,
) -> tuple[KnowledgeGraph, KnowledgeGraph, GoldLinks]:
    """Connected random-walk subsample seeded at matched entities.

    The dangling fraction removes that share of matched entities from the
    second KG only, so their KG1 counterparts lose their match.
    """
    if n_entities > kg1.n_entities:
        raise ValueError(f"n_entities={n_entities} exceeds |E1|={kg1.n_entities}")
    if not (0.0 <= dangling <= 1.0):
        raise ValueError("dangling must lie in [0,1]")
    empty = build_kg([], [])
    if n_entities == 0:
        return empty, empty, GoldLinks()

    rng = np.random.default_rng(seed)
    match_of = dict(sorted(links.entity_matches))
    seeds1 = sorted(match_of) or sorted(range(kg1.n_entities))
    keep1 = set(_random_walk_sample(kg1, seeds1, n_entities, rng))

    matched = sorted(e for e in keep1 if e in match_of)
    n_drop = int(np.floor(dangling * len(matched)))
    dropped = set(rng.choice(matched, size=n_drop, replace=False).tolist()) if n_drop else set()
    core2 = sorted(match_of[e] for e in matched if e not in dropped)
    keep2 = set(_random_walk_sample(kg2, core2, n_entities, rng)) | set(core2)
    keep2 -= {match_of[e] for e in dropped}

    new1 = build_kg(*_induce(kg1, keep1))
    new2 = build_kg(*_induce(kg2, keep2))
    return new1, new2, _relink(kg1, kg2, links, new1, new2)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    n_entities: int = 100
    n_relations: int = 8
    n_classes: int = 4
    density: float = 2.0        # base triples per entity
    noise: float = 0.0          # fraction of KG2 edges dropped
    dangling: float = 0.0       # fraction of KG2 entities dropped
    classes_per_entity: int = 1

    def validate(self) -> "SynthSpec":
        if min(self.n_entities, self.n_relations, self.n_classes) < 0:
            raise ValueError("counts must be non-negative")
        for frac in (self.noise, self.dangling):
            if not (0.0 <= frac <= 1.0):
                raise ValueError("fractions must lie in [0,1]")
        if self.density < 0:
            raise ValueError("density must be non-negative")
        return self


def synth_kg_pair(spec: SynthSpec, seed: int) -> tuple[KnowledgeGraph, KnowledgeGraph, GoldLinks]:
    """Clone a structured random KG, rename ids in the copy, drop entities/edges.

    The source graph mimics real KG texture rather than a uniform random
    graph: entities belong to groups (their primary class), each relation
    links one source group to one target group, and tails are drawn with a
    heavy-tailed popularity bias so hubs exist. Gold links are exact by
    construction.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    n = spec.n_entities
    ent = [f"e{i}" for i in range(n)]
    rel = [f"r{j}" for j in range(max(spec.n_relations, 1))]
    cls = [f"c{k}" for k in range(max(spec.n_classes, 1))]

    n_groups = max(spec.n_classes, 1)
    group_of = rng.integers(0, n_groups, size=n)
    members = {g: np.flatnonzero(group_of == g) for g in range(n_groups)}
    rel_pattern = {j: int(rng.integers(n_groups)) for j in range(len(rel))}  # tail group
    popularity = 1.0 / np.power(np.arange(n) + 1, 0.6)
    popularity = popularity[rng.permutation(n)]

    def sample_tail(group: int) -> int:
        cand = members[group]
        if cand.size == 0:
            return int(rng.integers(n))
        w = popularity[cand]
        return int(cand[rng.choice(cand.size, p=w / w.sum())])

    triples: list[tuple[str, str, str]] = []
    seen: set[tuple[str, str, str]] = set()
    target = int(round(spec.density * n))
    if n >= 2:
        order = rng.permutation(n)
        for i in range(min(n - 1, target)):  # connected backbone
            h, t = ent[order[i]], ent[order[i + 1]]
            fact = (h, rel[int(rng.integers(len(rel)))], t)
            triples.append(fact)
            seen.add(fact)
        used_head_rel = {(h, r) for h, r, _ in triples}
        guard = 0
        while len(triples) < target and guard < 100 * target:
            guard += 1
            r = int(rng.integers(len(rel)))
            h = int(rng.integers(n))
            t = sample_tail(rel_pattern[r])
            if h == t:
                continue
            fact = (ent[h], rel[r], ent[t])
            if fact in seen:
                continue
            # prefer functional relations: retry occupied (head, relation) slots
            if (ent[h], rel[r]) in used_head_rel and guard % 16 != 0:
                continue
            triples.append(fact)
            seen.add(fact)
            used_head_rel.add((ent[h], rel[r]))
    typed = []
    if spec.n_classes > 0:
        for i in range(n):
            picks = {int(group_of[i])}
            while len(picks) < min(spec.classes_per_entity, len(cls)):
                picks.add(int(rng.integers(len(cls))))
            typed.extend((ent[i], cls[k]) for k in sorted(picks))

    kg1 = build_kg(triples, typed, extra_entities=ent)

    rename_e = {name: name + "'" for name in ent}
    rename_r = {name: name + "'" for name in rel}
    rename_c = {name: name + "'" for name in cls}
    n_drop = int(np.floor(spec.dangling * n))
    dropped = set(rng.choice(ent, size=n_drop, replace=False).tolist()) if n_drop else set()
    kept_ent = [e for e in ent if e not in dropped]

    triples2 = [
        (rename_e[h], rename_r[r], rename_e[t])
        for h, r, t in triples
        if h not in dropped and t not in dropped
    ]
    if spec.noise > 0 and triples2:
        n_keep = len(triples2) - int(np.floor(spec.noise * len(triples2)))
        idx = rng.permutation(len(triples2))[:n_keep]
        triples2 = [triples2[i] for i in sorted(idx)]
    typed2 = [(rename_e[e], rename_c[c]) for e, c in typed if e not in dropped]

    kg2 = build_kg(triples2, typed2, extra_entities=[rename_e[e] for e in kept_ent])

    # classes/relations always exist on both sides even if rarely used
    links = _relink_by_name(kg1, kg2, rename_e, rename_r, rename_c)
    return kg1, kg2, links


def _relink_by_name(kg1, kg2, rename_e, rename_r, rename_c) -> GoldLinks:
    links = GoldLinks()
    idx2e = {n: i for i, n in enumerate(kg2.entity_names)}
    idx2r = {n: i for i, n in enumerate(kg2.relation_names)}
    idx2c = {n: i for i, n in enumerate(kg2.class_names)}
    for i, name in enumerate(kg1.entity_names):
        j = idx2e.get(rename_e.get(name, ""))
        if j is not None:
            links.entity_matches.add((i, j))
    for i in kg1.base_relations():
        j = idx2r.get(rename_r.get(kg1.relation_names[i], ""))
        if j is not None:
            links.relation_matches.add((i, j))
    for i, name in enumerate(kg1.class_names):
        j = idx2c.get(rename_c.get(name, ""))
        if j is not None:
            links.class_matches.add((i, j))
    links.validate(kg1, kg2)
    return links
