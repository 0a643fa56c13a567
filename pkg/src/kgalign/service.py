"""Command line entry points, session persistence, and the HTTP API.

One session per process. All randomness flows from the single session seed:
every stochastic stage derives its generator from (seed, stage, round), so a
replayed audit log reproduces the identical model and the identical next
batch. Exit codes: 2 usage, 3 missing file, 4 invalid config, 5 divergence.
"""

from __future__ import annotations

import json
import sys
import threading
from pathlib import Path

import click
import numpy as np

from .align import pool_match_probabilities
from .checkpoint import load_arrays, save_arrays
from .config import Config, ConfigError, dump_config, load_config
from .embed import DivergenceError, EmbeddingSpace
from .harness import (
    LoopState,
    OracleSim,
    evaluate,
    prepare_loop,
    record_metrics,
    run_round,
    select_batch,
    split_gold,
    write_reports,
)
from .kg import DatasetError, ElementPair, SynthSpec, load_dataset, save_dataset, synth_kg_pair

EXIT_MISSING_FILE = 3
EXIT_BAD_CONFIG = 4
EXIT_DIVERGED = 5


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_session_checkpoint(path, state: LoopState) -> None:
    arrays = {}
    for prefix, space in (("s1", state.s1), ("s2", state.s2)):
        for name, arr in space.params().items():
            arrays[f"{prefix}.{name}"] = arr
    for name in state.model.MATRIX_NAMES:
        arrays[f"model.{name}"] = getattr(state.model, name)
    meta = {
        "kind": "session",
        "model_kind": state.s1.model_kind,
        "margin_er": state.s1.margin_er,
        "margin_ec": state.s1.margin_ec,
        "z_ent": state.model.z_ent,
        "z_rel": state.model.z_rel,
        "z_cls": state.model.z_cls,
        "tau": state.model.tau,
        "gamma": state.model.gamma,
        "round": state.round,
        "labels_used": state.labels_used,
        "seed": state.cfg.seed,
    }
    save_arrays(path, meta, arrays)


def load_session_checkpoint(path):
    from .align import AlignmentModel

    meta, arrays = load_arrays(path)
    if meta.get("kind") != "session":
        raise ValueError(f"{path}: not a session checkpoint")

    def space(prefix):
        return EmbeddingSpace(
            meta["model_kind"],
            *(arrays[f"{prefix}.{n}"] for n in EmbeddingSpace.PARAM_NAMES),
            margin_er=meta["margin_er"],
            margin_ec=meta["margin_ec"],
        )

    model = AlignmentModel(
        arrays["model.a_ent"], arrays["model.a_rel"], arrays["model.a_cls"],
        meta["z_ent"], meta["z_rel"], meta["z_cls"], meta["tau"], meta["gamma"],
    )
    return space("s1"), space("s2"), model, meta


# ---------------------------------------------------------------------------
# session (drives both the simulated loop and the HTTP API)
# ---------------------------------------------------------------------------

def pair_id(pair: ElementPair) -> str:
    return f"{pair.kind}:{pair.left}:{pair.right}"


def parse_pair_id(text: str) -> ElementPair:
    kind, left, right = text.split(":")
    return ElementPair(kind, int(left), int(right))


class Session:
    """One annotation session: a LoopState plus a pending batch and audit log."""

    def __init__(self, kg1, kg2, links, cfg: Config, session_dir: str | Path):
        self.dir = Path(session_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.links = links
        self.lock = threading.Lock()
        self.status = "training"
        self.pending: list[ElementPair] | None = None
        self.pending_info: dict[str, dict] = {}
        self.audit_path = self.dir / "audit.jsonl"
        replay = self._read_audit()
        self.state = prepare_loop(kg1, kg2, links, cfg)
        if replay is None:
            self._append_audit({"event": "init", "seed": cfg.seed})
        else:
            for event in replay:
                if event["event"] != "labels":
                    continue
                labels = [
                    (parse_pair_id(pid), 1 if lab == "match" else -1)
                    for pid, lab in event["labels"]
                ]
                self._apply_labels(labels)
        record_metrics(self.state)
        self._save()
        self.status = "ready"

    # -- persistence --------------------------------------------------------
    def _read_audit(self):
        if not self.audit_path.exists():
            return None
        events = [json.loads(line) for line in self.audit_path.read_text().splitlines() if line]
        if events and events[0].get("event") == "init" and events[0]["seed"] != self.cfg.seed:
            raise ConfigError(
                f"session dir was created with seed {events[0]['seed']}, got {self.cfg.seed}"
            )
        return events

    def _append_audit(self, event: dict) -> None:
        with open(self.audit_path, "a") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")

    def _save(self) -> None:
        save_session_checkpoint(self.dir / "checkpoint.ckpt", self.state)
        write_reports(self.state.records, self.dir)

    def _apply_labels(self, labels: list[tuple[ElementPair, int]]) -> None:
        oracle = _FixedLabels(dict(labels))
        run_round(self.state, oracle, [pair for pair, _ in labels])

    # -- API surface ---------------------------------------------------------
    def budget_left(self) -> int:
        total = self.cfg.total_budget if self.cfg.total_budget >= 0 else (
            self.cfg.rounds * self.cfg.budget
        )
        return max(total - self.state.labels_used, 0)

    def status_payload(self) -> dict:
        latest = self.state.records[-1] if self.state.records else None
        return {
            "status": self.status,
            "round": self.state.round,
            "labels_used": self.state.labels_used,
            "budget_left": self.budget_left(),
            "pending": [pair_id(p) for p in self.pending] if self.pending else None,
            "latest": latest,
        }

    def get_batch(self) -> dict:
        with self.lock:
            if self.pending is None:
                size = min(self.cfg.budget, self.budget_left())
                batch = select_batch(self.state, size) if size > 0 else []
                if not batch:
                    return {"round": self.state.round, "pairs": [], "exhausted": True}
                self.pending = batch
                self.pending_info = self._describe(batch)
            return {
                "round": self.state.round,
                "pairs": [self.pending_info[pair_id(p)] for p in self.pending],
                "exhausted": False,
            }

    def _describe(self, batch: list[ElementPair]) -> dict[str, dict]:
        st = self.state
        probs = pool_match_probabilities(st.model, st.s1, st.s2, st.feats, st.pool)
        from .align import sim as sim_fn

        out = {}
        for pair in batch:
            out[pair_id(pair)] = {
                "id": pair_id(pair),
                "kind": pair.kind,
                "left": _element_name(st.kg1, pair.kind, pair.left),
                "right": _element_name(st.kg2, pair.kind, pair.right),
                "similarity": float(sim_fn(st.model, st.s1, st.s2, st.feats, pair)),
                "probability": float(probs.get(pair, 0.0)),
                "gain": 0.0,
            }
        return out

    def submit_labels(self, round_token: int, labels: list[tuple[str, str]]) -> dict:
        with self.lock:
            if round_token < self.state.round:
                return {"status": "duplicate", "round": self.state.round}
            if self.pending is None or round_token != self.state.round:
                raise StaleBatch(f"no pending batch for round {round_token}")
            pending_ids = {pair_id(p) for p in self.pending}
            got_ids = [pid for pid, _ in labels]
            if set(got_ids) != pending_ids or len(got_ids) != len(pending_ids):
                raise StaleBatch("labels must cover the pending batch exactly once each")
            parsed = [
                (parse_pair_id(pid), 1 if lab == "match" else -1) for pid, lab in labels
            ]
            self.status = "training"
            try:
                self._apply_labels(parsed)
                self._append_audit({
                    "event": "labels",
                    "round": self.state.round - 1,
                    "labels": sorted([pid, lab] for pid, lab in labels),
                })
                record_metrics(self.state)
                self._save()
                self.pending = None
                self.pending_info = {}
            finally:
                self.status = "ready"
            return {"status": "trained", "round": self.state.round}

    def pair_context(self, pid: str) -> dict:
        pair = parse_pair_id(pid)
        st = self.state
        return {
            "id": pid,
            "kind": pair.kind,
            "left": _neighborhood(st.kg1, pair.kind, pair.left),
            "right": _neighborhood(st.kg2, pair.kind, pair.right),
        }


class StaleBatch(Exception):
    pass


class _FixedLabels:
    """Oracle stand-in that replays recorded labels."""

    def __init__(self, answers: dict[ElementPair, int]):
        self.answers = answers

    def label(self, pair: ElementPair) -> int:
        return self.answers[pair]


def _element_name(kg, kind: str, idx: int) -> str:
    if kind == "entity":
        return kg.entity_names[idx]
    if kind == "relation":
        return kg.relation_names[idx]
    return kg.class_names[idx]


def _neighborhood(kg, kind: str, idx: int, cap: int = 25) -> dict:
    if kind == "entity":
        triples = [
            [kg.entity_names[idx], kg.relation_names[r], kg.entity_names[t]]
            for r, t in kg.out_edges(idx)[:cap]
            if not kg.is_inverse(r)
        ]
        classes = [kg.class_names[c] for c in kg.classes_of(idx)]
        return {"name": kg.entity_names[idx], "triples": triples, "classes": classes}
    if kind == "relation":
        triples = [
            [kg.entity_names[h], kg.relation_names[r], kg.entity_names[t]]
            for h, r, t in kg.rel_triplets
            if r == idx
        ][:cap]
        return {"name": kg.relation_names[idx], "triples": triples, "classes": []}
    members = [kg.entity_names[e] for e, c in kg.type_triplets if c == idx][:cap]
    return {"name": kg.class_names[idx], "triples": [], "classes": members}


# ---------------------------------------------------------------------------
# FastAPI app
# ---------------------------------------------------------------------------

def create_app(session: Session, frontend_dir: str | Path | None = None):
    from fastapi import Body, FastAPI, HTTPException
    from fastapi.staticfiles import StaticFiles

    app = FastAPI(title="kgalign annotation service")

    @app.get("/status")
    def status():
        return session.status_payload()

    @app.get("/batch")
    def batch():
        return session.get_batch()

    @app.post("/labels")
    def labels(payload: dict = Body(...)):
        try:
            round_token = int(payload["round"])
            entries = [(item["pair_id"], item["label"]) for item in payload["labels"]]
            for _, lab in entries:
                if lab not in ("match", "non-match"):
                    raise HTTPException(status_code=422, detail=f"bad label {lab!r}")
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        try:
            return session.submit_labels(round_token, entries)
        except StaleBatch as exc:
            raise HTTPException(status_code=409, detail=str(exc))

    @app.get("/metrics")
    def metrics():
        return {"records": session.state.records}

    @app.get("/pair/{pid}/context")
    def context(pid: str):
        try:
            return session.pair_context(pid)
        except (ValueError, IndexError):
            raise HTTPException(status_code=404, detail=f"unknown pair {pid!r}")

    if frontend_dir and Path(frontend_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(frontend_dir), html=True), name="ui")
    return app


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _load_cfg(config_path, **overrides) -> Config:
    if config_path:
        return load_config(config_path, overrides)
    clean = {k: v for k, v in overrides.items() if v is not None}
    return Config(**clean).validate()


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (FileNotFoundError, DatasetError) as exc:
            _fail(EXIT_MISSING_FILE, str(exc))
        except ConfigError as exc:
            _fail(EXIT_BAD_CONFIG, str(exc))
        except DivergenceError as exc:
            _fail(EXIT_DIVERGED, str(exc))

    wrapper.__name__ = fn.__name__
    return wrapper


@click.group()
def main():
    """Joint active alignment of two knowledge graphs."""


@main.command()
@click.option("--out", required=True, type=click.Path())
@click.option("--entities", default=100, type=int)
@click.option("--relations", default=8, type=int)
@click.option("--classes", default=4, type=int)
@click.option("--density", default=2.0, type=float)
@click.option("--noise", default=0.0, type=float)
@click.option("--dangling", default=0.0, type=float)
@click.option("--seed", default=0, type=int)
@_guarded
def synth(out, entities, relations, classes, density, noise, dangling, seed):
    """Generate a synthetic dataset pair with exact gold links."""
    try:
        spec = SynthSpec(entities, relations, classes, density, noise, dangling)
        kg1, kg2, links = synth_kg_pair(spec, seed)
    except ValueError as exc:
        _fail(EXIT_BAD_CONFIG, str(exc))
    save_dataset(kg1, kg2, links, out)
    click.echo(json.dumps({
        "entities": [kg1.n_entities, kg2.n_entities],
        "relations": [len(kg1.base_relations()), len(kg2.base_relations())],
        "classes": [kg1.n_classes, kg2.n_classes],
        "entity_matches": len(links.entity_matches),
    }))


@main.command()
@click.option("--data", required=True, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=None, type=int)
@click.option("--epochs", default=None, type=int)
@_guarded
def train(data, config_path, out, seed, epochs):
    """Pretrain embeddings and the alignment model; write a checkpoint."""
    cfg = _load_cfg(config_path, seed=seed, epochs=epochs)
    kg1, kg2, links = load_dataset(data)
    state = prepare_loop(kg1, kg2, links, cfg)
    record_metrics(state)
    save_session_checkpoint(out, state)
    click.echo(json.dumps(state.records[-1], sort_keys=True))


@main.command("eval")
@click.option("--data", required=True, type=click.Path())
@click.option("--ckpt", required=True, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path())
@click.option("--seed", default=None, type=int)
@_guarded
def eval_cmd(data, ckpt, config_path, seed):
    """Evaluate a checkpoint on the held-out test split."""
    cfg = _load_cfg(config_path, seed=seed)
    kg1, kg2, links = load_dataset(data)
    s1, s2, model, meta = load_session_checkpoint(ckpt)
    from .align import compute_derived

    feats = compute_derived(model, s1, s2, kg1, kg2)
    _, test_links, _ = split_gold(links, cfg, np.random.default_rng([cfg.seed, 1]))
    report = evaluate(model, s1, s2, feats, kg1, kg2, test_links)
    click.echo(json.dumps(report.as_dict(), sort_keys=True))


@main.command()
@click.option("--data", required=True, type=click.Path())
@click.option("--ckpt", required=True, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path())
@click.option("--batch-size", default=None, type=int)
@click.option("--selector", default=None, type=str)
@click.option("--seed", default=None, type=int)
@click.option("--out", default=None, type=click.Path())
@_guarded
def select(data, ckpt, config_path, batch_size, selector, seed, out):
    """Emit one selection batch as tab-separated text."""
    cfg = _load_cfg(config_path, seed=seed, selector=selector,
                    budget=batch_size)
    kg1, kg2, links = load_dataset(data)
    state = prepare_loop(kg1, kg2, links, cfg)
    batch = select_batch(state, cfg.budget)
    probs = pool_match_probabilities(state.model, state.s1, state.s2, state.feats, state.pool)
    lines = []
    for pair in batch:
        lines.append(
            f"{pair.kind}\t{_element_name(kg1, pair.kind, pair.left)}"
            f"\t{_element_name(kg2, pair.kind, pair.right)}"
            f"\t{0.0:.6f}\t{probs.get(pair, 0.0):.6f}"
        )
    text = "\n".join(lines) + ("\n" if lines else "")
    if out:
        Path(out).write_text(text)
    else:
        click.echo(text, nl=False)


@main.command()
@click.option("--data", required=True, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path())
@click.option("--selector", default=None, type=str)
@click.option("--budget", "total_budget", default=None, type=int)
@click.option("--rounds", default=None, type=int)
@click.option("--seed", default=None, type=int)
@click.option("--out", required=True, type=click.Path())
@_guarded
def loop(data, config_path, selector, total_budget, rounds, seed, out):
    """Run the fully simulated active-alignment loop."""
    cfg = _load_cfg(config_path, selector=selector, total_budget=total_budget,
                    rounds=rounds, seed=seed)
    kg1, kg2, links = load_dataset(data)
    out_dir = Path(out)
    state = prepare_loop(kg1, kg2, links, cfg)
    oracle = OracleSim(links)
    record_metrics(state)
    total = cfg.total_budget if cfg.total_budget >= 0 else cfg.rounds * cfg.budget
    while state.labels_used < total and state.round < cfg.rounds:
        batch = select_batch(state, min(cfg.budget, total - state.labels_used))
        if not batch:
            break
        run_round(state, oracle, batch)
        record_metrics(state)
    write_reports(state.records, out_dir)
    save_session_checkpoint(out_dir / "final.ckpt", state)
    click.echo(json.dumps(state.records[-1], sort_keys=True))


@main.command()
@click.option("--data", required=True, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path())
@click.option("--session", "session_dir", required=True, type=click.Path())
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8000, type=int)
@click.option("--frontend", "frontend_dir", default=None, type=click.Path())
@click.option("--seed", default=None, type=int)
@_guarded
def serve(data, config_path, session_dir, host, port, frontend_dir, seed):
    """Start the HTTP annotation service for one session."""
    import uvicorn

    cfg = _load_cfg(config_path, seed=seed)
    kg1, kg2, links = load_dataset(data)
    session = Session(kg1, kg2, links, cfg, session_dir)
    if frontend_dir is None:
        guess = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        frontend_dir = guess if guess.is_dir() else None
    app = create_app(session, frontend_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
