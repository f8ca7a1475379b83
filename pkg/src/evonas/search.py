"""Run orchestration: full searches, the budget-matched random baseline,
checkpoint/resume, and report generation.

Every run writes one ``run.jsonl`` (one JSON object per event, ``type`` in
{candidate, prune_eval, generation, predictor, final}) plus per-generation
checkpoints that allow ``--resume``.  Two complete runs with the same config
and seed produce identical logs except for the ``ts`` wall-clock fields; a
resumed run reproduces the uninterrupted one because every random stream is
derived from (seed, generation, purpose, id) rather than carried state.
"""

from __future__ import annotations

import json
import multiprocessing
import os
import time
from pathlib import Path

import numpy as np

from . import data as data_mod, nn, predictor as predictor_mod
from .config import RunConfig, render_config
from .evolve import (Candidate, SearchContext, run_generation,
                     sample_initial_population)
from .genome import SearchSpaceConfig, encode, from_bitstring, random_genome
from .network import build, check_constraint, render_spec, spec_from_dict, \
    spec_to_dict
from .rng import derive_rng

GENERATION_DIR = "checkpoints"


class JsonlLogger:
    def __init__(self, path, keep_through_gen=None):
        self.path = Path(path)
        if keep_through_gen is None:
            self.path.write_text("")
        else:
            kept = []
            if self.path.exists():
                for line in self.path.read_text().splitlines():
                    try:
                        ev = json.loads(line)
                    except json.JSONDecodeError:
                        continue
                    if ev.get("type") != "final" and \
                            ev.get("gen", 0) <= keep_through_gen:
                        kept.append(line)
            self.path.write_text("\n".join(kept) + ("\n" if kept else ""))
        self._f = open(self.path, "a", encoding="utf-8")

    def __call__(self, event: dict) -> None:
        event = dict(event)
        event["ts"] = time.time()
        self._f.write(json.dumps(event, sort_keys=True) + "\n")
        self._f.flush()

    def close(self):
        self._f.close()


def _worker_init():
    import numba
    numba.set_num_threads(1)


def make_map_fn(jobs: int):
    if jobs <= 1:
        return lambda fn, items: [fn(it) for it in items]

    def mapper(fn, items):
        items = list(items)
        if len(items) <= 1:
            return [fn(it) for it in items]
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(min(jobs, len(items)), initializer=_worker_init) as pool:
            return pool.map(fn, items)

    return mapper


def effective_space(cfg: RunConfig) -> SearchSpaceConfig:
    """The arch-only space fixes a halved channel configuration."""
    if cfg.search_space_mode != "arch":
        return cfg.space
    halved = tuple(max(1, c // 2) for c in cfg.space.base_channels)
    from dataclasses import replace
    return replace(cfg.space, base_channels=halved)


def make_freeze(cfg: RunConfig):
    """Gene freezing per search-space mode (inactive genes pinned)."""
    from dataclasses import replace
    space = effective_space(cfg)
    mid_batch = sum(space.batch_range) / 2.0
    mid_lr = sum(space.lr_range) / 2.0
    mode = cfg.search_space_mode

    def freeze(g):
        if mode == "arch+pruning+hyp":
            return g
        g = replace(g, batch_size=mid_batch, learning_rate=mid_lr)
        if mode == "arch":
            g = replace(g, prune_rates=tuple(1.0 for _ in g.prune_rates))
        return g

    return freeze


def prepare_data(cfg: RunConfig, seed: int):
    """Dataset (loaded or synthesized), split, and normalization stats."""
    if cfg.data.path:
        ds = data_mod.load_dataset(cfg.data.path)
    else:
        ds = data_mod.generate_synthetic(cfg.data.classes, cfg.data.per_class,
                                         cfg.data.size, cfg.data.seed,
                                         cfg.data.channels)
    train, val = data_mod.split_dataset(ds, cfg.split_fraction,
                                        derive_rng(seed, "split"))
    mean, std = data_mod.norm_stats(train.images)
    return (data_mod.normalize(train, mean, std),
            data_mod.normalize(val, mean, std), mean, std, ds)


def _make_context(cfg: RunConfig, seed: int, log, jobs: int) -> SearchContext:
    train, val, mean, std, _ = prepare_data(cfg, seed)
    ctx = SearchContext(
        space=effective_space(cfg),
        train_ds=train, val_ds=val,
        num_classes=train.class_count,
        input_size=train.size, input_channels=train.channels,
        max_params=cfg.max_params, seed=seed,
        momentum=cfg.train.momentum, weight_decay=cfg.train.weight_decay,
        calib_batches=cfg.train.bn_calib_batches,
        calib_batch_size=cfg.train.calib_batch_size,
        predictor_cfg=cfg.predictor, cv_folds=cfg.cv_folds,
        prune_enabled=cfg.search_space_mode != "arch",
        freeze=make_freeze(cfg), log=log, map_fn=make_map_fn(jobs))
    ctx.norm_mean, ctx.norm_std = mean, std
    return ctx


# ---------------------------------------------------------------------------
# checkpointing

def _candidate_meta(c: Candidate) -> dict:
    return {
        "id": c.id, "encoding": c.encoded.to_bitstring(),
        "spec": spec_to_dict(c.spec), "accuracy": c.accuracy,
        "generation": c.generation, "parents": list(c.parents),
        "pruned_from": c.pruned_from, "op": c.op,
        "predicted_score": c.predicted_score, "diverged": c.diverged,
    }


def _candidate_from_meta(meta: dict, space: SearchSpaceConfig,
                         state=None) -> Candidate:
    spec = spec_from_dict(meta["spec"])
    return Candidate(
        id=meta["id"], genome=spec.source_genome,
        encoded=from_bitstring(meta["encoding"], space), spec=spec,
        state=state, accuracy=meta["accuracy"], generation=meta["generation"],
        parents=tuple(meta["parents"]), pruned_from=meta["pruned_from"],
        op=meta["op"], predicted_score=meta["predicted_score"],
        diverged=meta["diverged"])


def write_checkpoint(out_dir: Path, gen: int, population, ctx: SearchContext,
                     rejected_initial: int) -> None:
    ck = out_dir / GENERATION_DIR / f"gen{gen:02d}"
    (ck / "states").mkdir(parents=True, exist_ok=True)
    doc = {
        "gen": gen, "next_id": ctx.next_id, "best_id": ctx.best_id,
        "rejected_initial": rejected_initial,
        "total_train_epochs": ctx.total_train_epochs,
        "population": [c.id for c in population],
        "archive": [_candidate_meta(c) for c in
                    sorted(ctx.archive.values(), key=lambda c: c.id)],
    }
    (ck / "population.json").write_text(json.dumps(doc, sort_keys=True))
    for c in population:
        if c.state is not None:
            nn.save_state(c.state, ck / "states" / f"{c.id}.uenw")
    (ck / "COMPLETE").write_text("ok\n")


def latest_checkpoint(out_dir: Path):
    root = out_dir / GENERATION_DIR
    if not root.exists():
        return None
    done = sorted(p for p in root.iterdir() if (p / "COMPLETE").exists())
    return done[-1] if done else None


def load_checkpoint(ck: Path, ctx: SearchContext):
    doc = json.loads((ck / "population.json").read_text())
    for meta in doc["archive"]:
        ctx.register(_candidate_from_meta(meta, ctx.space))
    population = []
    for cid in doc["population"]:
        c = ctx.archive[cid]
        c.state = nn.load_state(ck / "states" / f"{cid}.uenw")
        population.append(c)
    ctx.next_id = doc["next_id"]
    ctx.best_id = doc["best_id"]
    ctx.total_train_epochs = doc["total_train_epochs"]
    ctx.pairs = [(c.encoded, c.accuracy) for c in
                 sorted(ctx.archive.values(), key=lambda c: c.id)
                 if c.accuracy is not None]
    return doc["gen"], population, doc["rejected_initial"]


# ---------------------------------------------------------------------------
# entry points

def run_search(cfg: RunConfig, seed: int, out_dir, jobs: int | None = None,
               resume: bool = False, stop_after_gen: int | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = cfg.jobs if jobs is None else jobs
    cfg_text = render_config(cfg)
    cfg_path = out / "config.txt"
    ck = latest_checkpoint(out) if resume else None
    if ck is not None:
        if cfg_path.read_text() != cfg_text:
            raise ValueError("resume refused: config differs from the run's")
        meta = json.loads((out / "meta.json").read_text())
        if meta["seed"] != seed:
            raise ValueError(f"resume refused: run was seeded {meta['seed']}")
    else:
        cfg_path.write_text(cfg_text)
        (out / "meta.json").write_text(json.dumps(
            {"kind": "search", "seed": seed}, sort_keys=True))

    gens = cfg.evolve.generations
    if ck is not None:
        # events after the checkpointed generation replay on resume
        keep = json.loads((ck / "population.json").read_text())["gen"]
        log = JsonlLogger(out / "run.jsonl", keep_through_gen=keep)
    else:
        log = JsonlLogger(out / "run.jsonl")
    ctx = _make_context(cfg, seed, log, jobs)

    if ck is not None:
        start_gen, population, rejected = load_checkpoint(ck, ctx)
        start_gen += 1
    else:
        population, rejected = sample_initial_population(ctx, cfg.evolve)
        start_gen = 1

    report = None
    for gen in range(start_gen, gens + 1):
        population, report = run_generation(
            population, gen, cfg.evolve, ctx, make_children=gen < gens)
        write_checkpoint(out, gen, population, ctx, rejected)
        if stop_after_gen is not None and gen >= stop_after_gen and gen < gens:
            log.close()
            return {"stopped_after_gen": gen, "out": str(out)}

    best = ctx.best
    final = {
        "type": "final", "gen": gens, "kind": "search",
        "mode": cfg.search_space_mode,
        "best": {
            "id": best.id, "accuracy": round(best.accuracy, 4),
            "params": best.params, "encoding": best.encoded.to_bitstring(),
            "batch_size": best.genome.batch_size_int(),
            "learning_rate": round(best.genome.learning_rate, 5),
            "stage_kernels": [list(r) for r in best.genome.stage_kernels],
            "fc_count": best.genome.fc_count,
            "shortcut_bits": list(best.genome.shortcut_bits),
            "prune_rates": [round(r, 4) for r in best.genome.prune_rates],
            "spec_text": render_spec(best.spec),
        },
        "budget_epochs": ctx.total_train_epochs,
        "rejected_initial": rejected,
        "norm_mean": [float(x) for x in ctx.norm_mean],
        "norm_std": [float(x) for x in ctx.norm_std],
    }
    log(final)
    (out / "best_spec.txt").write_text(render_spec(best.spec) + "\n")
    log.close()
    return final


def _random_task(args):
    spec, state, images, labels, tcfg, val_images, val_labels = args
    try:
        nn.train(spec, state, images, labels, tcfg)
        acc = nn.evaluate(spec, state, val_images, val_labels)
        return acc, False
    except nn.TrainingDiverged:
        return 0.0, True


def run_random_baseline(cfg: RunConfig, seed: int, budget_epochs: int,
                        out_dir, jobs: int | None = None) -> dict:
    """Train random feasible candidates at the searched per-candidate epoch
    count until the granted training-epoch budget is exhausted."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = cfg.jobs if jobs is None else jobs
    (out / "config.txt").write_text(render_config(cfg))
    (out / "meta.json").write_text(json.dumps(
        {"kind": "random", "seed": seed, "budget_granted": budget_epochs},
        sort_keys=True))
    log = JsonlLogger(out / "run.jsonl")

    train, val, mean, std, _ = prepare_data(cfg, seed)
    space = effective_space(cfg)
    freeze = make_freeze(cfg)
    epochs = cfg.evolve.epochs_gen1
    n_cands = budget_epochs // epochs
    rng = derive_rng(seed, "random_baseline")
    cands = []
    rejected = 0
    while len(cands) < n_cands:
        g = freeze(random_genome(space, rng))
        spec = build(g, space, train.class_count, train.size, train.channels)
        if not check_constraint(spec, cfg.max_params):
            rejected += 1
            if rejected > 1000 * max(n_cands, 1):
                raise RuntimeError("cannot sample feasible candidates")
            continue
        cands.append((g, spec))

    map_fn = make_map_fn(jobs)
    tasks = []
    for i, (g, spec) in enumerate(cands):
        state = nn.init_state(spec, derive_rng(seed, "rbinit", i))
        tcfg = nn.TrainConfig(
            epochs=epochs, batch_size=g.batch_size_int(),
            lr_init=g.learning_rate, momentum=cfg.train.momentum,
            weight_decay=cfg.train.weight_decay,
            seed=int(derive_rng(seed, "rbtrain", i).integers(2 ** 31)))
        tasks.append((spec, state, train.images, train.labels, tcfg,
                      val.images, val.labels))

    best = None
    for i, ((g, spec), (acc, diverged)) in enumerate(
            zip(cands, map_fn(_random_task, tasks))):
        log({"type": "candidate", "gen": 1, "id": i, "op": "random",
             "parents": [], "pruned_from": None,
             "encoding": encode(g, space).to_bitstring(),
             "accuracy": round(acc, 4), "params": spec.param_count,
             "batch_size": g.batch_size_int(),
             "learning_rate": round(g.learning_rate, 5),
             "prune_rates": [round(l.prune_rate, 4)
                             for l in spec.prunable_layers()],
             "diverged": diverged, "predicted_score": None})
        if best is None or (acc, -spec.param_count) > (best[1], -best[2]):
            best = (i, acc, spec.param_count, g, spec)
    final = {
        "type": "final", "gen": 1, "kind": "random",
        "mode": cfg.search_space_mode,
        "best": {
            "id": best[0], "accuracy": round(best[1], 4), "params": best[2],
            "encoding": encode(best[3], space).to_bitstring(),
            "batch_size": best[3].batch_size_int(),
            "learning_rate": round(best[3].learning_rate, 5),
            "spec_text": render_spec(best[4]),
        },
        "budget_epochs": len(cands) * epochs,
        "budget_granted": budget_epochs,
        "rejected_initial": rejected,
        "norm_mean": [float(x) for x in mean],
        "norm_std": [float(x) for x in std],
    }
    log(final)
    (out / "best_spec.txt").write_text(render_spec(best[4]) + "\n")
    log.close()
    return final


# ---------------------------------------------------------------------------
# reporting

def read_events(run_dir):
    """(events, corrupt_line_count) from a run directory's log."""
    events, corrupt = [], 0
    path = Path(run_dir) / "run.jsonl"
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        try:
            events.append(json.loads(line))
        except json.JSONDecodeError:
            corrupt += 1
    return events, corrupt


def report(run_dirs, out_dir) -> dict:
    """Per-generation CSVs, best-candidate spec blocks, and (for several
    runs) a comparison table.  Budget-matched pairs must actually match."""
    import csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"runs": [], "corrupt_lines": 0}
    rows_cmp = []
    budgets = {}
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        events, corrupt = read_events(run_dir)
        summary["corrupt_lines"] += corrupt
        name = run_dir.name
        gens = [e for e in events if e.get("type") == "generation"]
        finals = [e for e in events if e.get("type") == "final"]
        with open(out / f"{name}_generations.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["gen", "mean_params", "best_acc", "mean_acc", "cv_ktau"])
            for e in gens:
                w.writerow([e["gen"], e["mean_params"], e["best_acc"],
                            e["mean_acc"], e.get("cv_ktau")])
        if finals:
            fin = finals[-1]
            (out / f"{name}_best_spec.txt").write_text(
                fin["best"]["spec_text"] + "\n")
            kind = fin.get("kind", "search")
            budgets[name] = (kind, fin["budget_epochs"],
                             fin.get("budget_granted", fin["budget_epochs"]))
            rows_cmp.append([name, kind, fin["budget_epochs"],
                             fin["best"]["accuracy"], fin["best"]["params"]])
        summary["runs"].append(name)

    kinds = {k for k, _, _ in budgets.values()}
    if {"search", "random"} <= kinds:
        search_budgets = {b for k, b, _ in budgets.values() if k == "search"}
        random_granted = {g for k, _, g in budgets.values() if k == "random"}
        if len(search_budgets | random_granted) > 1:
            raise ValueError(
                f"budget mismatch between runs: search consumed {sorted(search_budgets)} "
                f"epochs but random was granted {sorted(random_granted)}; "
                "refusing to compare")
    if len(rows_cmp) >= 2:
        with open(out / "comparison.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["run", "kind", "budget_epochs", "best_acc", "best_params"])
            w.writerows(rows_cmp)
    return summary
