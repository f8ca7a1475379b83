"""Generational search loop.

Each generation: train whatever population members are still unevaluated,
expand the pool with pruned-and-fine-tuned variants of every member, select
parents (one third from unpruned candidates, two thirds from pruned ones,
by accuracy), produce children by grouped crossover plus mutation of the
leftovers, gate children on the parameter budget, let the freshly retrained
accuracy predictor discard the unpromising half, and seed the survivors
with weights inherited from their parents.  The best candidate seen so far
is always carried over unmodified (elitism), which makes best-so-far
accuracy non-decreasing across generations.

Crossover groups: parents sorted by accuracy are split into thirds A/B/C
(remainders to the earlier groups).  Consecutive shuffled pairs within A and
within B cross with probability ``p_intra``; remaining cross-group pairs
from (A,B), (A,C), (B,C) cross with probability ``p_inter``; whoever is
still uncrossed emits one mutated child.  A crossover consumes both parents
for the round and emits two children, so the child count always equals the
parent count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn, predictor as predictor_mod, pruner as pruner_mod
from .data import Dataset
from .genome import (EncodedGenome, Genome, SearchSpaceConfig, build_layout,
                     crossover_with_cuts, decode, encode, mutate)
from .network import NetworkSpec, build, check_constraint
from .rng import derive_rng


@dataclass
class Candidate:
    id: int
    genome: Genome
    encoded: EncodedGenome
    spec: NetworkSpec
    state: dict[str, np.ndarray] | None
    accuracy: float | None
    generation: int
    parents: tuple[int, ...] = ()
    pruned_from: int | None = None
    op: str = "init"
    predicted_score: float | None = None
    diverged: bool = False

    @property
    def params(self) -> int:
        return self.spec.param_count

    @property
    def evaluated(self) -> bool:
        return self.accuracy is not None


@dataclass(frozen=True)
class EvolveConfig:
    pop_init: int = 12
    pop_rest: int = 6
    generations: int = 5
    p_intra: float = 0.5
    p_inter: float = 0.3
    p_mutate: float = 0.02
    epochs_gen1: int = 3
    epochs_rest: int = 2
    finetune_epochs: int = 2
    prune_samples: int = 20
    prune_keep: int = 3

    def __post_init__(self):
        if not 3 <= self.pop_rest <= self.pop_init:
            raise ValueError("need 3 <= pop_rest <= pop_init")
        for p in (self.p_intra, self.p_inter, self.p_mutate):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must be in [0, 1]")
        if self.prune_keep > self.prune_samples:
            raise ValueError("prune_keep must be <= prune_samples")

    @property
    def n_parents(self) -> int:
        # elite + ceil(n_parents/2) filtered children == pop_rest
        return 2 * (self.pop_rest - 1)


@dataclass
class SearchContext:
    """Everything run_generation needs besides the population itself."""

    space: SearchSpaceConfig
    train_ds: Dataset
    val_ds: Dataset
    num_classes: int
    input_size: int
    input_channels: int
    max_params: int
    seed: int
    momentum: float = 0.9
    weight_decay: float = 5e-4
    calib_batches: int = 20
    calib_batch_size: int = 64
    predictor_cfg: predictor_mod.PredictorConfig = field(
        default_factory=predictor_mod.PredictorConfig)
    cv_folds: int = 5
    prune_enabled: bool = True
    freeze: object = staticmethod(lambda g: g)  # search-space-mode gene freeze
    log: object = staticmethod(lambda event: None)
    map_fn: object = staticmethod(lambda fn, items: [fn(it) for it in items])
    next_id: int = 0
    archive: dict[int, Candidate] = field(default_factory=dict)
    pairs: list = field(default_factory=list)
    best_id: int | None = None
    total_train_epochs: int = 0

    def allocate_id(self) -> int:
        i = self.next_id
        self.next_id += 1
        return i

    def build_spec(self, genome: Genome) -> NetworkSpec:
        return build(genome, self.space, self.num_classes, self.input_size,
                     self.input_channels)

    def register(self, cand: Candidate) -> Candidate:
        self.archive[cand.id] = cand
        return cand

    def record_pair(self, cand: Candidate) -> None:
        self.pairs.append((cand.encoded, cand.accuracy))

    def update_best(self, cand: Candidate) -> None:
        cur = self.archive.get(self.best_id) if self.best_id is not None else None
        if cur is None or (cand.accuracy, -cand.params, -cand.id) > \
                (cur.accuracy, -cur.params, -cur.id):
            self.best_id = cand.id

    @property
    def best(self) -> Candidate | None:
        return self.archive.get(self.best_id) if self.best_id is not None else None


def sample_initial_population(ctx: SearchContext, cfg: EvolveConfig):
    """Constraint-feasible random candidates; infeasible draws are resampled
    and counted so the rejection rate can be logged."""
    from .genome import random_genome
    population = []
    rejected = 0
    rng = derive_rng(ctx.seed, "init")
    while len(population) < cfg.pop_init:
        g = ctx.freeze(random_genome(ctx.space, rng))
        spec = ctx.build_spec(g)
        if not check_constraint(spec, ctx.max_params):
            rejected += 1
            if rejected > 1000 * cfg.pop_init:
                raise RuntimeError("cannot sample a feasible population; "
                                   "max_params is too tight for this space")
            continue
        cid = ctx.allocate_id()
        cand = Candidate(
            id=cid, genome=g, encoded=encode(g, ctx.space), spec=spec,
            state=nn.init_state(spec, derive_rng(ctx.seed, "winit", cid)),
            accuracy=None, generation=1, op="init")
        population.append(ctx.register(cand))
    return population, rejected


def select_parents(evaluated: list[Candidate], n: int) -> list[Candidate]:
    """Top ceil(n/3) unpruned plus top pruned candidates by accuracy.

    A short pool borrows from the other; ties break toward the lower id.
    Candidates without a measured accuracy are never eligible.
    """
    evaluated = [c for c in evaluated if c.accuracy is not None]
    if not evaluated:
        raise ValueError("no evaluated candidates to select from")
    key = lambda c: (-c.accuracy, c.id)
    unpruned = sorted((c for c in evaluated if c.pruned_from is None), key=key)
    pruned = sorted((c for c in evaluated if c.pruned_from is not None), key=key)
    n = min(n, len(evaluated))
    want_unpruned = math.ceil(n / 3)
    take_unpruned = min(want_unpruned, len(unpruned))
    take_pruned = min(n - take_unpruned, len(pruned))
    take_unpruned = min(n - take_pruned, len(unpruned))  # backfill a short pruned pool
    return unpruned[:take_unpruned] + pruned[:take_pruned]


@dataclass
class ChildProposal:
    encoded: EncodedGenome
    op: str  # crossover | mutation
    base_parent: Candidate
    other_parent: Candidate | None = None
    cuts: tuple[int, int] | None = None
    genome: Genome | None = None
    spec: NetworkSpec | None = None
    predicted_score: float | None = None

    @property
    def parent_ids(self) -> tuple[int, ...]:
        if self.other_parent is None:
            return (self.base_parent.id,)
        return (self.base_parent.id, self.other_parent.id)


def group_parents(parents: list[Candidate]) -> list[list[Candidate]]:
    """Thirds by descending accuracy; remainders go to the earlier groups."""
    ranked = sorted(parents, key=lambda c: (-c.accuracy, c.id))
    n = len(ranked)
    base, rem = divmod(n, 3)
    sizes = [base + (1 if i < rem else 0) for i in range(3)]
    groups, at = [], 0
    for s in sizes:
        groups.append(ranked[at:at + s])
        at += s
    return groups


def group_and_cross(parents: list[Candidate], p_intra: float, p_inter: float,
                    p_mutate: float, rng) -> list[ChildProposal]:
    if len(parents) < 3:
        raise ValueError("need at least 3 parents for grouped crossover")
    groups = group_parents(parents)
    consumed: set[int] = set()
    children: list[ChildProposal] = []

    def cross(a: Candidate, b: Candidate):
        child_a, child_b, cuts = crossover_with_cuts(a.encoded, b.encoded, rng)
        children.append(ChildProposal(child_a, "crossover", a, b, cuts))
        children.append(ChildProposal(child_b, "crossover", b, a, cuts))
        consumed.update((a.id, b.id))

    # intra-group: shuffled consecutive pairs inside A and inside B
    for group in groups[:2]:
        order = [group[i] for i in rng.permutation(len(group))]
        for a, b in zip(order[::2], order[1::2]):
            if rng.random() < p_intra:
                cross(a, b)
    # inter-group pairs over whoever is left
    pool = []
    for gi in range(3):
        for gj in range(gi + 1, 3):
            for a in groups[gi]:
                for b in groups[gj]:
                    pool.append((a, b))
    order = rng.permutation(len(pool))
    for k in order:
        a, b = pool[int(k)]
        if a.id in consumed or b.id in consumed:
            continue
        if rng.random() < p_inter:
            cross(a, b)
    # the remaining unchanged parents each emit one mutant
    for c in sorted(parents, key=lambda c: c.id):
        if c.id not in consumed:
            children.append(ChildProposal(mutate(c.encoded, p_mutate, rng),
                                          "mutation", c))
    return children


def donor_chooser(proposal: ChildProposal, space: SearchSpaceConfig,
                  num_classes: int):
    """Per-layer donor pick for two-parent children.

    The donor is the parent whose gene segment the child carries at the
    layer's defining gene (convs: their kernel gene; hidden FCs: their width
    gene; the classifier: the FC-count gene; shortcuts: their bit).  A cut
    through the middle of the gene is ambiguous and defers to the
    higher-accuracy parent.
    """
    if proposal.other_parent is None:
        return lambda layer: 0
    layout = {f.name: f for f in build_layout(space)}
    u, v = proposal.cuts
    ambiguous = 0 if proposal.base_parent.accuracy >= \
        proposal.other_parent.accuracy else 1

    def gene_name(layer):
        if layer.role == "conv":
            return f"kernel.s{layer.stage_index}.l{layer.slot_index}"
        if layer.role == "fc":
            if layer.out_channels == num_classes:
                return "fc_count"
            return f"prune.fc{layer.slot_index}"
        return f"shortcut.{layer.from_stage}.{layer.to_stage}"

    def choose(layer) -> int:
        f = layout[gene_name(layer)]
        lo, hi = f.offset, f.offset + f.width
        if u <= lo and hi <= v:
            return 1  # segment swapped in from the other parent
        if hi <= u or lo >= v:
            return 0
        return ambiguous

    return choose


def inherit_weights(child_spec: NetworkSpec, parent_specs, parent_states,
                    donor_of=None, rng=0) -> dict[str, np.ndarray]:
    """Child state: copied overlap slices from the donor parent per layer,
    fresh He initialization wherever there is no usable match."""
    state = nn.init_state(child_spec, rng)
    parent_layers = [{l.key: l for l in ps.layers} for ps in parent_specs]
    for layer in child_spec.layers:
        if not layer.trainable:
            continue
        di = donor_of(layer) if donor_of is not None else 0
        src_layer = parent_layers[di].get(layer.key)
        if src_layer is None or src_layer.role != layer.role \
                or src_layer.kernel != layer.kernel:
            continue
        src = parent_states[di]
        name = layer.name
        co = min(layer.out_channels, src_layer.out_channels)
        ci = min(layer.in_channels, src_layer.in_channels)
        state[f"{name}.w"][:co, :ci] = src[f"{name}.w"][:co, :ci]
        state[f"{name}.b"][:co] = src[f"{name}.b"][:co]
        if layer.has_bn:
            for suf in ("gamma", "beta", "rmean", "rvar"):
                state[f"{name}.{suf}"][:co] = src[f"{name}.{suf}"][:co]
    return state


# ---------------------------------------------------------------------------
# per-candidate work items (module-level so a process pool can run them)

def _train_task(args):
    spec, state, images, labels, cfg = args
    try:
        losses = nn.train(spec, state, images, labels, cfg)
        return state, losses, False
    except nn.TrainingDiverged:
        return state, [], True


def _prune_task(args):
    """propose_and_select plus fine-tuning of the kept strategies, bundled
    so one parent is one unit of parallel work."""
    (cand_id, spec, state, space, train_ds, val_ds, num_samples, num_keep,
     seed, gen_index, max_params, calib_batches, calib_batch_size,
     finetune_epochs, momentum, weight_decay) = args
    records = []
    kept = pruner_mod.propose_and_select(
        cand_id, spec, state, space, train_ds, val_ds, num_samples, num_keep,
        seed + gen_index, max_params, calib_batches, calib_batch_size,
        log=records.append)
    tuned = []
    for k, pc in enumerate(kept):
        acc, _losses = pruner_mod.finetune_pruned(
            pc, train_ds, val_ds, finetune_epochs, momentum, weight_decay,
            seed=int(derive_rng(seed, "ft", gen_index, cand_id, k)
                     .integers(2 ** 31)))
        tuned.append((pc, acc))
    return tuned, records


def run_generation(population: list[Candidate], gen_index: int,
                   cfg: EvolveConfig, ctx: SearchContext,
                   make_children: bool = True):
    """One generation; returns (next_population, report dict)."""
    epochs = cfg.epochs_gen1 if gen_index == 1 else cfg.epochs_rest

    # (1) train whatever is not evaluated yet
    todo = [c for c in population if not c.evaluated]
    tasks = []
    for c in todo:
        tcfg = nn.TrainConfig(
            epochs=epochs, batch_size=c.genome.batch_size_int(),
            lr_init=c.genome.learning_rate, momentum=ctx.momentum,
            weight_decay=ctx.weight_decay,
            seed=int(derive_rng(ctx.seed, "train", c.id).integers(2 ** 31)))
        tasks.append((c.spec, c.state, ctx.train_ds.images, ctx.train_ds.labels, tcfg))
    for c, (state, losses, diverged) in zip(todo, ctx.map_fn(_train_task, tasks)):
        c.state = state
        c.diverged = diverged
        c.accuracy = 0.0 if diverged else nn.evaluate(
            c.spec, c.state, ctx.val_ds.images, ctx.val_ds.labels)
        ctx.total_train_epochs += epochs
        ctx.record_pair(c)
        ctx.update_best(c)
        ctx.log({"type": "candidate", "gen": gen_index, "id": c.id, "op": c.op,
                 "parents": list(c.parents), "pruned_from": c.pruned_from,
                 "encoding": c.encoded.to_bitstring(), "accuracy": round(c.accuracy, 4),
                 "params": c.params, "batch_size": c.genome.batch_size_int(),
                 "learning_rate": round(c.genome.learning_rate, 5),
                 "prune_rates": [round(l.prune_rate, 4)
                                 for l in c.spec.prunable_layers()],
                 "diverged": c.diverged,
                 "predicted_score": None if c.predicted_score is None
                 else round(float(c.predicted_score), 4)})

    # predictor scored these children last generation; how right was it?
    scored = [c for c in todo if c.predicted_score is not None]
    ktau_children = None
    if len(scored) >= 2:
        ktau_children = predictor_mod.kendall_tau(
            [c.predicted_score for c in scored], [c.accuracy for c in scored])

    # (2) adaptive pruning of every population member
    pruned_candidates: list[Candidate] = []
    if ctx.prune_enabled:
        tasks = [(c.id, c.spec, c.state, ctx.space, ctx.train_ds, ctx.val_ds,
                  cfg.prune_samples, cfg.prune_keep, ctx.seed, gen_index,
                  ctx.max_params, ctx.calib_batches, ctx.calib_batch_size,
                  cfg.finetune_epochs, ctx.momentum, ctx.weight_decay)
                 for c in population]
        for parent, (tuned, records) in zip(population, ctx.map_fn(_prune_task, tasks)):
            for rec in records:
                rec.update({"type": "prune_eval", "gen": gen_index})
                ctx.log(rec)
            for pc, acc in tuned:
                ctx.total_train_epochs += cfg.finetune_epochs
                cand = Candidate(
                    id=ctx.allocate_id(), genome=pc.spec.source_genome,
                    encoded=encode(pc.spec.source_genome, ctx.space),
                    spec=pc.spec, state=pc.state, accuracy=acc,
                    generation=gen_index, parents=(parent.id,),
                    pruned_from=parent.id, op="pruning")
                ctx.register(cand)
                ctx.record_pair(cand)
                ctx.update_best(cand)
                pruned_candidates.append(cand)
                ctx.log({"type": "candidate", "gen": gen_index, "id": cand.id,
                         "op": "pruning", "parents": [parent.id],
                         "pruned_from": parent.id,
                         "encoding": cand.encoded.to_bitstring(),
                         "accuracy": round(acc, 4), "params": cand.params,
                         "batch_size": cand.genome.batch_size_int(),
                         "learning_rate": round(cand.genome.learning_rate, 5),
                         "prune_rates": [round(l.prune_rate, 4)
                                         for l in cand.spec.prunable_layers()],
                         "diverged": False, "predicted_score": None})

    pool = population + pruned_candidates
    elite = ctx.best

    report = {
        "type": "generation", "gen": gen_index,
        "pop_size": len(population),
        "mean_acc": round(float(np.mean([c.accuracy for c in population])), 4),
        "max_acc": round(float(np.max([c.accuracy for c in population])), 4),
        "mean_params": round(float(np.mean([c.params for c in population])), 1),
        "pruned_made": len(pruned_candidates),
        "best_id": ctx.best_id,
        "best_acc": round(ctx.best.accuracy, 4),
        "ktau_prev_children": None if ktau_children is None
        else round(ktau_children, 4),
    }

    # predictor retraining on every accumulated pair, then the child pipeline
    model = None
    pred_event = {"type": "predictor", "gen": gen_index,
                  "pairs_count": len(ctx.pairs), "train_rmse": None,
                  "cv_ktau": None}
    if len(ctx.pairs) >= 2:
        model = predictor_mod.fit(
            ctx.pairs, ctx.predictor_cfg,
            seed=int(derive_rng(ctx.seed, "pred", gen_index).integers(2 ** 31)))
        pred_event["train_rmse"] = round(model.train_rmse, 5)
        if len(ctx.pairs) >= ctx.cv_folds * 2:  # every fold needs >= 2 points
            pred_event["cv_ktau"] = round(predictor_mod.crossval_ktau(
                ctx.pairs, ctx.cv_folds, ctx.predictor_cfg,
                seed=int(derive_rng(ctx.seed, "cv", gen_index).integers(2 ** 31)),
                map_fn=ctx.map_fn), 4)
    ctx.log(pred_event)
    report["cv_ktau"] = pred_event["cv_ktau"]

    if not make_children:
        ctx.log(report)
        return pool, report

    # (3)+(4) parents and raw children
    parents = select_parents(pool, cfg.n_parents)
    rng = derive_rng(ctx.seed, "cross", gen_index)
    proposals = group_and_cross(parents, cfg.p_intra, cfg.p_inter,
                                cfg.p_mutate, rng)

    # (5) constraint gate with re-mutation, then deduplication
    seen = {c.genome for c in ctx.archive.values()}
    gated: list[ChildProposal] = []
    dropped = 0
    for prop in proposals:
        attempt = prop.encoded
        ok = False
        for trial in range(11):  # original + up to 10 re-mutations
            g = ctx.freeze(decode(attempt, ctx.space))
            spec = ctx.build_spec(g)
            if check_constraint(spec, ctx.max_params):
                ok = True
                break
            attempt = mutate(attempt, max(cfg.p_mutate, 0.01),
                             derive_rng(ctx.seed, "regate", gen_index, prop.base_parent.id, trial))
        if not ok:
            dropped += 1
            continue
        if g in seen:  # duplicate of an existing candidate: one more mutation
            retry = mutate(attempt, max(cfg.p_mutate, 0.01),
                           derive_rng(ctx.seed, "dedup", gen_index, prop.base_parent.id))
            g2 = ctx.freeze(decode(retry, ctx.space))
            spec2 = ctx.build_spec(g2)
            if check_constraint(spec2, ctx.max_params):
                attempt, g, spec = retry, g2, spec2
        prop.encoded = attempt
        prop.genome, prop.spec = g, spec
        seen.add(g)
        gated.append(prop)

    # (6) predictor filter keeps the most promising half
    kept, kept_idx, scores = predictor_mod.filter_children(
        model, [p.encoded for p in gated])
    if scores is not None:
        for i, p in enumerate(gated):
            p.predicted_score = float(scores[i])
    kept_props = [gated[i] for i in kept_idx]
    if len(kept_props) > cfg.pop_rest - 1:
        ranked = sorted(range(len(kept_props)),
                        key=lambda i: (-(kept_props[i].predicted_score or 0.0), i))
        kept_props = [kept_props[i] for i in sorted(ranked[:cfg.pop_rest - 1])]

    # (7) weight inheritance; assemble the next population
    next_pop = [elite]
    for prop in kept_props:
        parents_specs = [prop.base_parent.spec]
        parents_states = [prop.base_parent.state]
        if prop.other_parent is not None:
            parents_specs.append(prop.other_parent.spec)
            parents_states.append(prop.other_parent.state)
        child_id = ctx.allocate_id()
        state = inherit_weights(prop.spec, parents_specs, parents_states,
                                donor_chooser(prop, ctx.space, ctx.num_classes),
                                rng=derive_rng(ctx.seed, "winit", child_id))
        cand = Candidate(
            id=child_id, genome=prop.genome, encoded=prop.encoded,
            spec=prop.spec, state=state, accuracy=None,
            generation=gen_index + 1, parents=prop.parent_ids, op=prop.op,
            predicted_score=prop.predicted_score)
        next_pop.append(ctx.register(cand))

    report["children_kept"] = len(kept_props)
    report["children_dropped"] = dropped + (len(gated) - len(kept_props))
    ctx.log(report)

    if len(next_pop) < 3:
        raise RuntimeError(
            f"population extinction at generation {gen_index}: "
            f"{len(next_pop)} candidates survive (constraint too tight?)")

    # states of candidates that left the population are no longer needed
    keep_ids = {c.id for c in next_pop}
    for c in pool:
        if c.id not in keep_ids:
            c.state = None
    return next_pop, report
