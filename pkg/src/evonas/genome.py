"""Joint search space: network topology, per-layer pruning rates, training
hyperparameters, and their fixed-length binary encoding.

A genome describes one candidate completely:

    stage_kernels   per stage, one kernel size per layer slot; 0 = slot empty
    fc_count        number of fully connected layers (the last is the classifier)
    shortcut_bits   one bit per ordered stage pair (i, j), i < j
    prune_rates     one keep-rate per prunable slot, in [prune_min, prune_max]
    batch_size      training batch size (continuous gene, rounded at use)
    learning_rate   initial learning rate

The bit encoding is fixed-length under one ``SearchSpaceConfig`` so crossover
positions are homologous across all individuals:

    gene kind    width             value -> bits
    ---------    --------------    ----------------------------------------
    discrete     ceil(log2(n))     index of the choice, MSB first
    continuous   m (default 8)     int((v - lo) / (hi - lo) * 2^m), clamped
                                   to 2^m - 1 at v = hi, MSB first

Decoding wraps out-of-range discrete indices by modulo and reads continuous
genes as bucket midpoints, so any bit string decodes to a valid genome;
mutation and crossover can never leave the search space.  Stages whose slots
all decode to 0 are repaired (first slot forced to the smallest nonzero
kernel) to keep every pooling stage structurally present.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .rng import as_rng


@dataclass(frozen=True)
class SearchSpaceConfig:
    """Dimensions and value ranges of the joint search space."""

    num_stages: int = 5
    max_layers_per_stage: int = 3
    kernel_choices: tuple[int, ...] = (0, 3, 5, 7)
    fc_choices: tuple[int, ...] = (1, 2, 3)
    prune_range: tuple[float, float] = (0.3, 1.0)
    batch_range: tuple[float, float] = (64.0, 144.0)
    lr_range: tuple[float, float] = (0.01, 0.06)
    m_bits_continuous: int = 8
    base_channels: tuple[int, ...] = (64, 128, 256, 512, 512)
    base_fc_width: int = 256

    def __post_init__(self):
        if self.kernel_choices[0] != 0:
            raise ValueError("kernel_choices must contain 0 (empty slot) first")
        if list(self.kernel_choices) != sorted(set(self.kernel_choices)):
            raise ValueError("kernel_choices must be strictly increasing")
        for name in ("prune_range", "batch_range", "lr_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must satisfy min < max, got {(lo, hi)}")
        if self.prune_range[0] <= 0:
            raise ValueError("prune_range lower bound must be > 0")
        if len(self.base_channels) != self.num_stages:
            raise ValueError("base_channels length must equal num_stages")
        if self.num_stages < 1 or self.max_layers_per_stage < 1:
            raise ValueError("num_stages and max_layers_per_stage must be >= 1")
        if self.m_bits_continuous < 1 or self.m_bits_continuous > 16:
            raise ValueError("m_bits_continuous must be in [1, 16]")

    @property
    def shortcut_bit_count(self) -> int:
        return self.num_stages * (self.num_stages - 1) // 2

    @property
    def stage_pairs(self) -> tuple[tuple[int, int], ...]:
        """Ordered (from, to) stage pairs, one per shortcut bit."""
        n = self.num_stages
        return tuple((i, j) for i in range(n) for j in range(i + 1, n))

    @property
    def prune_slots(self) -> tuple[tuple, ...]:
        """Canonical prunable slots: every conv slot, every FC but the last."""
        conv = [
            ("conv", s, l)
            for s in range(self.num_stages)
            for l in range(self.max_layers_per_stage)
        ]
        fc = [("fc", k) for k in range(max(self.fc_choices) - 1)]
        return tuple(conv + fc)


@dataclass(frozen=True)
class Genome:
    """Decoded candidate configuration. See module docstring for fields."""

    stage_kernels: tuple[tuple[int, ...], ...]
    fc_count: int
    shortcut_bits: tuple[int, ...]
    prune_rates: tuple[float, ...]
    batch_size: float
    learning_rate: float

    def batch_size_int(self) -> int:
        return int(round(self.batch_size))

    def prune_rate_for(self, cfg: SearchSpaceConfig, slot: tuple) -> float:
        return self.prune_rates[cfg.prune_slots.index(slot)]


@dataclass(frozen=True)
class GeneField:
    name: str
    offset: int
    width: int
    kind: str  # "discrete" | "continuous"
    choices: tuple | None = None
    bounds: tuple[float, float] | None = None


@dataclass(frozen=True)
class EncodedGenome:
    """Fixed-length bit vector plus the gene layout that interprets it."""

    bits: tuple[int, ...]
    layout: tuple[GeneField, ...]

    def __post_init__(self):
        total = sum(f.width for f in self.layout)
        if len(self.bits) != total:
            raise ValueError(
                f"bit length {len(self.bits)} does not match layout width {total}"
            )

    def __len__(self) -> int:
        return len(self.bits)

    def to_bitstring(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)

    def field(self, name: str) -> GeneField:
        for f in self.layout:
            if f.name == name:
                return f
        raise KeyError(name)


@lru_cache(maxsize=None)
def build_layout(cfg: SearchSpaceConfig) -> tuple[GeneField, ...]:
    """Gene order: kernels, fc_count, shortcuts, prune rates, batch, lr."""
    fields: list[GeneField] = []
    offset = 0

    def add(name, width, kind, choices=None, bounds=None):
        nonlocal offset
        fields.append(GeneField(name, offset, width, kind, choices, bounds))
        offset += width

    kw = max(1, math.ceil(math.log2(len(cfg.kernel_choices))))
    for s in range(cfg.num_stages):
        for l in range(cfg.max_layers_per_stage):
            add(f"kernel.s{s}.l{l}", kw, "discrete", choices=cfg.kernel_choices)
    fw = max(1, math.ceil(math.log2(len(cfg.fc_choices))))
    add("fc_count", fw, "discrete", choices=cfg.fc_choices)
    for i, j in cfg.stage_pairs:
        add(f"shortcut.{i}.{j}", 1, "discrete", choices=(0, 1))
    m = cfg.m_bits_continuous
    for slot in cfg.prune_slots:
        tag = f"s{slot[1]}.l{slot[2]}" if slot[0] == "conv" else f"fc{slot[1]}"
        add(f"prune.{tag}", m, "continuous", bounds=cfg.prune_range)
    add("batch_size", m, "continuous", bounds=cfg.batch_range)
    add("learning_rate", m, "continuous", bounds=cfg.lr_range)
    return tuple(fields)


def encoded_length(cfg: SearchSpaceConfig) -> int:
    layout = build_layout(cfg)
    return layout[-1].offset + layout[-1].width


def _int_to_bits(value: int, width: int) -> list[int]:
    return [(value >> (width - 1 - i)) & 1 for i in range(width)]


def _bits_to_int(bits) -> int:
    value = 0
    for b in bits:
        value = (value << 1) | int(b)
    return value


def _encode_continuous(value: float, lo: float, hi: float, m: int) -> int:
    if not lo <= value <= hi:
        raise ValueError(f"value {value} outside declared range [{lo}, {hi}]")
    k = int((value - lo) / (hi - lo) * (1 << m))
    return min(k, (1 << m) - 1)  # v = hi would overflow m bits


def _decode_continuous(k: int, lo: float, hi: float, m: int) -> float:
    return lo + (k + 0.5) / (1 << m) * (hi - lo)


def smallest_nonzero_kernel(cfg: SearchSpaceConfig) -> int:
    return next(k for k in cfg.kernel_choices if k != 0)


def _gene_values(g: Genome, cfg: SearchSpaceConfig):
    """Genome fields flattened into layout order."""
    vals: list = []
    for s in range(cfg.num_stages):
        vals.extend(g.stage_kernels[s])
    vals.append(g.fc_count)
    vals.extend(g.shortcut_bits)
    vals.extend(g.prune_rates)
    vals.append(g.batch_size)
    vals.append(g.learning_rate)
    return vals


def encode(g: Genome, cfg: SearchSpaceConfig) -> EncodedGenome:
    """Encode a genome as a fixed-length bit vector (see module docstring)."""
    layout = build_layout(cfg)
    values = _gene_values(g, cfg)
    if len(values) != len(layout):
        raise ValueError("genome does not match config layout")
    bits: list[int] = []
    for field, value in zip(layout, values):
        if field.kind == "discrete":
            if value not in field.choices:
                raise ValueError(
                    f"{field.name}: value {value} not in choices {field.choices}"
                )
            bits.extend(_int_to_bits(field.choices.index(value), field.width))
        else:
            lo, hi = field.bounds
            bits.extend(
                _int_to_bits(_encode_continuous(float(value), lo, hi, field.width),
                             field.width)
            )
    return EncodedGenome(bits=tuple(bits), layout=layout)


def decode(e: EncodedGenome, cfg: SearchSpaceConfig) -> Genome:
    """Decode bits to a valid genome; see module docstring for the rules."""
    layout = build_layout(cfg)
    if layout != e.layout or len(e.bits) != encoded_length(cfg):
        raise ValueError("encoded genome layout does not match config")
    values: dict[str, float | int] = {}
    for field in layout:
        k = _bits_to_int(e.bits[field.offset:field.offset + field.width])
        if field.kind == "discrete":
            values[field.name] = field.choices[k % len(field.choices)]
        else:
            lo, hi = field.bounds
            values[field.name] = _decode_continuous(k, lo, hi, field.width)

    kernels = []
    for s in range(cfg.num_stages):
        row = [int(values[f"kernel.s{s}.l{l}"]) for l in range(cfg.max_layers_per_stage)]
        if all(k == 0 for k in row):
            row[0] = smallest_nonzero_kernel(cfg)
        kernels.append(tuple(row))

    prune = []
    for slot in cfg.prune_slots:
        tag = f"s{slot[1]}.l{slot[2]}" if slot[0] == "conv" else f"fc{slot[1]}"
        prune.append(float(values[f"prune.{tag}"]))

    return Genome(
        stage_kernels=tuple(kernels),
        fc_count=int(values["fc_count"]),
        shortcut_bits=tuple(int(values[f"shortcut.{i}.{j}"]) for i, j in cfg.stage_pairs),
        prune_rates=tuple(prune),
        batch_size=float(values["batch_size"]),
        learning_rate=float(values["learning_rate"]),
    )


def from_bitstring(s: str, cfg: SearchSpaceConfig) -> EncodedGenome:
    if set(s) - {"0", "1"}:
        raise ValueError("bit string may only contain '0' and '1'")
    return EncodedGenome(bits=tuple(int(c) for c in s), layout=build_layout(cfg))


def random_genome(cfg: SearchSpaceConfig, rng) -> Genome:
    """Sample every gene uniformly from its domain.

    Stages that come out with no layer get one random slot forced to a random
    nonzero kernel, so the result is always buildable.
    """
    rng = as_rng(rng)
    kernels = []
    for _ in range(cfg.num_stages):
        row = [int(rng.choice(cfg.kernel_choices)) for _ in range(cfg.max_layers_per_stage)]
        if all(k == 0 for k in row):
            slot = int(rng.integers(cfg.max_layers_per_stage))
            row[slot] = int(rng.choice(cfg.kernel_choices[1:]))
        kernels.append(tuple(row))
    lo_p, hi_p = cfg.prune_range
    lo_b, hi_b = cfg.batch_range
    lo_l, hi_l = cfg.lr_range
    return Genome(
        stage_kernels=tuple(kernels),
        fc_count=int(rng.choice(cfg.fc_choices)),
        shortcut_bits=tuple(int(b) for b in rng.integers(0, 2, cfg.shortcut_bit_count)),
        prune_rates=tuple(float(r) for r in rng.uniform(lo_p, hi_p, len(cfg.prune_slots))),
        batch_size=float(rng.uniform(lo_b, hi_b)),
        learning_rate=float(rng.uniform(lo_l, hi_l)),
    )


def swap_segment(a: EncodedGenome, b: EncodedGenome, u: int, v: int):
    """Exchange bits [u, v) between two genomes of one layout."""
    if a.layout != b.layout:
        raise ValueError("cannot cross genomes with different layouts")
    if not 0 <= u < v <= len(a):
        raise ValueError(f"cut points must satisfy 0 <= u < v <= {len(a)}")
    bits_a = list(a.bits)
    bits_b = list(b.bits)
    bits_a[u:v], bits_b[u:v] = bits_b[u:v], bits_a[u:v]
    return (EncodedGenome(bits=tuple(bits_a), layout=a.layout),
            EncodedGenome(bits=tuple(bits_b), layout=a.layout))


def crossover_with_cuts(a: EncodedGenome, b: EncodedGenome, rng):
    """Two-point crossover; returns (child_a, child_b, (u, v)).

    child_a keeps a's bits outside [u, v) and takes b's inside; child_b is
    the mirror image.
    """
    rng = as_rng(rng)
    u, v = sorted(int(x) for x in rng.choice(len(a) + 1, size=2, replace=False))
    child_a, child_b = swap_segment(a, b, u, v)
    return child_a, child_b, (u, v)


def crossover(a: EncodedGenome, b: EncodedGenome, rng):
    """Two-point crossover exchanging one homologous bit segment."""
    child_a, child_b, _ = crossover_with_cuts(a, b, rng)
    return child_a, child_b


def mutate(e: EncodedGenome, p_mutate: float, rng) -> EncodedGenome:
    """Flip each bit independently with probability ``p_mutate``."""
    if not 0.0 <= p_mutate <= 1.0:
        raise ValueError(f"p_mutate must be in [0, 1], got {p_mutate}")
    rng = as_rng(rng)
    flips = rng.random(len(e)) < p_mutate
    bits = tuple(int(b) ^ int(f) for b, f in zip(e.bits, flips))
    return EncodedGenome(bits=bits, layout=e.layout)
