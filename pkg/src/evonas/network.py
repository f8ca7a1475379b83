"""Lowering a genome to a concrete layer graph.

A network is ``num_stages`` blocks of conv+BN+ReLU layers with a 2x2 max-pool
after every stage, followed by ``fc_count`` fully connected layers on the
flattened features (hidden FCs get ReLU, the last FC is the classifier).
Channel counts are the per-stage base channels scaled by each layer's pruning
rate, rounded half-up with a floor of 1.

Shortcut bits connect stage outputs.  The source is stage i's output after
its pool, the destination is stage j's output before its pool, so an
adjacent-stage connection is spatially aligned.  Kind assignment:

    adjacent stages, equal channel counts  -> identity add
    anything else                          -> 1x1 conv (+BN), stride
                                              2^(j-i-1) to align spatial size

Shortcut convs are not independently prunable; their widths follow the last
conv of their endpoint stages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .genome import Genome, SearchSpaceConfig


class BuildError(ValueError):
    pass


def scaled_width(base: int, rate: float) -> int:
    """Channels kept when pruning `base` at `rate`: round half-up, floor 1.

    Shared by the builder and the weight slicer; the two must agree exactly.
    """
    return max(1, int(math.floor(base * rate + 0.5)))


@dataclass(frozen=True)
class LayerSpec:
    role: str  # conv | fc | maxpool | shortcut_identity | shortcut_conv1x1
    stage_index: int | None
    slot_index: int | None
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    prune_rate: float = 1.0
    from_stage: int | None = None
    to_stage: int | None = None
    has_bn: bool = False

    @property
    def key(self) -> tuple:
        """Identity used for weight inheritance matching."""
        if self.role == "conv":
            return ("conv", self.stage_index, self.slot_index)
        if self.role == "fc":
            return ("fc", self.slot_index)
        if self.role.startswith("shortcut"):
            return ("short", self.from_stage, self.to_stage)
        return ("pool", self.stage_index)

    @property
    def name(self) -> str:
        """State-tensor name prefix, e.g. conv.s1.l0 / fc.0 / short.0.2."""
        if self.role == "conv":
            return f"conv.s{self.stage_index}.l{self.slot_index}"
        if self.role == "fc":
            return f"fc.{self.slot_index}"
        if self.role.startswith("shortcut"):
            return f"short.{self.from_stage}.{self.to_stage}"
        return f"pool.s{self.stage_index}"

    @property
    def trainable(self) -> bool:
        return self.role in ("conv", "fc", "shortcut_conv1x1")

    def param_count(self) -> int:
        if self.role in ("conv", "shortcut_conv1x1"):
            k = self.kernel
            n = self.out_channels * self.in_channels * k * k + self.out_channels
            if self.has_bn:
                n += 2 * self.out_channels  # gamma + beta
            return n
        if self.role == "fc":
            return self.out_channels * self.in_channels + self.out_channels
        return 0


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    shortcuts: tuple[tuple[int, int, str], ...]
    param_count: int
    source_genome: Genome
    input_channels: int
    input_size: int
    num_classes: int

    def conv_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.role == "conv"]

    def fc_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.role == "fc"]

    def stage_out_channels(self) -> list[int]:
        """Output channels of the last conv in each stage."""
        out: dict[int, int] = {}
        for l in self.conv_layers():
            out[l.stage_index] = l.out_channels
        return [out[s] for s in sorted(out)]

    def prunable_layers(self) -> list[LayerSpec]:
        """Layers carrying their own pruning rate: convs + hidden FCs."""
        fcs = self.fc_layers()
        return self.conv_layers() + fcs[:-1]


def resolve_shortcuts(g: Genome, stage_channels: list[int]) -> list[tuple[int, int, str]]:
    """Kind of each set shortcut bit given post-pruning stage channels."""
    n = len(stage_channels)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    out = []
    for bit, (i, j) in zip(g.shortcut_bits, pairs):
        if not bit:
            continue
        if j == i + 1 and stage_channels[i] == stage_channels[j]:
            out.append((i, j, "identity"))
        else:
            out.append((i, j, "conv1x1"))
    return out


def build(
    g: Genome,
    cfg: SearchSpaceConfig,
    num_classes: int,
    input_size: int = 32,
    input_channels: int = 3,
) -> NetworkSpec:
    """Instantiate the layer graph for a genome.

    Raises BuildError if the input cannot survive one 2x2 pool per stage.
    """
    min_size = 2 ** cfg.num_stages
    if input_size < min_size or input_size % min_size != 0:
        raise BuildError(
            f"input size {input_size} cannot survive {cfg.num_stages} poolings; "
            f"need a multiple of {min_size} (minimum {min_size})"
        )

    layers: list[LayerSpec] = []
    stage_out: list[int] = []
    c = input_channels
    for s in range(cfg.num_stages):
        for l in range(cfg.max_layers_per_stage):
            k = g.stage_kernels[s][l]
            if k == 0:
                continue
            rate = g.prune_rate_for(cfg, ("conv", s, l))
            out_c = scaled_width(cfg.base_channels[s], rate)
            layers.append(
                LayerSpec("conv", s, l, c, out_c, k, prune_rate=rate, has_bn=True)
            )
            c = out_c
        if not any(l.role == "conv" and l.stage_index == s for l in layers):
            raise BuildError(f"stage {s} has no layers; genome was not repaired")
        stage_out.append(c)

    shortcuts = resolve_shortcuts(g, stage_out)
    stage_layers = layers
    layers = []
    for s in range(cfg.num_stages):
        layers.extend(l for l in stage_layers if l.stage_index == s)
        for (i, j, kind) in shortcuts:
            if j != s:
                continue
            stride = 2 ** (j - i - 1)
            if kind == "identity":
                layers.append(
                    LayerSpec("shortcut_identity", None, None, stage_out[i],
                              stage_out[j], 0, stride=1, from_stage=i, to_stage=j)
                )
            else:
                layers.append(
                    LayerSpec("shortcut_conv1x1", None, None, stage_out[i],
                              stage_out[j], 1, stride=stride, from_stage=i,
                              to_stage=j, has_bn=True)
                )
        layers.append(LayerSpec("maxpool", s, None, stage_out[s], stage_out[s], 2, stride=2))

    spatial = input_size // min_size
    c_in = stage_out[-1] * spatial * spatial
    for k in range(g.fc_count):
        last = k == g.fc_count - 1
        if last:
            out_c, rate = num_classes, 1.0
        else:
            rate = g.prune_rate_for(cfg, ("fc", k))
            out_c = scaled_width(cfg.base_fc_width, rate)
        layers.append(LayerSpec("fc", None, k, c_in, out_c, 0, prune_rate=rate))
        c_in = out_c

    total = sum(l.param_count() for l in layers)
    return NetworkSpec(
        layers=tuple(layers),
        shortcuts=tuple(shortcuts),
        param_count=total,
        source_genome=g,
        input_channels=input_channels,
        input_size=input_size,
        num_classes=num_classes,
    )


def check_constraint(spec: NetworkSpec, max_params: int) -> bool:
    """Hard resource gate: strictly fewer parameters than the budget."""
    return spec.param_count < max_params


def with_param_count(spec: NetworkSpec) -> NetworkSpec:
    """Recompute the parameter count from the layer list."""
    return replace(spec, param_count=sum(l.param_count() for l in spec.layers))


def spec_to_dict(spec: NetworkSpec) -> dict:
    """JSON-serializable structural form (checkpoints must not rebuild specs
    from genomes: slicing can delete shortcuts and clamp gene rates)."""
    from dataclasses import asdict
    d = asdict(spec)
    d["layers"] = [asdict(l) for l in spec.layers]
    d["shortcuts"] = [list(s) for s in spec.shortcuts]
    g = spec.source_genome
    d["source_genome"] = {
        "stage_kernels": [list(r) for r in g.stage_kernels],
        "fc_count": g.fc_count,
        "shortcut_bits": list(g.shortcut_bits),
        "prune_rates": list(g.prune_rates),
        "batch_size": g.batch_size,
        "learning_rate": g.learning_rate,
    }
    return d


def spec_from_dict(d: dict) -> NetworkSpec:
    gd = d["source_genome"]
    genome = Genome(
        stage_kernels=tuple(tuple(r) for r in gd["stage_kernels"]),
        fc_count=gd["fc_count"],
        shortcut_bits=tuple(gd["shortcut_bits"]),
        prune_rates=tuple(gd["prune_rates"]),
        batch_size=gd["batch_size"],
        learning_rate=gd["learning_rate"],
    )
    layers = tuple(LayerSpec(**l) for l in d["layers"])
    return NetworkSpec(
        layers=layers,
        shortcuts=tuple(tuple(s) for s in d["shortcuts"]),
        param_count=d["param_count"],
        source_genome=genome,
        input_channels=d["input_channels"],
        input_size=d["input_size"],
        num_classes=d["num_classes"],
    )


def render_spec(spec: NetworkSpec) -> str:
    """Human-readable layer-per-line description used in reports."""
    lines = [
        f"input {spec.input_channels}x{spec.input_size}x{spec.input_size}, "
        f"{spec.num_classes} classes, {spec.param_count} params"
    ]
    for l in spec.layers:
        if l.role == "conv":
            lines.append(
                f"  stage {l.stage_index} conv{l.kernel}x{l.kernel} "
                f"{l.in_channels}->{l.out_channels} p={l.prune_rate:.2f}"
            )
        elif l.role == "maxpool":
            lines.append(f"  stage {l.stage_index} maxpool 2x2")
        elif l.role == "shortcut_identity":
            lines.append(f"  shortcut {l.from_stage}->{l.to_stage} identity")
        elif l.role == "shortcut_conv1x1":
            lines.append(
                f"  shortcut {l.from_stage}->{l.to_stage} conv1x1 "
                f"{l.in_channels}->{l.out_channels} stride {l.stride}"
            )
        else:
            lines.append(
                f"  fc {l.in_channels}->{l.out_channels} p={l.prune_rate:.2f}"
            )
    return "\n".join(lines)
