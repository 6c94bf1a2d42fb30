"""Prototype/replicate configuration: channel maps, layer groups, gate budgets
and the exact ledger of step-gate evaluations."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class LayerShape:
    """Dimensions of one gated layer."""

    channels: int
    height: int
    width: int

    def __post_init__(self):
        if min(self.channels, self.height, self.width) < 1:
            raise ConfigError(f"layer dimensions must be positive: {self}")

    @property
    def positions(self) -> int:
        return self.height * self.width

    @property
    def neurons(self) -> int:
        return self.channels * self.positions


@dataclass
class GateSpec:
    """Sharing plan for one gated layer.

    Prototypes are the first ``prototypes`` channels. ``pi`` maps every
    channel to the prototype whose gate it consumes; ``group_head`` is the
    first layer of this layer's sharing group (gates are evaluated there).
    """

    layer: int
    channels: int
    prototypes: int
    pi: list[int] = field(default_factory=list)
    group_head: int = -1
    affine_enabled: bool = True
    layer_sharing_enabled: bool = True

    def __post_init__(self):
        if not 1 <= self.prototypes <= self.channels:
            raise ConfigError(
                f"layer {self.layer}: prototype count {self.prototypes} "
                f"outside 1..{self.channels}")
        if not self.pi:
            self.pi = balanced_channel_map(self.channels, self.prototypes)
        if len(self.pi) != self.channels:
            raise ConfigError(f"layer {self.layer}: pi covers {len(self.pi)} of "
                              f"{self.channels} channels")
        for c, p in enumerate(self.pi):
            if c < self.prototypes and p != c:
                raise ConfigError(f"layer {self.layer}: prototype {c} must map to itself")
            if not 0 <= p < self.prototypes:
                raise ConfigError(f"layer {self.layer}: pi({c})={p} is not a prototype")
        if self.group_head < 0:
            self.group_head = self.layer

    @property
    def replicates(self) -> int:
        return self.channels - self.prototypes


@dataclass
class GateLedger:
    """Exact static count of step-gate evaluations per inference."""

    per_layer: list[int]
    total: int

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "gates"])
            for idx, count in enumerate(self.per_layer):
                writer.writerow([idx, count])
            writer.writerow(["total", self.total])


def balanced_channel_map(channels: int, prototypes: int) -> list[int]:
    """Round-robin map: replicate channel P+i consumes prototype i mod P."""
    if prototypes < 1:
        raise ConfigError(f"prototype count must be >= 1, got {prototypes}")
    if prototypes > channels:
        raise ConfigError(f"prototype count {prototypes} exceeds channels {channels}")
    return list(range(prototypes)) + [i % prototypes for i in range(channels - prototypes)]


def build_groups(shapes: list[LayerShape], layer_sharing_enabled: bool = True) -> list[int]:
    """phi: each layer -> first layer of its maximal run of identical shapes."""
    phi: list[int] = []
    for idx, shape in enumerate(shapes):
        if (not layer_sharing_enabled or idx == 0
                or (shape.channels, shape.height, shape.width)
                != (shapes[idx - 1].channels, shapes[idx - 1].height, shapes[idx - 1].width)):
            phi.append(idx)
        else:
            phi.append(phi[idx - 1])
    return phi


def gate_ledger(specs: list[GateSpec], shapes: list[LayerShape]) -> GateLedger:
    """Static count: sum of P*h*w over group-head layers (members count 0)."""
    if len(specs) != len(shapes):
        raise ConfigError(f"{len(specs)} specs for {len(shapes)} layer shapes")
    per_layer = []
    for spec, shape in zip(specs, shapes):
        if spec.channels != shape.channels:
            raise ConfigError(f"layer {spec.layer}: spec has {spec.channels} channels, "
                              f"shape has {shape.channels}")
        per_layer.append(spec.prototypes * shape.positions if spec.group_head == spec.layer else 0)
    return GateLedger(per_layer=per_layer, total=sum(per_layer))


# ---------------------------------------------------------------------------
# budget allocation
# ---------------------------------------------------------------------------

def uniform_ratio_weights(shapes: list[LayerShape]) -> list[float]:
    """Weights proportional to each layer's full neuron count (fixed-ratio
    allocation, i.e. budgeting switched off)."""
    return [float(s.neurons) for s in shapes]


def read_weight_file(path) -> list[float]:
    """Per-layer budget weights: one `layer_index weight` pair per line."""
    entries: dict[int, float] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ConfigError(f"{path}:{lineno}: expected `layer_index weight`")
            idx, weight = int(parts[0]), float(parts[1])
            if weight < 0:
                raise ConfigError(f"{path}:{lineno}: weight must be nonnegative")
            entries[idx] = weight
    if sorted(entries) != list(range(len(entries))):
        raise ConfigError(f"{path}: layer indices must be 0..{len(entries) - 1}")
    return [entries[i] for i in range(len(entries))]


def write_weight_file(weights: list[float], path) -> None:
    with open(path, "w") as fh:
        for idx, w in enumerate(weights):
            fh.write(f"{idx} {w:.10g}\n")


def _group_heads(phi: list[int]) -> list[int]:
    return sorted({head for head in phi})


def allocate_budget(shapes: list[LayerShape], total_budget: int,
                    weights: list[float], phi: list[int] | None = None) -> list[int]:
    """Per-layer prototype counts P_l = clamp(round(s * w_l / (h_l * w_l)), 1, C_l).

    The scale s is found by bisection so the ledger total is as large as
    possible without exceeding the budget; leftover slack is then filled one
    prototype at a time (largest fractional remainder first) so that no layer
    could take one more. Grouped layers share one allocation, charged once at
    the group head with the group's summed weight.
    """
    if phi is None:
        phi = list(range(len(shapes)))
    if len(weights) != len(shapes) or len(phi) != len(shapes):
        raise ConfigError("weights and phi must cover every layer")

    heads = _group_heads(phi)
    group_weight = {h: 0.0 for h in heads}
    for idx, w in enumerate(weights):
        group_weight[phi[idx]] += float(w)
    if all(w == 0.0 for w in group_weight.values()):
        raise ConfigError("budget weights are all zero")

    floor_total = sum(shapes[h].positions for h in heads)
    full_total = sum(shapes[h].channels * shapes[h].positions for h in heads)
    if total_budget < floor_total:
        raise ConfigError(
            f"budget {total_budget} infeasible: at least one prototype per group "
            f"requires {floor_total} gates")

    def counts_at(s: float) -> dict[int, int]:
        out = {}
        for h in heads:
            raw = s * group_weight[h] / shapes[h].positions
            out[h] = int(np.clip(np.round(raw), 1, shapes[h].channels))
        return out

    def total_at(counts: dict[int, int]) -> int:
        return sum(counts[h] * shapes[h].positions for h in heads)

    if total_budget >= full_total:
        per_group = {h: shapes[h].channels for h in heads}
    else:
        lo, hi = 0.0, 1.0
        while total_at(counts_at(hi)) <= total_budget:
            hi *= 2.0
            if hi > 1e18:
                break
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if total_at(counts_at(mid)) <= total_budget:
                lo = mid
            else:
                hi = mid
        per_group = counts_at(lo)
        # largest-remainder fill until no group can take one more prototype
        remaining = total_budget - total_at(per_group)
        order = sorted(heads,
                       key=lambda h: (-(lo * group_weight[h] / shapes[h].positions
                                        - per_group[h]), h))
        progressed = True
        while progressed:
            progressed = False
            for h in order:
                cost = shapes[h].positions
                if per_group[h] < shapes[h].channels and cost <= remaining:
                    per_group[h] += 1
                    remaining -= cost
                    progressed = True

    return [per_group[phi[idx]] for idx in range(len(shapes))]


def importance_weights(model, x: np.ndarray) -> list[float]:
    """Per-layer saliency: summed per-channel variance of consumed gate values
    over all calibration examples and positions."""
    from .gates import collect_gate_arrays

    if x.shape[0] == 0:
        raise ConfigError("importance proxy needs a nonempty calibration shard")
    arrays = collect_gate_arrays(model, x)
    weights = []
    for idx in sorted(arrays):
        arr = arrays[idx]                      # [N, C, H, W]
        per_channel = arr.transpose(1, 0, 2, 3).reshape(arr.shape[1], -1)
        weights.append(float(per_channel.var(axis=1).sum()))
    return weights


def build_specs(shapes: list[LayerShape], prototype_counts: list[int],
                layer_sharing_enabled: bool = True,
                affine_enabled: bool = True) -> list[GateSpec]:
    """Assemble per-layer GateSpecs from shapes, budgets and the group map."""
    phi = build_groups(shapes, layer_sharing_enabled)
    specs = []
    for idx, shape in enumerate(shapes):
        head = phi[idx]
        p = prototype_counts[head]   # group members share the head's split
        specs.append(GateSpec(layer=idx, channels=shape.channels, prototypes=p,
                              pi=balanced_channel_map(shape.channels, p),
                              group_head=head,
                              affine_enabled=affine_enabled,
                              layer_sharing_enabled=layer_sharing_enabled))
    return specs
