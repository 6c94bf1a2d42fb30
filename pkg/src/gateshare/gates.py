"""Shared-gate activations.

A ReLU is the product of its input and a binary step gate. Here the step
gate of a prototype channel can be consumed by many replicate channels (and,
with layer groups, by later layers), each through its own learnable affine
transform:

    out[c, h, w] = x[c, h, w] * (alpha[c] * g(x[pi(c), h, w]) + beta[c])

``g`` is either the hard step gate (zero derivative, blocks gradient to the
prototype) or its smooth stand-in ndtr(gamma * x) used while training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


class GateMode(IntEnum):
    DRELU = 0
    GELU = 1


@dataclass
class AffineGateParams:
    """Learnable per-channel (alpha, beta) applied to the shared gate."""

    alpha: Tensor
    beta: Tensor

    @classmethod
    def identity(cls, channels: int, trainable: bool = True) -> "AffineGateParams":
        # alpha=1, beta=0 starts every channel at exact ReLU semantics
        return cls(alpha=Tensor(np.ones(channels), requires_grad=trainable),
                   beta=Tensor(np.zeros(channels), requires_grad=trainable))

    @property
    def channels(self) -> int:
        return self.alpha.size


@dataclass
class GateRecord:
    example: int
    layer: int
    h: int
    w: int
    channel: int
    gate: float


def prototype_count(pi: Sequence[int]) -> int:
    """Number of leading fixed points of pi; validates the channel map."""
    pi = list(pi)
    p = 0
    while p < len(pi) and pi[p] == p:
        p += 1
    if p == 0:
        raise ConfigError(f"channel map has no prototype at channel 0: {pi}")
    for c, target in enumerate(pi):
        if not 0 <= target < p:
            raise ConfigError(
                f"channel map entry pi({c})={target} does not point at a prototype "
                f"(prototypes are channels 0..{p - 1})")
    return p


def normalize_activation(x: Tensor) -> tuple[Tensor, tuple[int, ...]]:
    """View x as [N, C, H, W]; accepts [C], [N, C], [C, H, W], [N, C, H, W]."""
    shape = x.shape
    if len(shape) == 1:
        return T.reshape(x, (1, shape[0], 1, 1)), shape
    if len(shape) == 2:
        return T.reshape(x, (shape[0], shape[1], 1, 1)), shape
    if len(shape) == 3:
        return T.reshape(x, (1,) + shape), shape
    if len(shape) == 4:
        return x, shape
    raise ShapeError(f"gate input must have 1-4 dims, got {shape}")


def gate_pair(x_proto: Tensor, need_step: bool, need_smooth: bool,
              gamma: float) -> tuple[Tensor | None, Tensor | None]:
    """Evaluate the gates a prototype block provides, each kind at most once."""
    step = T.drelu(x_proto) if need_step else None
    smooth = T.gelu_gate(x_proto, gamma) if need_smooth else None
    return step, smooth


def select_gates(step: Tensor | None, smooth: Tensor | None,
                 pi: Sequence[int], modes: np.ndarray) -> Tensor:
    """Replicate prototype gates to all channels, picking each channel's kind."""
    pi = np.asarray(pi, dtype=np.intp)
    if np.all(modes == GateMode.DRELU):
        return T.gather_channels(step, pi)
    if np.all(modes == GateMode.GELU):
        return T.gather_channels(smooth, pi)
    mask_smooth = (modes == GateMode.GELU).astype(np.float64)[None, :, None, None]
    hard = T.mul(T.gather_channels(step, pi), Tensor(1.0 - mask_smooth))
    soft = T.mul(T.gather_channels(smooth, pi), Tensor(mask_smooth))
    return T.add(hard, soft)


def apply_affine_gate(x: Tensor, gates: Tensor, params: AffineGateParams) -> Tensor:
    return T.mul(x, T.channel_affine(gates, params.alpha, params.beta))


def _as_modes(modes, channels: int) -> np.ndarray:
    if modes is None:
        return np.full(channels, GateMode.DRELU, dtype=np.int8)
    modes = np.asarray(modes, dtype=np.int8)
    if modes.shape != (channels,):
        raise ConfigError(f"modes must have one entry per channel, got {modes.shape}")
    return modes


def shared_relu(x: Tensor, pi: Sequence[int], params: AffineGateParams,
                modes=None, gamma: float = 1.0) -> Tensor:
    """Gated activation for one layer; gates come from prototype channels."""
    x4, orig = normalize_activation(x)
    c = x4.shape[1]
    if len(pi) != c:
        raise ConfigError(f"channel map covers {len(pi)} channels, layer has {c}")
    if params.channels != c:
        raise ConfigError(f"affine params cover {params.channels} channels, layer has {c}")
    p = prototype_count(pi)
    modes = _as_modes(modes, c)

    proto = T.gather_channels(x4, np.arange(p))
    step, smooth = gate_pair(proto,
                             need_step=bool(np.any(modes == GateMode.DRELU)),
                             need_smooth=bool(np.any(modes == GateMode.GELU)),
                             gamma=gamma)
    out = apply_affine_gate(x4, select_gates(step, smooth, pi, modes), params)
    return T.reshape(out, orig) if orig != out.shape else out


def layer_shared_relu(xs: Sequence[Tensor], phi: Sequence[int], pi: Sequence[int],
                      params_list: Sequence[AffineGateParams],
                      modes_list=None, gamma: float = 1.0) -> list[Tensor]:
    """Gated activations for a layer group; gates come from the group's first
    layer only and are reused by every member."""
    n_layers = len(xs)
    phi = list(phi)
    if len(phi) != n_layers or len(params_list) != n_layers:
        raise ConfigError("phi and params must cover every layer in the group")
    if modes_list is None:
        modes_list = [None] * n_layers

    x4s, origs = [], []
    for x in xs:
        x4, orig = normalize_activation(x)
        x4s.append(x4)
        origs.append(orig)

    outs: list[Tensor] = [None] * n_layers  # type: ignore[list-item]
    pairs: dict[int, tuple[Tensor | None, Tensor | None]] = {}
    for l in range(n_layers):
        first = phi[l]
        if not 0 <= first <= l or phi[first] != first:
            raise ConfigError(f"phi({l})={first} is not the first layer of a group")
        if x4s[l].shape != x4s[first].shape:
            raise ConfigError(
                f"layer {l} shape {x4s[l].shape} differs from group head "
                f"{first} shape {x4s[first].shape}")

        c = x4s[l].shape[1]
        modes_l = _as_modes(modes_list[l], c)
        if first not in pairs:
            members = [m for m in range(n_layers) if phi[m] == first]
            need_step = any(np.any(_as_modes(modes_list[m], c) == GateMode.DRELU)
                            for m in members)
            need_smooth = any(np.any(_as_modes(modes_list[m], c) == GateMode.GELU)
                              for m in members)
            p = prototype_count(pi)
            proto = T.gather_channels(x4s[first], np.arange(p))
            pairs[first] = gate_pair(proto, need_step, need_smooth, gamma)

        step, smooth = pairs[first]
        gates = select_gates(step, smooth, pi, modes_l)
        out = apply_affine_gate(x4s[l], gates, params_list[l])
        outs[l] = T.reshape(out, origs[l]) if origs[l] != out.shape else out
    return outs


# ---------------------------------------------------------------------------
# gate recording
# ---------------------------------------------------------------------------

def collect_gate_arrays(model, x: np.ndarray, layers: Iterable[int] | None = None
                        ) -> dict[int, np.ndarray]:
    """Binary gate values each channel consumed, as [N, C, H, W] per layer.

    Runs the model in inference mode; every selected layer must be fully in
    DRELU mode, otherwise the recorded values would not be binary.
    """
    values = model.gate_values(x)
    selected = set(values) if layers is None else set(layers)
    bad = selected - set(values)
    if bad:
        raise ConfigError(f"no gated layer at index {sorted(bad)}; "
                          f"valid indices are {sorted(values)}")
    out = {}
    for idx in sorted(selected):
        arr = values[idx]
        if not np.all((arr == 0.0) | (arr == 1.0)):
            raise ConfigError(
                f"layer {idx} has smooth-gate channels; switch it to DRELU "
                "mode before recording gates")
        out[idx] = arr
    return out


def record_gates(model, x: np.ndarray, layers: Iterable[int] | None = None
                 ) -> Iterator[GateRecord]:
    """Stream one GateRecord per (example, layer, position, channel)."""
    arrays = collect_gate_arrays(model, x, layers)
    for layer_idx, arr in arrays.items():
        n, c, h, w = arr.shape
        for ex in range(n):
            for hh in range(h):
                for ww in range(w):
                    for ch in range(c):
                        yield GateRecord(ex, layer_idx, hh, ww, ch, float(arr[ex, ch, hh, ww]))


def write_gate_csv(records: Iterable[GateRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["example", "layer", "h", "w", "channel", "gate"])
        for r in records:
            writer.writerow([r.example, r.layer, r.h, r.w, r.channel, int(r.gate)])


def read_gate_csv(path) -> list[GateRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.append(GateRecord(int(row["example"]), int(row["layer"]),
                                  int(row["h"]), int(row["w"]),
                                  int(row["channel"]), float(row["gate"])))
    return out
