"""Small sequential networks wired for shared gates.

Layers are plain objects holding parameter tensors; a Network runs them in
order and orchestrates gate reuse across layer-sharing groups. Architectures
are described by compact block lists so the same description can be built
as a gated model or as a plain ReLU/GELU reference model.
"""

from __future__ import annotations

import numpy as np

from . import gates as G
from . import tensor as T
from .errors import ConfigError, ShapeError
from .gates import AffineGateParams, GateMode
from .sharing import GateSpec, LayerShape
from .tensor import Tensor


class Conv2d:
    def __init__(self, cin: int, cout: int, kernel: int, stride: int, pad: int,
                 rng: np.random.Generator):
        fan_in = cin * kernel * kernel
        self.w = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                   size=(cout, cin, kernel, kernel)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)
        self.stride = stride
        self.pad = pad

    def forward(self, x: Tensor) -> Tensor:
        out = T.conv2d(x, self.w, stride=self.stride, pad=self.pad)
        return T.add(out, T.reshape(self.b, (1, self.b.size, 1, 1)))

    def parameters(self):
        return [("w", self.w), ("b", self.b)]


class Dense:
    def __init__(self, din: int, dout: int, rng: np.random.Generator):
        self.w = Tensor(rng.normal(0.0, np.sqrt(2.0 / din), size=(din, dout)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(dout), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)

    def parameters(self):
        return [("w", self.w), ("b", self.b)]


class Flatten:
    def forward(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        return T.reshape(x, (n, x.size // n))

    def parameters(self):
        return []


class Activation:
    """Plain per-neuron activation for reference/teacher models."""

    def __init__(self, kind: str):
        if kind not in ("relu", "gelu"):
            raise ConfigError(f"unknown activation kind {kind!r}")
        self.kind = kind

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(x) if self.kind == "relu" else T.gelu(x)

    def parameters(self):
        return []


class SplitReLU:
    """ReLU on the first ``gated`` channels, identity on the rest; the layout
    used by linearized models that keep only a few nonlinear neurons."""

    def __init__(self, gated: int):
        self.gated = gated

    def forward(self, x: Tensor) -> Tensor:
        x4, orig = G.normalize_activation(x)
        c = x4.shape[1]
        if not 0 < self.gated <= c:
            raise ConfigError(f"SplitReLU keeps {self.gated} of {c} channels")
        hot = T.relu(T.gather_channels(x4, np.arange(self.gated)))
        if self.gated == c:
            out = hot
        else:
            rest = T.gather_channels(x4, np.arange(self.gated, c))
            out = T.concat_channels([hot, rest])
        return T.reshape(out, orig) if orig != out.shape else out

    def parameters(self):
        return []


class GatedActivation:
    """One gated layer: spec, affine params and per-channel gate modes."""

    def __init__(self, spec: GateSpec, gamma: float = 1.0,
                 initial_mode: GateMode = GateMode.DRELU):
        self.spec = spec
        self.gamma = gamma
        self.params = AffineGateParams.identity(spec.channels,
                                                trainable=spec.affine_enabled)
        self.modes = np.full(spec.channels, initial_mode, dtype=np.int8)

    def set_all_modes(self, mode: GateMode) -> None:
        self.modes[:] = mode

    def remaining_smooth(self) -> int:
        return int(np.sum(self.modes == GateMode.GELU))

    def parameters(self):
        if not self.spec.affine_enabled:
            return []
        return [("alpha", self.params.alpha), ("beta", self.params.beta)]


class Network:
    """Sequential model; gated layers may share gates within groups."""

    def __init__(self, blocks: list):
        self.blocks = blocks
        self.gate_layers: list[GatedActivation] = [
            b for b in blocks if isinstance(b, GatedActivation)]
        for idx, g in enumerate(self.gate_layers):
            if g.spec.layer != idx:
                raise ConfigError(
                    f"gate layer order mismatch: spec says {g.spec.layer}, found at {idx}")
            if not 0 <= g.spec.group_head <= idx:
                raise ConfigError(f"gate layer {idx}: bad group head {g.spec.group_head}")

    # -- forward -----------------------------------------------------------

    def forward(self, x, collect_gates: bool = False):
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        pairs: dict[int, tuple] = {}
        needs = self._group_needs()
        collected: dict[int, np.ndarray] = {}
        for block in self.blocks:
            if isinstance(block, GatedActivation):
                t = self._gated(block, t, pairs, needs,
                                collected if collect_gates else None)
            else:
                t = block.forward(t)
        return (t, collected) if collect_gates else t

    def _group_needs(self) -> dict[int, tuple[bool, bool]]:
        needs: dict[int, list[bool]] = {}
        for g in self.gate_layers:
            entry = needs.setdefault(g.spec.group_head, [False, False])
            entry[0] = entry[0] or bool(np.any(g.modes == GateMode.DRELU))
            entry[1] = entry[1] or bool(np.any(g.modes == GateMode.GELU))
        return {k: (v[0], v[1]) for k, v in needs.items()}

    def _gated(self, g: GatedActivation, t: Tensor, pairs, needs, collected):
        x4, orig = G.normalize_activation(t)
        if x4.shape[1] != g.spec.channels:
            raise ShapeError(f"gate layer {g.spec.layer}: expected {g.spec.channels} "
                             f"channels, got {x4.shape[1]}")
        head = g.spec.group_head
        if head == g.spec.layer:
            need_step, need_smooth = needs[head]
            proto = T.gather_channels(x4, np.arange(g.spec.prototypes))
            pairs[head] = (G.gate_pair(proto, need_step, need_smooth, g.gamma),
                           x4.shape)
        if head not in pairs:
            raise ConfigError(f"gate layer {g.spec.layer}: group head {head} "
                              "has not run yet")
        (step, smooth), head_shape = pairs[head]
        if head_shape != x4.shape:
            raise ConfigError(f"gate layer {g.spec.layer}: shape {x4.shape} differs "
                              f"from group head shape {head_shape}")
        gate = G.select_gates(step, smooth, g.spec.pi, g.modes)
        if collected is not None:
            collected[g.spec.layer] = gate.data.copy()
        out = G.apply_affine_gate(x4, gate, g.params)
        return T.reshape(out, orig) if orig != out.shape else out

    # -- parameters and state ----------------------------------------------

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        gate_idx = 0
        for i, block in enumerate(self.blocks):
            if isinstance(block, GatedActivation):
                prefix = f"gate{gate_idx}"
                gate_idx += 1
            else:
                prefix = f"block{i}"
            out.extend((f"{prefix}.{name}", t) for name, t in block.parameters())
        return out

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All persistent arrays, trainable or not, for checkpointing."""
        out = {}
        gate_idx = 0
        for i, block in enumerate(self.blocks):
            if isinstance(block, GatedActivation):
                out[f"gate{gate_idx}.alpha"] = block.params.alpha.data
                out[f"gate{gate_idx}.beta"] = block.params.beta.data
                gate_idx += 1
            else:
                for name, t in block.parameters():
                    out[f"block{i}.{name}"] = t.data
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        if set(own) != set(arrays):
            missing = set(own) ^ set(arrays)
            raise ConfigError(f"checkpoint state mismatch on keys: {sorted(missing)}")
        for key, target in own.items():
            src = arrays[key]
            if src.shape != target.shape:
                raise ConfigError(f"checkpoint {key}: shape {src.shape} != {target.shape}")
            target[...] = src

    def modes_list(self) -> list[np.ndarray]:
        return [g.modes for g in self.gate_layers]

    def remaining_smooth(self) -> int:
        return sum(g.remaining_smooth() for g in self.gate_layers)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(x).data, axis=1)

    def gate_values(self, x: np.ndarray) -> dict[int, np.ndarray]:
        """Consumed gate arrays per gated layer, inference mode."""
        _, collected = self.forward(x, collect_gates=True)
        return collected


# ---------------------------------------------------------------------------
# architecture descriptions
# ---------------------------------------------------------------------------

def activation_shapes(blocks: list[tuple], input_shape: tuple) -> list[LayerShape]:
    """Shapes at every `act` site for a block description."""
    shapes = []
    cur = tuple(input_shape)
    for block in blocks:
        kind = block[0]
        if kind == "conv":
            _, cout, k, stride, pad = block
            if len(cur) != 3:
                raise ConfigError(f"conv needs [C,H,W] input, have {cur}")
            h = (cur[1] + 2 * pad - k) // stride + 1
            w = (cur[2] + 2 * pad - k) // stride + 1
            if h < 1 or w < 1:
                raise ConfigError(f"conv output collapsed to {h}x{w}")
            cur = (cout, h, w)
        elif kind == "dense":
            cur = (block[1],)
        elif kind == "flatten":
            cur = (int(np.prod(cur)),)
        elif kind == "act":
            if len(cur) == 1:
                shapes.append(LayerShape(channels=cur[0], height=1, width=1))
            else:
                shapes.append(LayerShape(channels=cur[0], height=cur[1], width=cur[2]))
        else:
            raise ConfigError(f"unknown block kind {kind!r}")
    return shapes


def build_network(blocks: list[tuple], input_shape: tuple,
                  rng: np.random.Generator,
                  specs: list[GateSpec] | None = None,
                  plain_activation: str | None = None,
                  split_relu: int | None = None,
                  gamma: float = 1.0,
                  initial_mode: GateMode = GateMode.DRELU) -> Network:
    """Instantiate blocks; `act` sites become gated layers (with specs),
    plain activations, or split ReLUs, exclusively."""
    chosen = sum(x is not None for x in (specs, plain_activation, split_relu))
    if chosen != 1:
        raise ConfigError("exactly one of specs / plain_activation / split_relu required")

    cur = tuple(input_shape)
    out: list = []
    act_idx = 0
    for block in blocks:
        kind = block[0]
        if kind == "conv":
            _, cout, k, stride, pad = block
            out.append(Conv2d(cur[0], cout, k, stride, pad, rng))
            h = (cur[1] + 2 * pad - k) // stride + 1
            w = (cur[2] + 2 * pad - k) // stride + 1
            cur = (cout, h, w)
        elif kind == "dense":
            if len(cur) != 1:
                raise ConfigError(f"dense needs flat input, have {cur}")
            out.append(Dense(cur[0], block[1], rng))
            cur = (block[1],)
        elif kind == "flatten":
            out.append(Flatten())
            cur = (int(np.prod(cur)),)
        elif kind == "act":
            if specs is not None:
                if act_idx >= len(specs):
                    raise ConfigError(f"{len(specs)} specs for more activation sites")
                out.append(GatedActivation(specs[act_idx], gamma=gamma,
                                           initial_mode=initial_mode))
            elif plain_activation is not None:
                out.append(Activation(plain_activation))
            else:
                out.append(SplitReLU(split_relu))
            act_idx += 1
        else:
            raise ConfigError(f"unknown block kind {kind!r}")
    if specs is not None and act_idx != len(specs):
        raise ConfigError(f"{len(specs)} specs but only {act_idx} activation sites")
    return Network(out)


def clone_network(net: Network) -> "Network":
    """Deep copy of parameters and modes; used to freeze teacher snapshots."""
    import copy

    blocks: list = []
    for block in net.blocks:
        if isinstance(block, GatedActivation):
            g = GatedActivation(block.spec, gamma=block.gamma)
            g.params.alpha.data[...] = block.params.alpha.data
            g.params.beta.data[...] = block.params.beta.data
            g.modes = block.modes.copy()
            blocks.append(g)
        elif isinstance(block, (Conv2d, Dense)):
            b = copy.copy(block)
            b.w = Tensor(block.w.data.copy(), requires_grad=True)
            b.b = Tensor(block.b.data.copy(), requires_grad=True)
            blocks.append(b)
        else:
            blocks.append(block)
    return Network(blocks)
