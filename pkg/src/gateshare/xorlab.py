"""Checkerboard expressiveness lab.

Contains the 2x2 checkerboard task, a hand-built two-neuron network that
solves it with a single step gate, a four-way training comparison, and an
analytic + brute-force classifier for the decision boundaries reachable by a
one-ReLU-plus-linear-neurons score function f(x) = a*relu(w.x + b) + v.x + c.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from .gates import GateMode
from .model import Network, build_network
from .sharing import GateSpec
from .training import (FINETUNE, GELU_PHASE, SUBSTITUTION, KDSettings,
                       PhasePlan, TrainingSchedule, run_training)

GRID_SIDE = 201


def checkerboard_label(x1, x2):
    """1 where the signs of the coordinates differ, else 0."""
    return (np.sign(x1) != np.sign(x2)).astype(np.int64)


def make_checkerboard(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """n points uniform on [-1,1]^2, resampled off the axes, with labels."""
    pts = rng.uniform(-1.0, 1.0, size=(n, 2))
    bad = (pts[:, 0] == 0.0) | (pts[:, 1] == 0.0)
    while np.any(bad):
        pts[bad] = rng.uniform(-1.0, 1.0, size=(int(bad.sum()), 2))
        bad = (pts[:, 0] == 0.0) | (pts[:, 1] == 0.0)
    return pts, checkerboard_label(pts[:, 0], pts[:, 1])


def evaluation_grid(side: int = GRID_SIDE) -> tuple[np.ndarray, np.ndarray]:
    """Dense grid over [-1,1]^2 with axis points masked out, plus labels."""
    axis = np.linspace(-1.0, 1.0, side)
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    keep = (pts[:, 0] != 0.0) & (pts[:, 1] != 0.0)
    pts = pts[keep]
    return pts, checkerboard_label(pts[:, 0], pts[:, 1])


def grid_accuracy(predict, side: int = GRID_SIDE) -> float:
    pts, labels = evaluation_grid(side)
    return float(np.mean(predict(pts) == labels))


# ---------------------------------------------------------------------------
# the constructive single-gate network
# ---------------------------------------------------------------------------

def constructive_network() -> Network:
    """Two neurons, one shared step gate: f(x1, x2) = x2 * (-2*step(x1) + 1).

    The first linear layer is the identity; the replicate's affine transform
    (-2, 1) turns the prototype's gate into -sign(x1); the output reads the
    replicate only. The sign of f reproduces the checkerboard exactly.
    """
    rng = np.random.default_rng(0)
    spec = GateSpec(layer=0, channels=2, prototypes=1, pi=[0, 0])
    net = build_network([("dense", 2), ("act",), ("dense", 1)], (2,), rng,
                        specs=[spec])
    net.blocks[0].w.data[...] = np.eye(2)
    net.blocks[0].b.data[...] = 0.0
    gate = net.gate_layers[0]
    gate.params.alpha.data[...] = [1.0, -2.0]
    gate.params.beta.data[...] = [0.0, 1.0]
    net.blocks[2].w.data[...] = [[0.0], [1.0]]
    net.blocks[2].b.data[...] = 0.0
    return net


def constructive_predict(net: Network, pts: np.ndarray) -> np.ndarray:
    return (net.forward(pts).data[:, 0] > 0).astype(np.int64)


# ---------------------------------------------------------------------------
# the four-way training comparison
# ---------------------------------------------------------------------------

XOR_POINTS = 800
XOR_EPOCHS = 5000
XOR_LR = 0.1
XOR_BATCH = 32

VARIANTS = ("relu_mlp", "snl", "share_no_smooth", "share_smooth")


@dataclass
class VariantResult:
    name: str
    accuracy: float
    grid_points: np.ndarray
    grid_predictions: np.ndarray


def _xor_schedule(with_smooth_phase: bool, epochs: int) -> TrainingSchedule:
    kd = KDSettings(temperature=4.0, mix=0.5, gelu_phase_mix=0.0,
                    use_plain_teacher=False)
    if with_smooth_phase:
        sub = max(1, epochs // 5)
        fine = max(1, epochs // 5)
        phases = [PhasePlan(GELU_PHASE, epochs - sub - fine, XOR_LR),
                  PhasePlan(SUBSTITUTION, sub, XOR_LR),
                  PhasePlan(FINETUNE, fine, XOR_LR)]
    else:
        phases = [PhasePlan(FINETUNE, epochs, XOR_LR)]
    return TrainingSchedule(phases=phases, momentum=0.0, weight_decay=0.0,
                            batch_size=XOR_BATCH, gamma=1.0, kd=kd)


def build_xor_variant(name: str, rng: np.random.Generator) -> Network:
    if name == "relu_mlp":
        return build_network([("dense", 1), ("act",), ("dense", 2)], (2,), rng,
                             plain_activation="relu")
    if name == "snl":
        # one gated neuron plus eight linear ones in a single hidden layer
        return build_network([("dense", 9), ("act",), ("dense", 2)], (2,), rng,
                             split_relu=1)
    spec = GateSpec(layer=0, channels=2, prototypes=1, pi=[0, 0])
    initial = GateMode.GELU if name == "share_smooth" else GateMode.DRELU
    return build_network([("dense", 2), ("act",), ("dense", 2)], (2,), rng,
                         specs=[spec], gamma=1.0, initial_mode=initial)


def train_xor_variant(name: str, seed: int, epochs: int = XOR_EPOCHS,
                      n_points: int = XOR_POINTS) -> VariantResult:
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    rng = np.random.default_rng(seed)
    x, y = make_checkerboard(n_points, rng)
    net = build_xor_variant(name, rng)
    schedule = _xor_schedule(with_smooth_phase=(name == "share_smooth"), epochs=epochs)
    run_training(net, schedule, x, y, rng)
    pts, labels = evaluation_grid()
    preds = net.predict(pts)
    acc = float(np.mean(preds == labels))
    return VariantResult(name, acc, pts, preds)


def four_way_experiment(seed: int, epochs: int = XOR_EPOCHS,
                        n_points: int = XOR_POINTS) -> dict[str, VariantResult]:
    return {name: train_xor_variant(name, seed, epochs, n_points)
            for name in VARIANTS}


# ---------------------------------------------------------------------------
# decision boundaries of one-ReLU score functions
# ---------------------------------------------------------------------------

class BoundaryShape(Enum):
    EMPTY = "empty"
    SINGLE_LINE = "single_line"
    TWO_PARALLEL_LINES = "two_parallel_lines"
    TWO_PIECE_PIECEWISE_LINEAR = "two_piece_piecewise_linear"
    UNRESOLVED = "unresolved"


@dataclass
class SnlScoreParams:
    """f(x) = a * relu(w.x + b) + v.x + c over the plane."""

    a: float
    w: np.ndarray
    b: float
    v: np.ndarray
    c: float

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(2)
        self.v = np.asarray(self.v, dtype=np.float64).reshape(2)
        self.a = float(self.a)
        self.b = float(self.b)
        self.c = float(self.c)

    def value(self, pts: np.ndarray) -> np.ndarray:
        z = pts @ self.w + self.b
        return self.a * np.maximum(z, 0.0) + pts @ self.v + self.c


_REL_TOL = 1e-12  # relative threshold for "exactly zero" geometric tests


def _cross(u: np.ndarray, t: np.ndarray) -> float:
    return float(u[0] * t[1] - u[1] * t[0])


def classify_snl_boundary(p: SnlScoreParams) -> BoundaryShape:
    """Exact shape of the class interface of sign(f).

    On the gate's half-planes f is affine: n_minus = v on {w.x+b <= 0} and
    n_plus = v + a*w on {w.x+b >= 0}. The interface is built from each line
    clipped to its half-plane; the two affine pieces agree on the gate line,
    which forces every reachable configuration into one of four shapes.
    """
    w, a, b, v, c = p.w, p.a, p.b, p.v, p.c
    wnorm = float(np.hypot(*w))

    if wnorm == 0.0 or a == 0.0:
        return BoundaryShape.SINGLE_LINE if np.hypot(*v) > 0 else BoundaryShape.EMPTY

    n_minus, k_minus = v, c
    n_plus, k_plus = v + a * w, c + a * b
    scale = max(np.hypot(*n_minus), np.hypot(*n_plus), abs(a) * wnorm)

    def is_parallel(n):
        return abs(_cross(n, w)) <= _REL_TOL * np.hypot(*n) * wnorm

    def is_zero(n):
        return np.hypot(*n) <= _REL_TOL * scale

    zm, zp = is_zero(n_minus), is_zero(n_plus)
    if zm and zp:
        return BoundaryShape.EMPTY
    # the two normals differ by a*w, so one crosses the gate line exactly
    # when the other does; test whichever is nonzero
    reference = n_plus if zm else n_minus
    if not is_parallel(reference):
        # both lines cross the gate line at the same point (the affine
        # pieces agree there) and their normals cannot be parallel: a kink
        return BoundaryShape.TWO_PIECE_PIECEWISE_LINEAR

    # parallel family: each side is a line inside its half-plane, the gate
    # line itself, or sign-constant
    def side(n, k, sgn):
        """-> ('line'|'on_gate'|'const'|'zero', positive_somewhere)"""
        if is_zero(n):
            if abs(k) <= _REL_TOL * max(scale, 1.0):
                return "zero", False
            return "const", k > 0
        t = float(n @ w) / (wnorm * wnorm)   # n = t*w up to rounding
        u = b - k / t                        # value of w.x+b on the line
        if abs(u) <= _REL_TOL * max(abs(b), abs(k / t), 1.0):
            # the line coincides with the gate line; open half has sign(t)*sgn
            return "on_gate", (sgn * t) > 0
        if sgn * u > 0:
            return "line", True
        return "const", (sgn * t) > 0        # sign at the far interior

    kind_m, pos_m = side(n_minus, k_minus, -1.0)
    kind_p, pos_p = side(n_plus, k_plus, +1.0)

    lines = sum(kind == "line" for kind in (kind_m, kind_p))
    if lines == 2:
        return BoundaryShape.TWO_PARALLEL_LINES
    if lines == 1:
        return BoundaryShape.SINGLE_LINE
    # only on_gate / const / zero remain: the interface can only be the gate
    # line itself, present iff some open half-plane is positive
    if (kind_m in ("on_gate", "zero") or kind_p in ("on_gate", "zero")) and (pos_m or pos_p):
        return BoundaryShape.SINGLE_LINE
    return BoundaryShape.EMPTY


# ---------------------------------------------------------------------------
# raster oracle
# ---------------------------------------------------------------------------

ORACLE_WINDOW = 2.0
ORACLE_ANGLE_TOL = 1e-3
_MIN_COMPONENT_POINTS = 8


def _fit_line(points: np.ndarray) -> tuple[np.ndarray, float]:
    """Total-least-squares direction and max perpendicular residual."""
    center = points.mean(axis=0)
    d = points - center
    cov = d.T @ d
    evals, evecs = np.linalg.eigh(cov)
    direction = evecs[:, -1]
    residual = float(np.abs(d @ np.array([-direction[1], direction[0]])).max())
    return direction, residual


def _angle_between(d1: np.ndarray, d2: np.ndarray) -> float:
    dot = abs(float(d1 @ d2)) / (np.hypot(*d1) * np.hypot(*d2))
    return float(np.arccos(np.clip(dot, 0.0, 1.0)))


def _classify_raster(p: SnlScoreParams, resolution: int) -> BoundaryShape | None:
    """Classify the class interface on one raster; None means ambiguous."""
    half = ORACLE_WINDOW
    cell = 2 * half / resolution
    centers = -half + cell * (np.arange(resolution) + 0.5)
    xx, yy = np.meshgrid(centers, centers, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    classes = (p.value(pts) > 0).reshape(resolution, resolution)

    hdiff = classes[1:, :] != classes[:-1, :]
    vdiff = classes[:, 1:] != classes[:, :-1]
    if not hdiff.any() and not vdiff.any():
        return BoundaryShape.EMPTY

    mask = np.zeros_like(classes)
    mask[1:, :] |= hdiff
    mask[:-1, :] |= hdiff
    mask[:, 1:] |= vdiff
    mask[:, :-1] |= vdiff
    labels, ncomp = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))

    edge_points, edge_labels = [], []
    hi, hj = np.nonzero(hdiff)
    edge_points.append(np.stack([centers[hi] + 0.5 * cell, centers[hj]], axis=1))
    edge_labels.append(labels[hi, hj])
    vi, vj = np.nonzero(vdiff)
    edge_points.append(np.stack([centers[vi], centers[vj] + 0.5 * cell], axis=1))
    edge_labels.append(labels[vi, vj])
    points = np.concatenate(edge_points)
    comp_of = np.concatenate(edge_labels)

    straight_tol = 1.2 * cell
    groups = [points[comp_of == comp] for comp in range(1, ncomp + 1)]
    large = [g for g in groups if len(g) >= _MIN_COMPONENT_POINTS]
    if not large:
        return None
    for g in groups:
        if len(g) >= _MIN_COMPONENT_POINTS:
            continue
        # slivers thinner than a cell shed a few isolated boundary cells
        # near a kink; reattach them to the closest real component
        dists = [np.sqrt(((g[:, None, :] - big[None, :, :]) ** 2).sum(-1)).min()
                 for big in large]
        nearest = int(np.argmin(dists))
        if dists[nearest] > 8 * cell:
            return None
        large[nearest] = np.concatenate([large[nearest], g])

    ncomp = len(large)
    comps = []
    for cpts in large:
        direction, residual = _fit_line(cpts)
        comps.append((cpts, direction, residual <= straight_tol))

    if ncomp == 1:
        cpts, direction, straight = comps[0]
        if straight:
            return BoundaryShape.SINGLE_LINE
        return _fit_two_piece(cpts, straight_tol)
    if ncomp == 2:
        if not all(straight for _, _, straight in comps):
            return None
        return _two_component_shape(comps, straight_tol)
    return None


def _two_component_shape(comps, straight_tol: float) -> BoundaryShape | None:
    """Two straight components: parallel lines, or two pieces whose meeting
    point fell outside the sampled cells.

    Fitted directions of near-axis lines carry systematic staircase error,
    so parallelism is judged by whether one common direction explains both
    components, cross-checked against where the individual fits meet.
    """
    (p1, d1, _), (p2, d2, _) = comps
    c1, c2 = p1.mean(axis=0), p2.mean(axis=0)
    common, _ = _fit_line(np.concatenate([p1 - c1, p2 - c2]))
    normal = _perp(common)
    parallel_ok = (float(np.abs((p1 - c1) @ normal).max()) <= straight_tol
                   and float(np.abs((p2 - c2) @ normal).max()) <= straight_tol)

    meeting_ok = False
    denom = _cross(d1, d2)
    if abs(denom) > 1e-12:
        t1 = _cross(c2 - c1, d2) / denom
        meeting = c1 + t1 * d1
        meeting_ok = float(np.hypot(*meeting)) <= 2.0 * ORACLE_WINDOW

    if parallel_ok and not meeting_ok:
        return BoundaryShape.TWO_PARALLEL_LINES
    if meeting_ok and not parallel_ok:
        return BoundaryShape.TWO_PIECE_PIECEWISE_LINEAR
    return None


def _perp(d: np.ndarray) -> np.ndarray:
    return np.array([-d[1], d[0]])


def _fit_two_piece(points: np.ndarray, straight_tol: float) -> BoundaryShape | None:
    """Explain one bent component as two straight pieces.

    Two-line Lloyd clustering: fit a line per cluster, reassign points to
    the nearer line, repeat. Started once by splitting on the side of the
    single-line fit (separates narrow wedges) and once by splitting along it
    at the farthest-out point (separates wide elbows); the better result
    wins. Residuals are trimmed at the 98th percentile since cells at the
    apex of a narrow wedge are ragged at raster precision.
    """
    n = len(points)
    if n < 2 * _MIN_COMPONENT_POINTS:
        return None
    d0, _ = _fit_line(points)
    center = points.mean(axis=0)
    offsets = (points - center) @ _perp(d0)
    proj = (points - center) @ d0

    # narrow wedges split cleanly by the side of the single-line fit
    inits = [offsets >= 0]
    # wide elbows split at the point farthest from the end-to-end chord
    a_end = points[int(np.argmin(proj))]
    b_end = points[int(np.argmax(proj))]
    chord = b_end - a_end
    span = float(np.hypot(*chord))
    if span > 0:
        chord = chord / span
        dev = np.abs((points - a_end) @ _perp(chord))
        along = (points - a_end) @ chord
        inits.append(along <= along[int(np.argmax(dev))])
    inits.append(proj <= np.median(proj))

    best: tuple[float, np.ndarray, np.ndarray] | None = None
    for assign in inits:
        assign = assign.copy()
        for _ in range(30):
            if (assign.sum() < _MIN_COMPONENT_POINTS
                    or (~assign).sum() < _MIN_COMPONENT_POINTS):
                break
            da, _ = _fit_line(points[assign])
            db, _ = _fit_line(points[~assign])
            ra = np.abs((points - points[assign].mean(axis=0)) @ _perp(da))
            rb = np.abs((points - points[~assign].mean(axis=0)) @ _perp(db))
            score = max(float(np.quantile(ra[assign], 0.98)),
                        float(np.quantile(rb[~assign], 0.98)))
            if best is None or score < best[0]:
                best = (score, da, db)
            new_assign = ra <= rb
            if np.array_equal(new_assign, assign):
                break
            assign = new_assign

    if best is None or best[0] > 1.5 * straight_tol:
        return None
    if _angle_between(best[1], best[2]) <= ORACLE_ANGLE_TOL:
        return BoundaryShape.SINGLE_LINE
    return BoundaryShape.TWO_PIECE_PIECEWISE_LINEAR


def boundary_oracle(p: SnlScoreParams, resolution: int = 256) -> BoundaryShape:
    """Brute-force shape of the class interface on [-2,2]^2.

    Rasterizes sign(f), clusters boundary cells and fits lines. If the
    pattern is ambiguous at the requested resolution the raster is refined
    once; failing that, UNRESOLVED is reported.
    """
    if resolution < 256:
        raise ValueError(f"oracle resolution must be >= 256, got {resolution}")
    result = _classify_raster(p, resolution)
    if result is None:
        result = _classify_raster(p, resolution * 2)
    return BoundaryShape.UNRESOLVED if result is None else result


# ---------------------------------------------------------------------------
# fuzzing the corollary
# ---------------------------------------------------------------------------

def _unit(rng: np.random.Generator) -> np.ndarray:
    theta = rng.uniform(0.0, 2.0 * np.pi)
    return np.array([np.cos(theta), np.sin(theta)])


def sample_snl_params(rng: np.random.Generator) -> SnlScoreParams:
    """Random score functions whose boundary geometry stays inside the
    oracle window, mixing the generic kink case with every degenerate family.
    """
    roll = rng.uniform()
    if roll < 0.55:
        # generic: both lines anchored at a kink inside [-1,1]^2, with the
        # gate direction kept clearly non-parallel to both pieces
        while True:
            w = _unit(rng) * rng.uniform(0.5, 2.0)
            v = _unit(rng) * rng.uniform(0.5, 2.0)
            a = rng.uniform(0.5, 2.0) * rng.choice([-1.0, 1.0])
            n_plus = v + a * w
            sin_w = abs(_cross(v, w)) / (np.hypot(*v) * np.hypot(*w))
            np_norm = np.hypot(*n_plus)
            if np_norm < 0.2:
                continue
            sin_pieces = abs(_cross(v, n_plus)) / (np.hypot(*v) * np_norm)
            if sin_w > 0.05 and sin_pieces > 0.05:
                break
        anchor = rng.uniform(-1.0, 1.0, size=2)
        return SnlScoreParams(a=a, w=w, b=-float(w @ anchor),
                              v=v, c=-float(v @ anchor))
    if roll < 0.80:
        # parallel family: v is an exact multiple of w; the second line's
        # position is steered through a. Offsets are drawn in euclidean
        # distance so every line stays inside the oracle window.
        wn = rng.uniform(0.5, 2.0)
        w = _unit(rng) * wn
        q = rng.uniform(-0.5, 0.5, size=2)
        b = -float(w @ q)
        t_minus = rng.uniform(0.5, 2.0) * rng.choice([-1.0, 1.0])
        v = t_minus * w
        d_minus = rng.uniform(0.1, 0.6) * wn
        d_plus = rng.uniform(0.1, 0.6) * wn
        shape_roll = rng.uniform()
        if shape_roll < 0.5:
            u_minus, u_plus = -d_minus, d_plus       # line in each half
        elif shape_roll < 0.75:
            u_minus, u_plus = -d_minus, -d_plus      # only the lower half
        else:
            u_minus, u_plus = d_minus, -d_plus       # no boundary at all
        c = -t_minus * (u_minus - b)
        a = t_minus * (u_minus - u_plus) / u_plus
        return SnlScoreParams(a=a, w=w, b=b, v=v, c=c)
    if roll < 0.88:
        # gate contributes nothing: pure affine with the line kept in-window
        v = _unit(rng) * rng.uniform(0.5, 2.0)
        line_offset = rng.uniform(-0.8, 0.8) * float(np.hypot(*v))
        if rng.uniform() < 0.5:
            return SnlScoreParams(a=0.0, w=_unit(rng), b=rng.uniform(-1, 1),
                                  v=v, c=line_offset)
        a = rng.uniform(0.5, 2.0)
        b = rng.uniform(-1.0, 1.0)
        return SnlScoreParams(a=a, w=np.zeros(2), b=b, v=v,
                              c=line_offset - a * max(b, 0.0))
    if roll < 0.96:
        # flat linear part: the boundary, if any, is one line parallel to
        # the gate line at distance |c/a| / |w|
        wn = rng.uniform(0.5, 2.0)
        w = _unit(rng) * wn
        a = rng.uniform(0.5, 2.0) * rng.choice([-1.0, 1.0])
        u = rng.uniform(0.1, 0.6) * wn * rng.choice([-1.0, 1.0])
        return SnlScoreParams(a=a, w=w, b=-float(w @ rng.uniform(-0.5, 0.5, size=2)),
                              v=np.zeros(2), c=-a * u)
    # hinge only: zero on one half, one-signed on the other
    w = _unit(rng) * rng.uniform(0.5, 2.0)
    return SnlScoreParams(a=rng.uniform(0.5, 2.0) * rng.choice([-1.0, 1.0]),
                          w=w, b=rng.uniform(-0.5, 0.5), v=np.zeros(2), c=0.0)


@dataclass
class FuzzReport:
    draws: int
    matches: int
    unresolved: int
    contradictions: int
    shape_counts: dict[str, int]

    @property
    def agreement(self) -> float:
        return self.matches / self.draws if self.draws else 1.0


def corollary_fuzz(n_draws: int, seed: int, resolution: int = 256) -> FuzzReport:
    """Compare the analytic classifier against the raster oracle."""
    rng = np.random.default_rng(seed)
    matches = unresolved = contradictions = 0
    counts: dict[str, int] = {}
    for _ in range(n_draws):
        params = sample_snl_params(rng)
        analytic = classify_snl_boundary(params)
        counts[analytic.value] = counts.get(analytic.value, 0) + 1
        empirical = boundary_oracle(params, resolution)
        if empirical is BoundaryShape.UNRESOLVED:
            unresolved += 1
        elif empirical is analytic:
            matches += 1
        else:
            contradictions += 1
    return FuzzReport(n_draws, matches, unresolved, contradictions, counts)
