import numpy as np
import pytest

from gateshare import xorlab as X
from gateshare.tensor import GateCounter
from gateshare.xorlab import BoundaryShape, SnlScoreParams


class TestCheckerboard:
    def test_opposite_signs_label_one(self):
        assert X.checkerboard_label(0.5, -0.5) == 1

    def test_same_signs_label_zero(self):
        assert X.checkerboard_label(-0.3, -0.7) == 0

    def test_class_balance(self):
        for seed in (0, 1, 2):
            _, y = X.make_checkerboard(800, np.random.default_rng(seed))
            assert 0.45 <= y.mean() <= 0.55

    def test_no_axis_points(self):
        pts, _ = X.make_checkerboard(500, np.random.default_rng(3))
        assert np.all(pts[:, 0] != 0) and np.all(pts[:, 1] != 0)

    def test_sign_equivalence(self):
        rng = np.random.default_rng(4)
        pts, _ = X.make_checkerboard(1000, rng)
        lhs = (-np.sign(pts[:, 0]) * pts[:, 1]) > 0
        rhs = np.sign(pts[:, 0]) != np.sign(pts[:, 1])
        assert np.array_equal(lhs, rhs)


class TestConstructiveNetwork:
    def test_paper_examples(self):
        net = X.constructive_network()
        f = net.forward(np.array([[1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])).data[:, 0]
        assert f[0] == 1.0   # signs differ -> positive
        assert f[1] == -1.0  # signs agree -> negative
        assert f[2] == 1.0   # closed gate leaves x2 through the bias

    def test_exact_grid_accuracy(self):
        net = X.constructive_network()
        acc = X.grid_accuracy(lambda pts: X.constructive_predict(net, pts))
        assert acc == 1.0

    def test_single_gate_per_input(self):
        net = X.constructive_network()
        pts, _ = X.evaluation_grid()
        with GateCounter() as counter:
            net.forward(pts)
        assert counter.step_evals == len(pts)

    def test_grid_excludes_axes(self):
        pts, _ = X.evaluation_grid()
        assert len(pts) == 200 * 200
        assert np.all(pts != 0.0)


class TestClassifySnlBoundary:
    def test_pure_linear_single_line(self):
        p = SnlScoreParams(a=0.0, w=[1.0, 0.0], b=0.0, v=[1.0, 0.0], c=0.0)
        assert X.classify_snl_boundary(p) is BoundaryShape.SINGLE_LINE

    def test_two_parallel_lines(self):
        p = SnlScoreParams(a=-2.0, w=[1.0, 0.0], b=0.0, v=[1.0, 0.0], c=0.5)
        assert X.classify_snl_boundary(p) is BoundaryShape.TWO_PARALLEL_LINES

    def test_two_piece(self):
        p = SnlScoreParams(a=1.0, w=[1.0, 0.0], b=0.0, v=[0.0, 1.0], c=0.0)
        assert X.classify_snl_boundary(p) is BoundaryShape.TWO_PIECE_PIECEWISE_LINEAR

    def test_constant_positive_empty(self):
        p = SnlScoreParams(a=1.0, w=[1.0, 0.0], b=0.0, v=[0.0, 0.0], c=1.0)
        assert X.classify_snl_boundary(p) is BoundaryShape.EMPTY

    def test_zero_function_empty(self):
        p = SnlScoreParams(a=0.0, w=[0.0, 0.0], b=0.0, v=[0.0, 0.0], c=0.0)
        assert X.classify_snl_boundary(p) is BoundaryShape.EMPTY

    def test_hinge_only(self):
        up = SnlScoreParams(a=1.0, w=[1.0, 0.0], b=0.0, v=[0.0, 0.0], c=0.0)
        down = SnlScoreParams(a=-1.0, w=[1.0, 0.0], b=0.0, v=[0.0, 0.0], c=0.0)
        assert X.classify_snl_boundary(up) is BoundaryShape.SINGLE_LINE
        assert X.classify_snl_boundary(down) is BoundaryShape.EMPTY

    def test_collinear_on_gate_line(self):
        # both pieces vanish exactly on the gate line: one straight boundary
        p = SnlScoreParams(a=1.0, w=[1.0, 0.0], b=0.0, v=[-3.0, 0.0], c=0.0)
        assert X.classify_snl_boundary(p) is BoundaryShape.SINGLE_LINE


class TestBoundaryOracle:
    def test_matches_on_spec_examples(self):
        cases = [
            SnlScoreParams(a=-2.0, w=[1.0, 0.0], b=0.0, v=[1.0, 0.0], c=0.5),
            SnlScoreParams(a=1.0, w=[1.0, 0.0], b=0.0, v=[0.0, 1.0], c=0.0),
            SnlScoreParams(a=0.0, w=[1.0, 0.0], b=0.0, v=[1.0, 0.0], c=0.0),
        ]
        for p in cases:
            assert X.boundary_oracle(p) is X.classify_snl_boundary(p)

    def test_constant_sign_raster_empty(self):
        p = SnlScoreParams(a=1.0, w=[1.0, 0.0], b=0.0, v=[0.0, 0.0], c=1.0)
        assert X.boundary_oracle(p) is BoundaryShape.EMPTY

    def test_pure_linear_single_line(self):
        p = SnlScoreParams(a=0.0, w=[0.0, 1.0], b=0.3, v=[0.7, -0.4], c=0.1)
        assert X.boundary_oracle(p) is BoundaryShape.SINGLE_LINE

    def test_resolution_floor(self):
        p = SnlScoreParams(a=0.0, w=[1.0, 0.0], b=0.0, v=[1.0, 0.0], c=0.0)
        with pytest.raises(ValueError):
            X.boundary_oracle(p, resolution=64)


class TestFuzz:
    def test_small_fuzz_has_no_contradictions(self):
        report = X.corollary_fuzz(200, seed=1234)
        assert report.contradictions == 0
        assert report.unresolved <= 1
        # every shape class should actually be exercised
        assert set(report.shape_counts) >= {
            BoundaryShape.EMPTY.value,
            BoundaryShape.SINGLE_LINE.value,
            BoundaryShape.TWO_PARALLEL_LINES.value,
            BoundaryShape.TWO_PIECE_PIECEWISE_LINEAR.value,
        }
