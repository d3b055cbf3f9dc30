import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from topogan import simp
from topogan.dataset import DesignParams, area_resize
from topogan.errors import DataError, ParameterError
from topogan.nn import Model
from topogan.pipeline import (
    RunConfig, calibration_floor, iou, perturbation_corners, validate_sample,
)
from topogan.regressor import TrainedRegressor, build_regressor

MESH = simp.Mesh(24, 16)


def constant_regressor(params) -> TrainedRegressor:
    """Regressor whose zeroed network always returns ``params`` (standardised output 0)."""
    model = Model(build_regressor((32, 32, 1), "desk"), seed=0)
    model.set_parameters({k: np.zeros_like(v) for k, v in model.parameters().items()})
    return TrainedRegressor(model, np.array(params, dtype=float), np.ones(3), [], {})


@pytest.fixture(scope="module")
def known_structure():
    p = DesignParams(0.5, 3.0, 1.5)
    res = simp.optimize(simp.SimpSettings(*p.as_tuple()), MESH)
    return p, res.density


class TestIou:
    def test_identical(self):
        a = np.eye(4)
        assert iou(a, a) == 1.0

    def test_disjoint_half_planes(self):
        a = np.zeros((4, 4))
        a[:, :2] = 1
        assert iou(a, 1 - a) == 0.0

    def test_hand_case(self):
        a = np.array([[1, 1, 0], [1, 0, 0], [0, 0, 0]])
        b = np.array([[1, 1, 0], [0, 0, 0], [0, 0, 1]])
        assert iou(a, b) == 0.5  # overlap 2, union 4

    def test_both_empty(self):
        assert iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            iou(np.zeros((3, 3)), np.zeros((3, 4)))

    @given(arrays(np.int8, (5, 6), elements=st.integers(0, 1)), arrays(np.int8, (5, 6), elements=st.integers(0, 1)))
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0


class TestValidateSample:
    def test_self_consistency_ceiling(self, known_structure):
        p, density = known_structure
        rep = validate_sample(density, constant_regressor(p.as_tuple()), MESH)
        assert not rep.failed
        assert rep.iou == 1.0
        assert rep.mae == 0.0
        assert rep.params == p
        assert 0 < rep.compliance < rep.result.initial_compliance
        assert set(rep.timings) == {"predict", "simp", "compare"}

    def test_deterministic(self, known_structure):
        p, density = known_structure
        reg = constant_regressor((0.45, 2.7, 2.0))
        a = validate_sample(density, reg, MESH)
        b = validate_sample(density, reg, MESH)
        assert a.record() | {"timings": None} == b.record() | {"timings": None}
        np.testing.assert_array_equal(a.result.density, b.result.density)

    def test_out_of_bounds_prediction_is_clamped_but_reported(self, known_structure):
        _, density = known_structure
        rep = validate_sample(density, constant_regressor((0.295, 3.301, 2.736)), MESH)
        assert rep.raw_prediction.vol_frac == pytest.approx(0.295)
        assert rep.params.vol_frac == 0.3
        assert abs(rep.result.density.mean() - 0.3) < 1e-3

    def test_blank_image_runs_and_scores_near_zero(self):
        rep = validate_sample(np.zeros((16, 24)), constant_regressor((0.4, 3.0, 1.5)), MESH)
        assert not rep.failed
        assert rep.iou == 0.0
        assert 0 <= rep.mae <= 1

    def test_simp_failure_flagged(self, known_structure):
        _, density = known_structure
        rep = validate_sample(density, constant_regressor((0.5, 3.0, 1.5)), MESH, simp_overrides={"max_iters": 0})
        assert rep.failed and rep.iou is None and rep.error
        assert rep.record()["failed"] is True

    def test_comparison_at_image_resolution(self, known_structure):
        p, density = known_structure
        small = area_resize(density, 8, 12)
        rep = validate_sample(small, constant_regressor(p.as_tuple()), MESH)
        assert rep.gan_processed.shape == (8, 12) == rep.simp_processed.shape
        assert rep.iou == 1.0


def test_perturbation_corners():
    corners = perturbation_corners(DesignParams(0.5, 3.0, 2.0), (0.01, 0.1, 0.2))
    assert len(set(corners)) == 8
    assert DesignParams(0.49, 2.9, 1.8) in corners and DesignParams(0.51, 3.1, 2.2) in corners


def test_calibration_floor_zero_deltas_is_one_minus_margin():
    floor, scores = calibration_floor(DesignParams(0.5, 3.0, 1.5), (0, 0, 0), simp.Mesh(12, 8), 8)
    assert scores == [1.0] * 8
    assert floor == pytest.approx(0.95)


class TestRunConfig:
    def test_parse_and_types(self):
        cfg = RunConfig.from_text("# comment\nnelx = 60\nvolfrac=0.5\nprofile = desk\naugment = true\ncounts = 6,5,5\n")
        assert cfg.values == {"nelx": 60, "volfrac": 0.5, "profile": "desk", "augment": True, "counts": "6,5,5"}

    def test_flags_win_and_none_ignored(self):
        cfg = RunConfig({"seed": 1, "nelx": 60}).merged({"seed": 7, "nelx": None})
        assert cfg["seed"] == 7 and cfg["nelx"] == 60

    def test_defaults_lose(self):
        cfg = RunConfig({"seed": 1}).with_defaults({"seed": 0, "steps": 10})
        assert cfg.values == {"seed": 1, "steps": 10}

    def test_text_roundtrip(self):
        cfg = RunConfig({"a": 1, "b": 0.25, "c": "x"})
        assert RunConfig.from_text(cfg.to_text()) == cfg

    def test_missing_key_and_file(self, tmp_path):
        with pytest.raises(ParameterError):
            RunConfig()["nope"]
        with pytest.raises(ParameterError):
            RunConfig.load(tmp_path / "absent.cfg")
