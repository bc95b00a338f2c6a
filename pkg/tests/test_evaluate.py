import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hyperid import evaluate as ev
from hyperid.data import SpecimenConfig
from hyperid.errors import DegenerateTruth, NonPositiveJacobian, UnknownPath
from hyperid.materials import get_model, invariants
from hyperid.mesh import grid_mesh

GAMMAS = np.linspace(0.0, 0.5, 11)


def test_path_examples():
    np.testing.assert_allclose(ev.deformation_path("UT", 0.5), np.diag([1.5, 1, 1]))
    np.testing.assert_allclose(ev.deformation_path("UC", 0.25), np.diag([0.8, 1, 1]))
    np.testing.assert_allclose(ev.deformation_path("BC", 1.0), np.diag([0.5, 0.5, 1]))
    np.testing.assert_allclose(ev.deformation_path("PS", 1.0), np.diag([2.0, 0.5, 1]))
    ss = ev.deformation_path("SS", 0.3)
    assert ss[0, 1] == 0.3 and ss[1, 0] == 0.0
    for p in ev.PATH_IDS:
        np.testing.assert_array_equal(ev.deformation_path(p, 0.0), np.eye(3))


def test_path_errors():
    with pytest.raises(UnknownPath):
        ev.deformation_path("XX", 0.1)
    with pytest.raises(ValueError):
        ev.deformation_path("UT", 1.5)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(ev.PATH_IDS), st.floats(0.0, 1.0))
def test_paths_keep_positive_jacobian(path_id, g):
    F = ev.deformation_path(path_id, g)
    assert np.linalg.det(F) > 0
    assert F[2, 2] == 1.0 and F[0, 2] == F[2, 0] == 0.0


def test_truth_against_itself():
    nh = get_model("NH")
    pairs = ev.evaluate_paths(nh, nh, GAMMAS)
    assert [p.path_id for p in pairs] == list(ev.PATH_IDS)
    for p in pairs:
        np.testing.assert_array_equal(p.pred.W, p.truth.W)
        np.testing.assert_array_equal(p.pred.P, p.truth.P)
        assert p.relative_rmse() == 0.0
        assert p.truth.W[0] == 0.0
    ut = ev.path_curve(nh, "UT", [0.5])
    assert ut.W[0] == pytest.approx(0.49668, abs=5e-6)
    assert ut.P.shape == (1, 4)


def test_relative_rmse():
    assert ev.relative_rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert ev.relative_rmse([2.0, 4.0], [1.0, 2.0]) == pytest.approx(1.0)
    with pytest.raises(DegenerateTruth):
        ev.relative_rmse([1.0, 1.0], [0.0, 0.0])


def test_r_squared_examples():
    assert ev.r_squared([1, 2, 4], [1, 2, 3]) == pytest.approx(0.5)
    assert ev.r_squared([2, 2, 2], [1, 2, 3]) == pytest.approx(0.0)
    assert ev.r_squared([1, 2, 3], [1, 2, 3]) == 1.0
    with pytest.raises(DegenerateTruth):
        ev.r_squared([1, 2], [5, 5])
    with pytest.raises(ValueError):
        ev.r_squared([1, 2], [1, 2, 3])


def test_fiber_angle_error_modulo_pi():
    assert ev.fiber_angle_error(0.1 + math.pi, 0.1) == pytest.approx(0.0, abs=1e-12)
    assert ev.fiber_angle_error(math.pi / 4 + 0.02, math.pi / 4) == pytest.approx(0.02)
    assert ev.fiber_angle_error(0.01, math.pi - 0.01) == pytest.approx(0.02)
    assert ev.fiber_angle_error(-0.3, 0.3) == pytest.approx(0.6)


def test_invariant_cloud_affine_field():
    m = grid_mesh(3, 3)
    u = np.column_stack([0.1 * m.nodes[:, 0], np.zeros(m.n_nodes)])
    cloud = ev.invariant_cloud(m, u)
    inv = invariants(np.diag([1.1, 1.0, 1.0]))
    assert cloud.shape == (1, m.n_elements, 3)
    np.testing.assert_allclose(cloud[0], np.tile([inv.Itilde1 - 3, inv.Itilde2 - 3, 0.01],
                                                 (m.n_elements, 1)), atol=1e-13)
    zero = ev.invariant_cloud(m, np.zeros((2, m.n_nodes, 2)))
    np.testing.assert_allclose(zero, 0.0, atol=1e-15)


def test_invariant_cloud_inverted_elements():
    m = grid_mesh(2, 2)
    u = np.column_stack([-2.0 * m.nodes[:, 0], np.zeros(m.n_nodes)])
    assert np.isnan(ev.invariant_cloud(m, u)).all()
    with pytest.raises(NonPositiveJacobian):
        ev.invariant_cloud(m, u, strict=True)


def test_path_cloud_matches_invariants():
    c = ev.path_cloud([0.0, 0.5])
    assert set(c) == set(ev.PATH_IDS)
    inv = invariants(np.diag([1.5, 1.5, 1.0]))
    np.testing.assert_allclose(c["BT"][1], [inv.Itilde1 - 3, inv.Itilde2 - 3, 1.25 ** 2],
                               rtol=1e-13)
    np.testing.assert_allclose(c["SS"][0], 0.0, atol=1e-15)


@pytest.fixture(scope="module")
def small_deploy():
    cfg = SpecimenConfig(kind="validation", target_node_count=200, deltas=(0.05, 0.1))
    nh = get_model("NH")
    return ev.deploy_and_score(nh, nh, cfg, label="self")


def test_deploy_with_truth_is_perfect(small_deploy):
    s = small_deploy
    assert s.r2 == {"I1": 1.0, "J": 1.0}
    assert s.errors == {}
    np.testing.assert_allclose(s.deltas, [0.05, 0.1])
    assert s.reaction_true[0] == 0.0 and s.reaction_true[-1] > 0
    np.testing.assert_array_equal(s.reaction_true, s.reaction_pred)
    assert s.cloud_true.shape == (2, s.i1_true.shape[1], 3)


def test_deploy_detects_wrong_model():
    cfg = SpecimenConfig(kind="validation", target_node_count=200, deltas=(0.05, 0.1))
    s = ev.deploy_and_score(get_model("IH"), get_model("NH"), cfg)
    assert s.r2["I1"] < 1.0 and s.r2["J"] < 1.0
    assert not np.allclose(s.reaction_true, s.reaction_pred)


def _report_items(small_deploy):
    nh, ih = get_model("NH"), get_model("IH")
    pairs = ev.evaluate_paths(ih, nh, GAMMAS, paths=("UT", "SS"), member="m0")
    cloud = ev.CloudSet("training", ev.invariant_cloud(grid_mesh(2, 2),
                                                       np.zeros((1, 9, 2))))
    return pairs + [small_deploy, cloud]


def test_emit_report_layout(tmp_path, small_deploy):
    out = ev.emit_report(_report_items(small_deploy), tmp_path / "r")
    index = json.loads((out / "index.json").read_text())
    files = {a["file"] for a in index["artifacts"]}
    for pid in ("UT", "SS"):
        assert {f"path_m0_{pid}_true.csv", f"path_m0_{pid}_pred.csv",
                f"path_m0_{pid}.svg"} <= files
    assert {"scores_self.csv", "deploy_self_reactions.csv", "deploy_self_elements.csv",
            "deploy_self_scatter.svg", "deploy_self_reactions.svg", "cloud_training.csv"} <= files
    assert all((out / f).exists() for f in files)
    head = (out / "path_m0_UT_true.csv").read_text().splitlines()
    assert head[0] == "path_id,gamma,W,P11,P12,P21,P22" and len(head) == len(GAMMAS) + 1


def test_emit_report_empty(tmp_path):
    out = ev.emit_report([], tmp_path / "e")
    assert sorted(p.name for p in out.iterdir()) == ["index.json"]
    with pytest.raises(TypeError):
        ev.emit_report([object()], tmp_path / "bad")


def test_emit_report_is_byte_identical(tmp_path, small_deploy):
    items = _report_items(small_deploy)
    a = ev.emit_report(items, tmp_path / "a")
    b = ev.emit_report(items, tmp_path / "b")
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n


def test_paths_table(tmp_path):
    nh = get_model("NH")
    pairs = ev.evaluate_paths(nh, nh, GAMMAS, paths=("PS",), member="m1", accepted=False)
    lines = ev.write_paths_table(pairs, tmp_path / "paths.csv").read_text().splitlines()
    assert lines[0].split(",")[:6] == ["member", "accepted", "path_id", "gamma", "W_true", "W_pred"]
    assert len(lines) == len(GAMMAS) + 1
    assert lines[1].startswith("m1,0,PS,0,")
