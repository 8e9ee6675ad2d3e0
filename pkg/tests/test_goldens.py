import json

import numpy as np
import pytest

from cinetransfer.geometry import SE3Pose, project, se3_exp
from cinetransfer.oracles.goldens import (BUILDERS, GoldenMismatch, compare, load_goldens,
                                          regenerate_goldens)


def test_every_case_has_provenance():
    cases = load_goldens()
    assert set(cases) == set(BUILDERS)
    for c in cases.values():
        assert c["provenance"] == "[TRIVIAL]" or c["provenance"].startswith("[DERIVED:")
        assert c["tol"] >= 0 and c["regen_tol"] >= 0


def test_closed_form_cases():
    cases = load_goldens()
    assert np.allclose(se3_exp(np.zeros(6)).matrix(), cases["se3_exp_zero"]["expected"], atol=0)
    R = se3_exp(np.array(cases["rodrigues_z90"]["inputs"]["xi"])).rotation
    assert np.allclose(R, cases["rodrigues_z90"]["expected"], atol=1e-12)
    pin = cases["pinhole_point"]
    inp = pin["inputs"]
    uv = project(np.array(inp["point"]), SE3Pose(np.eye(3), np.zeros(3)), inp["focal"],
                 tuple(inp["resolution"]))
    assert np.allclose(uv, pin["expected"], atol=1e-12)


def test_compare_reports_max_difference():
    a = {"expected": [1.0, 2.0]}
    assert compare(a, {"expected": [1.0, 2.5]}) == pytest.approx(0.5)
    assert compare(a, {"expected": [1.0]}) == float("inf")


def test_regenerate_check_passes_on_fast_cases():
    ids = ["se3_exp_zero", "rodrigues_z90", "pinhole_point", "exact_ot_6x6", "point_mass_shift"]
    regenerate_goldens(check=True, ids=ids)


def test_regenerate_check_detects_drift(tmp_path):
    cases = load_goldens()
    cases["pinhole_point"]["expected"] = [0.0, 0.0]
    path = tmp_path / "g.json"
    path.write_text(json.dumps({"schema_version": 1, "cases": list(cases.values())}))
    with pytest.raises(GoldenMismatch, match="pinhole_point"):
        regenerate_goldens(path, check=True, ids=["pinhole_point"])


def test_regenerate_writes_subset(tmp_path):
    path = tmp_path / "g.json"
    regenerate_goldens(path, ids=["pinhole_point"])
    regenerate_goldens(path, ids=["se3_exp_zero"])
    assert set(load_goldens(path)) == {"pinhole_point", "se3_exp_zero"}


@pytest.mark.slow
def test_full_regeneration_matches_committed():
    regenerate_goldens(check=True)
