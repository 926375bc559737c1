from pathlib import Path

import pytest

from collabslam.errors import ConfigError
from collabslam.runner import server_config
from collabslam.scenario import load_scenario, parse_scenario

SCENARIOS = sorted((Path(__file__).parent.parent / "scenarios").glob("*.yaml"))

GOOD = """\
name: t
robots:
  - name: r
    waypoints: [[0, 0], [5, 0]]
    cameras:
      - id: 1
      - id: 2
        mount: rear
rigid_pairs:
  - {a: 1, b: 2}
"""


@pytest.mark.parametrize("path", SCENARIOS, ids=lambda p: p.stem)
def test_shipped_scenarios_load(path):
    sc = load_scenario(path)
    assert sc.cameras()
    server_config(sc)


def test_defaults_and_rigid_pair_transform():
    sc = parse_scenario(GOOD)
    assert sc.noise.pixel_sigma == 1.0 and sc.network.window == 256 and sc.server.exclusion
    cfg = server_config(sc)
    (pair,) = cfg.rigid_pairs
    # front and rear cameras face opposite ways, so b_from_a is a half turn
    assert pair.client_a == 1 and pair.client_b == 2
    assert abs(pair.b_from_a.rotation_angle() - 3.141592653589793) < 1e-9


def _err(text):
    with pytest.raises(ConfigError) as exc:
        parse_scenario(text, "s.yaml")
    return str(exc.value)


def test_unknown_key_reports_its_line():
    msg = _err(GOOD.replace("    cameras:", "    colour: red\n    cameras:"))
    assert msg.startswith("s.yaml:5: robots.0.colour")


def test_bad_value_reports_its_line():
    msg = _err(GOOD.replace("mount: rear", "mount: sideways"))
    assert "s.yaml:8: robots.0.cameras.1.mount" in msg


def test_repeated_waypoint_rejected():
    assert "s.yaml:4:" in _err(GOOD.replace("[[0, 0], [5, 0]]", "[[0, 0], [0, 0]]"))


def test_yaml_syntax_error_and_non_mapping():
    assert _err("robots: [\n  - x: [1,\n").startswith("s.yaml:")
    assert _err("- 1\n- 2\n") == "s.yaml:1: scenario must be a mapping"


def test_unknown_rigid_camera():
    sc = parse_scenario(GOOD.replace("{a: 1, b: 2}", "{a: 1, b: 9}"))
    with pytest.raises(ConfigError):
        server_config(sc)


def test_missing_file():
    with pytest.raises(ConfigError):
        load_scenario("/nonexistent/scenario.yaml")
