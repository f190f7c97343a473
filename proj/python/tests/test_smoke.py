import json
import math
import pathlib

import pytest

import air_defense as air

ROOT = pathlib.Path(__file__).resolve().parents[2]


def minimal(**overrides):
    doc = {
        "name": "smoke",
        "method": "vanilla",
        "sequence": [{"name": "clean", "attack": {"family": "none"}}],
    }
    doc.update(overrides)
    return doc


def test_version():
    assert air.__version__.count(".") == 2


def test_resolve_fills_defaults():
    resolved = json.loads(air.resolve_config(json.dumps(minimal())))
    assert resolved["method"] == "vanilla"
    assert resolved["training"]["batch_size"] > 0
    assert json.loads(air.resolve_config(json.dumps(resolved))) == resolved


def test_config_error_carries_path():
    with pytest.raises(air.ConfigError, match=r"\$\.training\.batch_size"):
        air.resolve_config(json.dumps(minimal(training={"batch_size": 0})))
    with pytest.raises(air.ConfigError):
        air.resolve_config("{ nope")


def test_bundled_configs_resolve():
    for path in sorted((ROOT / "configs").glob("*.json")):
        air.resolve_config(path.read_text())


def test_forgetting_metrics():
    m = air.forgetting_metrics([[0.9, None], [0.5, 0.8]])
    assert m["backward_transfer"] == pytest.approx(-0.4)
    assert m["average_accuracy"] == pytest.approx(0.65)
    assert m["forgetting"] == pytest.approx([0.4, 0.0])


def test_matrix_csv():
    rows = air.parse_matrix_csv("checkpoint,task_1,task_2\nafter_task_1,0.5,\nafter_task_2,0.25,0.75\n")
    assert rows == [[0.5, None], [0.25, 0.75]]


def test_kl_div():
    assert air.kl_div([[1.0, 2.0, 3.0]], [[1.0, 2.0, 3.0]]) == 0.0
    p, q = [0.5, 0.5], [0.9, 0.1]
    expected = sum(a * math.log(a / b) for a, b in zip(p, q))
    assert air.kl_div([[math.log(x) for x in p]], [[math.log(x) for x in q]]) == pytest.approx(expected)


def test_cluster_homogeneity():
    ratios = air.cluster_homogeneity(
        [1, 1, 2, 2, 1], [0, 0, 0, 0, 1], [[0, 0], [0, 2], [4, 0], [4, 2], [9, 9]], 2
    )
    assert ratios[0] == pytest.approx(4.0)
    assert math.isnan(ratios[1])


def test_missing_dataset_is_a_data_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(minimal(dataset={"root": str(tmp_path / "none")})))
    with pytest.raises(air.DataError):
        air.run_experiment(str(cfg))
