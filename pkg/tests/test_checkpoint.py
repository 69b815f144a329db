import json

import numpy as np
import pytest

from abba.adapters import AbbaChain, HiraAdapter, LoraAdapter, ScaleMode
from abba.checkpoint import load_adapter, save_adapter
from abba.errors import FormatError, ShapeError
from abba.gradients import random_abba


def test_abba_round_trip(tmp_path, rng):
    ad = random_abba(rng, 6, 5, 2, 3, alpha=1.25)
    save_adapter(tmp_path, ad)
    env = json.loads((tmp_path / "adapter.json").read_text())
    assert env == {
        "schema_version": 1, "kind": "abba", "alpha": 1.25, "ranks": [2, 3],
        "shapes": {"b1": [6, 2], "a1": [2, 5], "b2": [6, 3], "a2": [3, 5]},
    }
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a1.csv", "a2.csv", "adapter.json", "b1.csv", "b2.csv"]
    back = load_adapter(tmp_path)
    assert np.array_equal(back.delta(), ad.delta())


def test_other_kinds(tmp_path, rng):
    w0 = rng.standard_normal((4, 3))
    cases = [
        LoraAdapter(rng.standard_normal((4, 2)), rng.standard_normal((2, 3)), 2.0, ScaleMode.RANK_STABILIZED),
        HiraAdapter(w0, rng.standard_normal((4, 2)), rng.standard_normal((2, 3)), 2.0),
        AbbaChain([(rng.standard_normal((4, 1)), rng.standard_normal((1, 3))) for _ in range(3)], 1.5),
    ]
    for i, ad in enumerate(cases):
        d = tmp_path / str(i)
        save_adapter(d, ad)
        assert np.array_equal(load_adapter(d, w0=w0).delta(), ad.delta())


def test_hira_needs_base(tmp_path, rng):
    save_adapter(tmp_path, HiraAdapter(np.ones((3, 3)), np.ones((3, 1)), np.ones((1, 3)), 1.0))
    with pytest.raises(ShapeError):
        load_adapter(tmp_path)


def test_corrupt(tmp_path, rng):
    save_adapter(tmp_path, random_abba(rng, 3, 3, 1, 1))
    (tmp_path / "b1.csv").write_text("1.0\n")
    with pytest.raises(FormatError, match="b1.csv"):
        load_adapter(tmp_path)
    env = json.loads((tmp_path / "adapter.json").read_text())
    env["schema_version"] = 9
    (tmp_path / "adapter.json").write_text(json.dumps(env))
    with pytest.raises(FormatError, match="schema_version"):
        load_adapter(tmp_path)
