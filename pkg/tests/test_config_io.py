import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from counted_implant.config import ConfigError, RunConfig, load_config, parse_config
from counted_implant.io import (atomic_write_text, fmt, read_csv_columns, read_json,
                                read_timestamps, write_csv, write_json, write_timestamps)


def test_defaults_round_trip_through_ini():
    cfg = RunConfig()
    back = parse_config(cfg.to_ini())
    assert back == cfg
    assert back.digest() == cfg.digest()


def test_partial_file_takes_defaults():
    cfg = parse_config("[run]\nmaster_seed = 7\n[plan]\npreset = 12\n[hbt]\nmax_sites = 3\n")
    assert cfg.master_seed == 7 and cfg.plan.preset == 12 and cfg.hbt.max_sites == 3
    assert cfg.beam == RunConfig().beam
    assert cfg.thresholds.in_situ == cfg.plan.sca_threshold


def test_seed_changes_digest():
    cfg = RunConfig()
    assert cfg.with_seed(2).digest() != cfg.digest()
    assert cfg.with_seed(None) is cfg


@pytest.mark.parametrize("text", [
    "[beam]\nbogus = 1\n",
    "[nonsense]\na = 1\n",
    "[run]\nflavour = 3\n",
    "[plan]\npreset = ten\n",
    "[plan]\npreset = 0\n",
    "[thresholds]\nmixture_model = spline\n",
    "[plan]\nsca_threshold = 0.78\n[thresholds]\nin_situ = 0.5\n",
    "[activation]\npitch = 3.0\n",
    "[run]\nmaster_seed = -1\n",
    "no section header\n",
])
def test_invalid_configs_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")
    assert load_config(None) == RunConfig()


def test_fmt_is_canonical():
    assert fmt(0.1 + 0.2) == "0.3"
    assert fmt(np.int64(4)) == "4"
    assert fmt(True) == "1"
    assert fmt(float("nan")) == "nan"
    assert fmt(-np.inf) == "-inf"


def test_atomic_write_leaves_no_temp_on_failure(tmp_path, monkeypatch):
    target = tmp_path / "sub" / "a.txt"
    atomic_write_text(target, "first")

    def boom(*a):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        atomic_write_text(target, "second")
    assert target.read_text() == "first"
    assert [p.name for p in target.parent.iterdir()] == ["a.txt"]


def test_csv_and_json_round_trip(tmp_path):
    write_csv(tmp_path / "t.csv", ["i", "x", "lab"], [(1, 0.5, "a"), (2, 1e-9, "b")])
    c = read_csv_columns(tmp_path / "t.csv", {"i": np.int64, "lab": str})
    assert c["i"].tolist() == [1, 2] and c["x"].tolist() == [0.5, 1e-9]
    assert c["lab"].tolist() == ["a", "b"]
    write_json(tmp_path / "j.json", {"b": np.float64(1 / 3), "a": [np.int32(2)], "c": np.inf})
    text = (tmp_path / "j.json").read_text()
    assert text.index('"a"') < text.index('"b"')
    assert read_json(tmp_path / "j.json") == {"a": [2], "b": 0.3333333333, "c": "inf"}


@given(st.lists(st.floats(0, 1e9, allow_nan=False), max_size=50))
def test_timestamps_round_trip_to_picoseconds(tmp_path_factory, ts):
    path = tmp_path_factory.mktemp("ts") / "s.txt"
    t = np.sort(np.array(ts, dtype=float))
    write_timestamps(path, t)
    back = read_timestamps(path)
    assert back.shape == t.shape
    assert np.all(np.abs(back - t) <= 5e-4 + 1e-12 * t)
