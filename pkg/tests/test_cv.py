from __future__ import annotations

import datetime as dt
import json

import numpy as np
import pytest

from s2sdown import cv
from s2sdown.io.config import load_config
from s2sdown.synth import write_mini_dataset


@pytest.fixture(scope="module")
def mini(tmp_path_factory):
    d = tmp_path_factory.mktemp("mini")
    cfg = write_mini_dataset(d, seed=1)
    return load_config(cfg, overrides={"epochs": 2, "search_budget": 1, "bootstrap_replicates": 20})


def test_season_year_runs_july_to_june():
    assert cv.season_year(dt.date(1990, 12, 1)) == 1991
    assert cv.season_year(dt.date(1991, 2, 1)) == 1991
    assert cv.season_year(dt.date(1991, 7, 1)) == 1992
    assert cv.season_start(1991) == dt.date(1990, 7, 1)


def test_layout_partitions_years():
    lay = cv.build_layout((2000, 27), outer_k=3, inner_k=6)
    tests = [y for f in lay.folds for y in f.test_years]
    assert sorted(tests) == list(range(2000, 2027))
    for f in lay.folds:
        assert len(f.test_years) == 9 and len(f.inner) == 6
        assert all(len(va) == 3 for _, va in f.inner)
    assert lay.fold_of(dt.date(2010, 1, 15)) == 1
    assert lay.fold_of(dt.date(1950, 1, 15)) is None


@pytest.mark.parametrize("period, k, inner", [((2000, 10), 3, 2), ((2000, 6), 3, 3), ([2001, 2000, 2002], 3, 1)])
def test_layout_rejects_uneven_or_unsorted(period, k, inner):
    with pytest.raises(cv.LayoutError):
        cv.build_layout(period, k, inner)


def test_layout_invariants_are_checked():
    fold = cv.CvFold(0, (1,), (1, 2), ())
    with pytest.raises(cv.LayoutError, match="overlap"):
        cv.CvLayout((1, 2), (fold,))


def test_leakage_guard_fires(mini, tmp_path):
    inp = cv.load_inputs(mini)
    fold = inp.layout.folds[0]
    test_init = next(d for d in inp.hind_x.inits if cv.season_year(d) in fold.test_years)
    inp.clim_days = set(inp.clim_days) | {(test_init - dt.date(1970, 1, 1)).days}
    with pytest.raises(cv.LeakageError, match="overlap the test set"):
        cv.run_fold(inp, fold, tmp_path)


def test_run_experiment_outputs_and_threads(mini, tmp_path):
    a = cv.run_experiment(mini, tmp_path / "a")
    b = cv.run_experiment(mini, tmp_path / "b", threads=3)
    assert not (tmp_path / "a" / "STALE").exists()
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert set(man["leakage"]) == {"fold0", "fold1", "fold2"}
    assert all(v["overlap"] == 0 for v in man["leakage"].values())
    assert man["files"] == b.manifest["files"]
    for o in a.folds:
        assert np.intersect1d(o.train_days, o.test_days).size == 0
    head = (tmp_path / "a" / "fold0" / "ssim.csv").read_text().splitlines()[0]
    assert head.split(",") == cv.SSIM_COLUMNS


def test_failure_leaves_stale_marker(mini, tmp_path):
    import dataclasses

    broken = dataclasses.replace(mini, hindcast_x=str(tmp_path / "missing.gfd"))
    with pytest.raises(cv.StageError, match="setup, stage load: FileNotFoundError"):
        cv.run_experiment(broken, tmp_path / "out")
    assert "FileNotFoundError" in (tmp_path / "out" / "STALE").read_text()
