import csv
import io
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from countshift.dataio import Dataset, ImagePatch, crop_resize, hist_equalize
from countshift.errors import InvalidArgumentError, MalformedDatasetError
from countshift.evaluate import (
    DEFAULT_GRIDS,
    compute_omega,
    evaluate_mre,
    omega_from_counts,
    parse_grid_value,
    relative_error,
    report_from_counts,
    run_sweep,
    select_best,
    sub_images,
)
from countshift.models import init_params, predict_counts
from countshift.trainer import AdaptConfig


def test_relative_error_example():
    assert relative_error(10, 8) == 20.0


def test_perfect_predictions():
    rep = report_from_counts(["a", "b"], [4, 70], [4, 70])
    assert rep.mre == 0.0 and rep.buckets == {"<31": 0.0, "31-60": None, ">60": 0.0}


def test_small_table():
    rep = report_from_counts(["a", "b", "c"], [10, 20, 5], [8, 25, 5])
    assert rep.mre == 15.0


def test_zero_gt_is_skipped_and_reported():
    rep = report_from_counts(["a", "b"], [0, 10], [3, 12])
    assert rep.skipped_zero_gt == 1 and rep.mre == 20.0
    assert rep.rows[0].relative_error is None
    assert "a,0.0,3.0,\n" in rep.csv_text()


def test_bucket_edges():
    rep = report_from_counts(list("abcdef"), [30, 31, 60, 61, 1, 100], [0, 0, 0, 0, 0, 0])
    assert rep.bucket_sizes == {"<31": 2, "31-60": 2, ">60": 2}


@given(st.lists(st.tuples(st.integers(0, 120), st.floats(0, 200)), min_size=1, max_size=40))
def test_report_invariants(pairs):
    gt = [g for g, _ in pairs]
    pred = [p for _, p in pairs]
    rep = report_from_counts([str(i) for i in range(len(pairs))], gt, pred)
    errs = [100 * abs(g - p) / g for g, p in pairs if g]
    if errs:
        assert abs(rep.mre - np.mean(errs)) <= 1e-9
    else:
        assert rep.mre is None
    assert sum(rep.bucket_sizes.values()) == len(errs)
    assert rep.skipped_zero_gt == len(pairs) - len(errs)


def test_report_files(tmp_path):
    rep = report_from_counts(["a", "b"], [10, 40], [9, 44])
    csv_path, json_path = rep.write(tmp_path)
    rows = list(csv.DictReader(io.StringIO(csv_path.read_text())))
    assert [r["id"] for r in rows] == ["a", "b"] and float(rows[1]["relative_error"]) == 10.0
    summary = json.loads(json_path.read_text())
    assert summary["mre"] == 10.0 and summary["images"] == 2


def _dataset(images, counts=None, domain="target"):
    items = []
    for i, img in enumerate(images):
        pts = None if counts is None else np.zeros((counts[i], 2)) + 1.0
        items.append(ImagePatch(img, id=f"t_{i:03d}", points=pts, domain=domain))
    return Dataset(None, "train", domain, items)


@pytest.fixture(scope="module")
def small_images():
    return np.random.default_rng(0).integers(0, 256, (12, 32, 32)).astype(np.uint8)


def test_evaluate_mre_needs_labels(small_images):
    with pytest.raises(MalformedDatasetError):
        evaluate_mre(init_params(0), _dataset(small_images))


def test_evaluate_mre_uses_model_counts(small_images, tmp_path):
    params = init_params(0)
    ds = _dataset(small_images, counts=list(range(1, 13)))
    rep = evaluate_mre(params, ds, dump_dir=tmp_path / "maps")
    preds = predict_counts(params, ds.images())
    np.testing.assert_array_equal([r.pred_count for r in rep.rows], preds)
    assert len(list((tmp_path / "maps").glob("*.pgm"))) == 12


def test_evaluate_is_repeatable(small_images):
    ds = _dataset(small_images, counts=[5] * 12)
    a = evaluate_mre(init_params(1), ds)
    b = evaluate_mre(init_params(1), ds)
    assert a.csv_text() == b.csv_text() and a.json_text() == b.json_text()


# ---------------------------------------------------------------- omega


def test_omega_of_zero_model(small_images):
    params = init_params(2)
    params["reg.head.weight"].data[...] = 0
    assert compute_omega(params, _dataset(small_images)) == 12


def test_omega_from_counts_examples():
    assert omega_from_counts([3], [7]) == 0
    assert omega_from_counts([3], [7], m=4) == 1
    assert omega_from_counts([5, 5, 1], [5, 4, 2]) == 2


def test_omega_matches_loop_oracle():
    images = np.random.default_rng(3).integers(0, 256, (50, 32, 32)).astype(np.uint8)
    params = init_params(3)
    ds = _dataset(images)
    expected = 0
    for img in images:
        x = hist_equalize(img).astype(np.float64) / 255.0
        full = predict_counts(params, x[None])[0]
        sub = predict_counts(params, crop_resize(x, 0.8, (3, 3))[None])[0]
        expected += int(full - sub >= 0)
    assert compute_omega(params, ds) == expected
    assert 0 <= expected <= 50


def test_omega_random_crop_mode(small_images):
    params = init_params(4)
    ds = _dataset(small_images)
    score = compute_omega(params, ds, crop="random", seeds=(0, 1, 2))
    assert 0 <= score <= 12
    assert score == compute_omega(params, ds, crop="random", seeds=(0, 1, 2))
    with pytest.raises(InvalidArgumentError):
        compute_omega(params, ds, crop="corner")


def test_sub_images_center_matches_crop():
    x = np.random.default_rng(5).uniform(size=(2, 40, 40))
    np.testing.assert_array_equal(sub_images(x, 0.8)[1], crop_resize(x[1], 0.8, (4, 4)))


# ---------------------------------------------------------------- sweep


def test_grid_values():
    assert parse_grid_value("1/26") == 1 / 26 and parse_grid_value("0.1") == 0.1 and parse_grid_value(45) == 45.0
    with pytest.raises(InvalidArgumentError):
        parse_grid_value("one")
    assert DEFAULT_GRIDS["lambda2"] == ["1/22", "1/24", "1/26", "1/28"]


def test_select_best_ties_go_to_first():
    assert select_best([3, 7, 7, 1]) == 1
    assert select_best([5]) == 0
    with pytest.raises(InvalidArgumentError):
        select_best([])


@given(st.lists(st.integers(0, 5), min_size=1, max_size=10))
def test_select_best_is_first_argmax(values):
    assert select_best(values) == values.index(max(values))


class FakeScorer:
    """Returns scripted omegas and records what each run was given."""

    def __init__(self, table):
        self.table = table
        self.calls = []

    def __call__(self, start, stage, cfg):
        key = {"dma": cfg.alpha, "cwi": cfg.lambda1, "cai": cfg.lambda2}[stage]
        self.calls.append((stage, cfg.alpha, cfg.lambda1, cfg.lambda2, start))
        return f"params-{stage}-{key}", self.table[stage][key], None


def _tiny_target():
    return _dataset(np.zeros((10, 8, 8), dtype=np.uint8), counts=[1] * 10)


def test_sweep_order_selection_and_freezing():
    table = {"dma": {0.05: 3, 0.1: 9, 0.15: 9},
             "cwi": {35.0: 1, 40.0: 2, 45.0: 4, 50.0: 0},
             "cai": {1 / 22: 5, 1 / 24: 5, 1 / 26: 5, 1 / 28: 6}}
    scorer = FakeScorer(table)
    rep = run_sweep("base", None, _tiny_target(), AdaptConfig(), scorer=scorer)
    assert [r.experiment for r in rep.rows] == ["DMA"] * 3 + ["CWI"] * 4 + ["CAI"] * 4
    assert [r.label for r in rep.rows[:3]] == ["0.05", "0.1", "0.15"]
    assert rep.selected == {"alpha": ("0.1", 0.1), "lambda1": ("45", 45.0), "lambda2": ("1/28", 1 / 28)}
    # the winner of a phase is frozen into the next phase
    assert all(c[1] == 0.1 for c in scorer.calls[3:]) and all(c[2] == 45.0 for c in scorer.calls[7:])
    # cumulative: the next phase starts from the previous winner
    assert {c[4] for c in scorer.calls[:3]} == {"base"}
    assert {c[4] for c in scorer.calls[3:7]} == {"params-dma-0.1"}
    assert not rep.incomplete


def test_sweep_from_source_when_not_cumulative():
    table = {"dma": {0.1: 1}, "cwi": {45.0: 1}, "cai": {0.5: 1}}
    scorer = FakeScorer(table)
    grids = {"alpha": ["0.1"], "lambda1": ["45"], "lambda2": ["1/2"]}
    rep = run_sweep("base", None, _tiny_target(), AdaptConfig(cumulative=False), grids=grids, scorer=scorer)
    assert {c[4] for c in scorer.calls} == {"base"}
    assert rep.selected["lambda2"] == ("1/2", 0.5)


def test_sweep_budget_marks_incomplete():
    table = {"dma": {0.05: 1, 0.1: 2, 0.15: 3}, "cwi": {35.0: 1, 40.0: 1, 45.0: 1, 50.0: 1}, "cai": {}}
    rep = run_sweep("base", None, _tiny_target(), AdaptConfig(), budget=5, scorer=FakeScorer(table))
    assert rep.incomplete and len(rep.rows) == 5
    assert rep.selected == {"alpha": ("0.15", 0.15)}


def test_sweep_csv_layout(tmp_path):
    table = {"dma": {0.1: 7}, "cwi": {45.0: 8}, "cai": {1 / 26: 9}}
    grids = {"alpha": ["0.1"], "lambda1": ["45"], "lambda2": ["1/26"]}
    rep = run_sweep("base", None, _tiny_target(), AdaptConfig(), grids=grids, scorer=FakeScorer(table))
    rep.rows[0] = replace(rep.rows[0], mre=12.345)
    rep.write(tmp_path)
    lines = (tmp_path / "sweep_report.csv").read_text().splitlines()
    assert lines == ["experiment,parameters,MRE,ω", "L_DMA,alpha=0.1,12.35,7", "L_CWI,lambda1=45,,8", "L_CAI,lambda2=1/26,,9"]
    assert json.loads((tmp_path / "sweep_summary.json").read_text())["selected"]["lambda2"] == "1/26"


@pytest.mark.parametrize("bad", [dict(grids={"alpha": []}), dict(subset_frac=0.0)])
def test_sweep_argument_errors(bad):
    with pytest.raises(InvalidArgumentError):
        run_sweep("base", None, _tiny_target(), AdaptConfig(), scorer=FakeScorer({}), **bad)
