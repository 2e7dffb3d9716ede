"""The property suite itself: every check passes and the canary bites."""

import csv

import pytest

from voxlevel.checks import (
    check_factor_grid,
    determinism_replay,
    format_table,
    grad_cases,
    run_all,
    write_report,
)


@pytest.fixture(scope="module")
def results():
    return run_all(seed=0)


class TestRunAll:
    def test_all_pass(self, results):
        failed = [r.name for r in results if not r.passed]
        assert failed == []

    def test_order_fixed_by_name(self, results):
        names = [r.name for r in results]
        assert names == sorted(names)

    def test_tolerances_explicit(self, results):
        assert all(r.tolerance is not None and r.tolerance >= 0 for r in results)

    def test_covers_required_areas(self, results):
        names = " ".join(r.name for r in results)
        for key in ("grad/", "adaptive_factor_vs_grid", "scp_identity", "scp_scale_invariance",
                    "frame_normalize", "locality", "le_gradient_sparsity", "boundary_frames_per_transition", "determinism/replay"):
            assert key in names, key

    def test_every_op_has_a_gradient_check(self, results):
        import numpy as np

        names = {r.name for r in results}
        for case in grad_cases(np.random.default_rng(0)):
            assert f"grad/{case}" in names

    def test_other_seed(self):
        assert all(r.passed for r in run_all(seed=7))


class TestOracles:
    def test_grid_argmin(self):
        r = check_factor_grid(seed=3, pairs=200, step=1e-4)
        assert r.passed and r.actual <= 1e-4

    def test_canary(self):
        assert determinism_replay(0).passed
        assert not determinism_replay(0, corrupt=True).passed


class TestReport:
    def test_table_and_csv(self, results, tmp_path):
        table = format_table(results)
        assert len(table.splitlines()) == len(results) + 1
        write_report(results, tmp_path / "r.csv")
        with open(tmp_path / "r.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(results)
        assert {row["passed"] for row in rows} == {"1"}
        float(rows[0]["actual"])
