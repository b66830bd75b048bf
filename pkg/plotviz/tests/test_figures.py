"""Figure rendering from real run directories plus handcrafted fixtures."""

import json
import shutil

import numpy as np
import pytest

from plotviz.cli import main as cli_main
from plotviz.figures import FigureJob, FigureKind, plot_config_space, plot_histogram, plot_plane, render
from plotviz.io import SUMMARY_SCHEMA, TRAJ_SCHEMA, SchemaMismatchError, load_run


def job(run_dir, kind, out, **opts):
    return FigureJob(run_dir=run_dir, kind=kind, out_path=out, **opts)


def crossings(y, lam=0.0):
    sides = np.sign(y - lam)
    sides = sides[sides != 0]
    return int(np.sum(sides[1:] != sides[:-1]))


class TestPlane:
    def test_exp1_bundle_never_crosses_the_line(self, runs, tmp_path):
        res = plot_plane(job(runs["EXP1"], FigureKind.PLANE, tmp_path / "f.png"))
        assert (tmp_path / "f.png").exists()
        assert len(res.series["curves"]) == 50
        lam = res.series["line_value"]
        for curve in res.series["curves"]:
            assert crossings(curve["y"], lam) == 0

    def test_exp2_bundle_crosses_exactly_once(self, runs, tmp_path):
        res = plot_plane(job(runs["EXP2"], FigureKind.PLANE, tmp_path / "f.png"))
        lam = res.series["line_value"]
        for curve in res.series["curves"]:
            assert crossings(curve["y"], lam) == 1

    def test_sides_color_split(self, runs, tmp_path):
        res = plot_plane(job(runs["EXP1"], FigureKind.PLANE, tmp_path / "f.png"))
        sides = {c["side"] for c in res.series["curves"]}
        assert sides == {"top", "bottom"}

    def test_empty_csv_renders_annotated_axes(self, runs, tmp_path):
        rd = tmp_path / "empty"
        rd.mkdir()
        src = (runs["EXP1"] / "trajectories.csv").read_text().splitlines()
        (rd / "trajectories.csv").write_text("\n".join(src[:2]) + "\n")
        shutil.copy(runs["EXP1"] / "summary.json", rd / "summary.json")
        res = plot_plane(job(rd, FigureKind.PLANE, tmp_path / "f.png"))
        assert res.series["curves"] == []
        assert (tmp_path / "f.png").exists()


class TestConfigSpace:
    def test_exp2_bands_disjoint_after_correlation(self, runs, tmp_path):
        res = plot_config_space(job(runs["EXP2"], FigureKind.CONFIG_SPACE, tmp_path / "f.png"))
        final = [b for b in res.series["bands"] if b["interval"] == 2]
        assert len(final) == 2
        lo0, hi0 = final[0]["f_lo"][-1], final[0]["f_hi"][-1]
        lo1, hi1 = final[1]["f_lo"][-1], final[1]["f_hi"][-1]
        assert hi0 < lo1 or hi1 < lo0

    def test_exp2_trajectories_stay_in_one_band(self, runs, tmp_path):
        # 4.5 sigma bands: wide enough to contain every sampled start, still
        # far narrower than the band separation
        res = plot_config_space(
            job(runs["EXP2"], FigureKind.CONFIG_SPACE, tmp_path / "f.png", band_sigmas=4.5)
        )
        final = [b for b in res.series["bands"] if b["interval"] == 2]
        for curve in res.series["curves"]:
            f_end = curve["f_x"][-1]
            inside = [b for b in final if b["f_lo"][-1] <= f_end <= b["f_hi"][-1]]
            assert len(inside) == 1

    def test_exp3_bands_share_py_until_conversion_then_split_in_f(self, runs, tmp_path):
        res = plot_config_space(job(runs["EXP3"], FigureKind.CONFIG_SPACE, tmp_path / "f.png"))
        pre = [b for b in res.series["bands"] if b["interval"] == 2]
        assert len(pre) == 2
        # before the conversion both branch pointer bands coincide
        assert np.allclose(pre[0]["f_lo"], pre[1]["f_lo"])
        post = [b for b in res.series["bands"] if b["interval"] == 3]
        assert post[0]["f_hi"][-1] < post[1]["f_lo"][-1] or post[1]["f_hi"][-1] < post[0]["f_lo"][-1]

    def test_single_trajectory_single_curve(self, tmp_path):
        import subprocess
        import sys

        out = tmp_path / "one"
        subprocess.run(
            [sys.executable, "-m", "bohmsim", "run", "EXP2", "--n", "1", "--out", str(out)],
            check=True, capture_output=True,
        )
        res = plot_config_space(job(out, FigureKind.CONFIG_SPACE, tmp_path / "f.png"))
        assert len(res.series["curves"]) == 1

    def test_missing_pointer_column_rejected(self, runs, tmp_path):
        with pytest.raises(KeyError, match="f_x"):
            plot_config_space(job(runs["EXP1"], FigureKind.CONFIG_SPACE, tmp_path / "f.png"))


def _tiny_run_dir(tmp_path, stats):
    rd = tmp_path / "fixture"
    rd.mkdir()
    (rd / "trajectories.csv").write_text(
        f"# schema={TRAJ_SCHEMA}\ntraj_id,t,p_x,p_y,dominant_branch,dominant_weight\n"
    )
    summary = {
        "schema": SUMMARY_SCHEMA,
        "kind": "run",
        "params": {"scenario": "fixture"},
        "geometry": {"line": {"coord": "p_y", "value": 0.0}, "I": [16.0, 0.0],
                     "A_prime": [32.0, -16.0], "B_prime": [32.0, 16.0]},
        "per_trajectory": [],
        "report": {"equivariance": stats},
        "branch_tracks": [],
    }
    (rd / "summary.json").write_text(json.dumps(summary))
    return rd


class TestHistogram:
    def test_annotation_echoes_summary(self, runs, tmp_path):
        res = plot_histogram(job(runs["EXP1"], FigureKind.HISTOGRAM, tmp_path / "f.png"))
        summary = json.loads((runs["EXP1"] / "summary.json").read_text())
        stat = summary["report"]["equivariance"][-1]
        assert res.series["p_value"] == stat["p_value"]
        assert res.series["chi2"] == stat["chi2"]
        assert list(res.series["observed"]) == stat["observed"]

    def test_biased_fixture_shows_mismatch(self, tmp_path):
        stats = [{
            "t": 0.5,
            "inner_edges": [-2.0, -1.0, 0.0, 1.0, 2.0],
            "observed": [400, 120, 80, 80, 120, 400],
            "expected": [200.0] * 6,
            "chi2": 480.0,
            "p_value": 2.3e-10,
        }]
        rd = _tiny_run_dir(tmp_path, stats)
        res = plot_histogram(job(rd, FigureKind.HISTOGRAM, tmp_path / "f.png"))
        assert res.series["p_value"] < 1e-4
        dev = np.max(np.abs(res.series["observed"] - res.series["expected"]))
        assert dev / res.series["expected"].max() > 0.5

    def test_single_bin_rejected(self, tmp_path):
        stats = [{"t": 0.5, "inner_edges": [], "observed": [100],
                  "expected": [100.0], "chi2": 0.0, "p_value": 1.0}]
        rd = _tiny_run_dir(tmp_path, stats)
        with pytest.raises(ValueError, match="at least 2 bins"):
            plot_histogram(job(rd, FigureKind.HISTOGRAM, tmp_path / "f.png"))

    def test_missing_stats_rejected(self, tmp_path):
        rd = _tiny_run_dir(tmp_path, [])
        with pytest.raises(ValueError, match="no checkpoint statistics"):
            plot_histogram(job(rd, FigureKind.HISTOGRAM, tmp_path / "f.png"))


class TestSchemaAndDeterminism:
    def test_schema_mismatch_reports_version_pair(self, runs, tmp_path):
        rd = tmp_path / "bad"
        rd.mkdir()
        text = (runs["EXP1"] / "trajectories.csv").read_text()
        (rd / "trajectories.csv").write_text(
            text.replace(TRAJ_SCHEMA, "bohmsim.trajectories/999", 1)
        )
        shutil.copy(runs["EXP1"] / "summary.json", rd / "summary.json")
        with pytest.raises(SchemaMismatchError) as err:
            load_run(rd)
        assert "bohmsim.trajectories/999" in str(err.value)
        assert TRAJ_SCHEMA in str(err.value)

    def test_fixed_inputs_render_identical_series(self, runs, tmp_path):
        results = [
            plot_plane(job(runs["EXP2"], FigureKind.PLANE, tmp_path / f"{i}.png"))
            for i in range(2)
        ]
        assert results[0].figsize == results[1].figsize
        for c0, c1 in zip(results[0].series["curves"], results[1].series["curves"]):
            assert np.array_equal(c0["x"], c1["x"])
            assert np.array_equal(c0["y"], c1["y"])


class TestCli:
    def test_plane_via_cli(self, runs, tmp_path):
        out = tmp_path / "fig.png"
        assert cli_main(["plane", "--in", str(runs["EXP1"]), "--out", str(out)]) == 0
        assert out.exists()

    def test_missing_run_dir_exits_one(self, tmp_path, capsys):
        assert cli_main(["plane", "--in", str(tmp_path / "nope"), "--out",
                         str(tmp_path / "f.png")]) == 1
        assert "missing" in capsys.readouterr().err


def test_c13_smoke_suite(runs, tmp_path, criterion):
    ok = True
    rendered = 0
    for kind, names in (
        (FigureKind.PLANE, ("EXP1", "EXP2", "EXP3")),
        (FigureKind.HISTOGRAM, ("EXP1", "EXP2", "EXP3")),
        (FigureKind.CONFIG_SPACE, ("EXP2", "EXP3")),
    ):
        for name in names:
            out = tmp_path / f"{kind.value}-{name}.png"
            res = render(job(runs[name], kind, out))
            ok = ok and out.exists() and out.stat().st_size > 0
            rendered += 1
    res = plot_config_space(job(runs["EXP2"], FigureKind.CONFIG_SPACE, tmp_path / "c.png"))
    final = [b for b in res.series["bands"] if b["interval"] == 2]
    disjoint = (
        len(final) == 2
        and (final[0]["f_hi"][-1] < final[1]["f_lo"][-1]
             or final[1]["f_hi"][-1] < final[0]["f_lo"][-1])
    )
    ok = criterion(
        13,
        "all figure kinds render; flag-detector bands disjoint post-event",
        ok and disjoint,
        f"rendered={rendered}",
    )
    assert ok
