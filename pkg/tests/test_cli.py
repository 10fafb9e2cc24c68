import csv
import datetime as dt
import os

import numpy as np
import pytest

from popgrid import cli
from popgrid.dynamic import MultivariateParams, write_params_file
from popgrid.filters import FilterConfig, write_filter_config
from popgrid.grid import load_density_csv
from popgrid.metadata import write_presence_csv, write_volumes_csv
from popgrid.synth import AttendanceTruth, ScenarioConfig, write_scenario_config
from popgrid.landuse import write_labels_csv
from popgrid.timebase import SECONDS_PER_DAY, day_of_date

MONDAY = dt.date(2015, 3, 2)


def run(*argv):
    return cli.main(list(argv))


def write_config(path, **overrides):
    base = dict(
        grid_nx=5,
        grid_ny=5,
        cell_min_km=1.0,
        cell_max_km=1.2,
        template="uniform",
        population_total=6000,
        pop_sigma=0.5,
        market_share=1.0,
        days=4,
        seed=21,
    )
    base.update(overrides)
    write_scenario_config(str(path), ScenarioConfig(**base))
    return str(path)


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    """One simulated scenario reused by the downstream stage tests."""
    root = tmp_path_factory.mktemp("cli")
    config = write_config(root / "scenario.cfg")
    out = root / "sim"
    assert run("simulate", "--config", config, "--out", str(out)) == 0
    assert run("gridify", "--grid", f"{out}/grid.csv", "--admin", f"{out}/admin.csv", "--out", str(out)) == 0
    assert (
        run(
            "presence",
            "--grid",
            f"{out}/grid.csv",
            "--events",
            f"{out}/events.csv",
            "--out",
            str(out),
        )
        == 0
    )
    return out


class TestSimulateChain:
    def test_outputs_exist_with_sidecars(self, sim_dir):
        for name in ("grid.csv", "admin.csv", "events.csv", "census_density.csv", "presence.csv", "volumes.csv"):
            assert os.path.exists(f"{sim_dir}/{name}")
            assert os.path.exists(f"{sim_dir}/{name}.meta")
        with open(f"{sim_dir}/presence.csv.meta") as fh:
            meta = fh.read()
        assert "seed" in meta and "config_sha256" in meta

    def test_log_file_separate(self, sim_dir):
        assert os.path.exists(f"{sim_dir}/popgrid.log")

    def test_fit_static_on_simulated_output(self, sim_dir, tmp_path):
        out = tmp_path / "fit"
        code = run(
            "fit-static",
            "--grid",
            f"{sim_dir}/grid.csv",
            "--presence",
            f"{sim_dir}/presence.csv",
            "--census",
            f"{sim_dir}/census_density.csv",
            "--seed",
            "3",
            "--out",
            str(out),
        )
        assert code == 0
        with open(out / "fit.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        full = rows[0]
        # a low-noise scenario recovers the presence/population law cleanly
        assert float(full["r2"]) >= 0.95
        assert float(full["beta"]) == pytest.approx(1.0, abs=0.1)
        assert int(full["seed"]) == 3
        with open(out / "fit_folds.csv") as fh:
            folds = list(csv.DictReader(fh))
        assert {r["scope"] for r in folds} == {
            "fold0_train", "fold0_test", "fold1_train", "fold1_test", "fold2_train", "fold2_test"
        }

    def test_filter_stage(self, sim_dir, tmp_path):
        cfg = tmp_path / "filter.cfg"
        write_filter_config(str(cfg), FilterConfig())
        out = tmp_path / "filtered"
        code = run(
            "filter",
            "--config",
            str(cfg),
            "--grid",
            f"{sim_dir}/grid.csv",
            "--presence",
            f"{sim_dir}/presence.csv",
            "--volumes",
            f"{sim_dir}/volumes.csv",
            "--census",
            f"{sim_dir}/census_density.csv",
            "--out",
            str(out),
        )
        assert code == 0
        with open(out / "rank.csv") as fh:
            ranked = list(csv.DictReader(fh))
        assert ranked[0]["class"] == "presence"
        assert os.path.exists(out / "filtered_presence.csv")


class TestErrors:
    def test_unknown_subcommand_exits_one(self, capsys):
        assert run("frobnicate") == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_no_subcommand_exits_one(self):
        assert run() == 1

    def test_estimate_without_params_names_input(self, sim_dir, capsys, tmp_path):
        code = run(
            "estimate",
            "--grid",
            f"{sim_dir}/grid.csv",
            "--presence",
            f"{sim_dir}/presence.csv",
            "--volumes",
            f"{sim_dir}/volumes.csv",
            "--out",
            str(tmp_path),
        )
        assert code == 1
        assert "--params" in capsys.readouterr().err

    def test_missing_file_exit_code(self, tmp_path, capsys):
        code = run("gridify", "--grid", "/nonexistent.csv", "--admin", "/nope.csv", "--out", str(tmp_path))
        assert code == 1


class TestReproducibility:
    def test_simulate_byte_identical(self, tmp_path):
        config = write_config(tmp_path / "scenario.cfg", days=2, population_total=1500)
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert run("simulate", "--config", config, "--out", str(out1)) == 0
        assert run("simulate", "--config", config, "--out", str(out2)) == 0
        for name in ("grid.csv", "admin.csv", "events.csv", "truth_density.csv"):
            a = (out1 / name).read_bytes()
            b = (out2 / name).read_bytes()
            assert a == b, name

    def test_env_seed_fallback(self, sim_dir, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.ENV_SEED, "99")
        out = tmp_path / "fit_env"
        assert (
            run(
                "fit-static",
                "--grid",
                f"{sim_dir}/grid.csv",
                "--presence",
                f"{sim_dir}/presence.csv",
                "--census",
                f"{sim_dir}/census_density.csv",
                "--out",
                str(out),
            )
            == 0
        )
        with open(out / "fit.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert int(rows[0]["seed"]) == 99


def _attendance_files(tmp_path):
    """Hand-built presence/volumes with one venue bump plus matching metadata."""
    from conftest import unit_grid
    from popgrid.grid import write_grid_csv, write_density_csv, PopulationDensityMap
    from popgrid.metadata import PresenceSeries, VolumeSeries, presence_density
    from popgrid.metadata import EVENT_KINDS

    grid = unit_grid(4, 4)
    start_s = day_of_date(MONDAY) * SECONDS_PER_DAY
    n_days, n_slots = 22, 22 * 96
    slot_starts = start_s + 900 * np.arange(n_slots, dtype=np.int64)
    counts = np.tile((20.0 + 3.0 * np.arange(16))[:, None], (1, n_slots))
    volumes = VolumeSeries(grid.ids(), 900, slot_starts.copy(), {k: np.zeros((16, n_slots)) for k in EVENT_KINDS})
    volumes.values["call_in"][:] = 1.5
    volumes.values["call_out"][:] = 1.5
    kick = start_s + 21 * SECONDS_PER_DAY + 21 * 3600
    peak_slot = (21 * SECONDS_PER_DAY + 21 * 3600 + 1800) // 900
    counts[5, peak_slot] += 400.0
    volumes.values["call_in"][5, peak_slot] += 24.0
    volumes.values["call_out"][5, peak_slot] += 24.0
    presence = presence_density(
        PresenceSeries(grid.ids(), 900, slot_starts, counts, np.zeros_like(counts, bool)), grid
    )
    write_grid_csv(f"{tmp_path}/grid.csv", grid)
    write_presence_csv(f"{tmp_path}/presence.csv", presence)
    write_volumes_csv(f"{tmp_path}/volumes.csv", volumes)
    write_density_csv(
        f"{tmp_path}/census.csv",
        PopulationDensityMap({cid: 100.0 + 12.0 * i for i, cid in enumerate(grid.ids())}),
    )
    write_labels_csv(f"{tmp_path}/landuse.csv", {cid: "residential" for cid in grid.ids()})
    write_params_file(
        f"{tmp_path}/params.cfg", MultivariateParams(a_alpha=0.0, b_alpha=np.log(2.0), a_beta=0.0, b_beta=1.0)
    )
    truths = [
        AttendanceTruth(
            event_id="m0",
            attendees=800,
            n_devices=400,
            venue_cells=("c0005",),
            date=MONDAY + dt.timedelta(days=21),
            span_start_s=kick - 900,
            span_end_s=kick + 105 * 60 + 900,
        )
    ]
    cli.write_events_meta(f"{tmp_path}/events_meta.csv", truths)
    return tmp_path


class TestAttendanceStages:
    def test_attendance_baseline_and_compare(self, tmp_path, capsys):
        d = _attendance_files(tmp_path)
        assert (
            run(
                "attendance",
                "--grid",
                f"{d}/grid.csv",
                "--presence",
                f"{d}/presence.csv",
                "--volumes",
                f"{d}/volumes.csv",
                "--params",
                f"{d}/params.cfg",
                "--events-meta",
                f"{d}/events_meta.csv",
                "--min-baseline-days",
                "3",
                "--out",
                str(d),
            )
            == 0
        )
        with open(f"{d}/attendance.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert rows[0]["event_id"] == "m0"
        # uplift 400 devices over 5 km², alpha=2, beta=1: 2 * 80 * 5 = 800
        assert float(rows[0]["gamma_hat"]) == pytest.approx(800.0, rel=1e-9)

        assert (
            run(
                "baseline-xu",
                "--grid",
                f"{d}/grid.csv",
                "--presence",
                f"{d}/presence.csv",
                "--census",
                f"{d}/census.csv",
                "--labels",
                f"{d}/landuse.csv",
                "--events-meta",
                f"{d}/events_meta.csv",
                "--out",
                str(d),
            )
            == 0
        )
        assert os.path.exists(f"{d}/xu_attendance.csv")

        # compare needs >= 3 events; expect the insufficient-data exit code
        code = run(
            "compare",
            "--truth",
            f"{d}/events_meta.csv",
            "--multivariate",
            f"{d}/attendance.csv",
            "--xu",
            f"{d}/xu_attendance.csv",
            "--out",
            str(d),
        )
        assert code == 2


class TestDynamicStages:
    def test_fit_dynamic_then_estimate(self, sim_dir, tmp_path):
        out = tmp_path / "dyn"
        code = run(
            "fit-dynamic",
            "--grid",
            f"{sim_dir}/grid.csv",
            "--presence",
            f"{sim_dir}/presence.csv",
            "--volumes",
            f"{sim_dir}/volumes.csv",
            "--census",
            f"{sim_dir}/census_density.csv",
            "--seed",
            "5",
            "--out",
            str(out),
        )
        assert code == 0
        assert os.path.exists(out / "params.cfg")
        with open(out / "lambda_pairs.csv") as fh:
            pairs = list(csv.DictReader(fh))
        assert len(pairs) >= 5
        code = run(
            "estimate",
            "--grid",
            f"{sim_dir}/grid.csv",
            "--presence",
            f"{sim_dir}/presence.csv",
            "--volumes",
            f"{sim_dir}/volumes.csv",
            "--params",
            f"{out}/params.cfg",
            "--out",
            str(out),
        )
        assert code == 0
        with open(out / "dynamic.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert set(rows[0]) == {"cell_id", "slot_start_s", "rho_hat", "z"}
        assert all(np.isfinite(float(r["rho_hat"])) for r in rows[:200])

    def test_degenerate_inputs_exit_three(self, sim_dir, tmp_path, capsys):
        # constant presence counts leave the log-log fit rank-deficient
        from conftest import unit_grid
        from popgrid.grid import write_grid_csv, write_density_csv, PopulationDensityMap
        from popgrid.metadata import PresenceSeries, presence_density

        grid = unit_grid(4, 4)
        start_s = day_of_date(MONDAY) * SECONDS_PER_DAY
        slot_starts = start_s + 900 * np.arange(3 * 96, dtype=np.int64)
        counts = np.full((16, 3 * 96), 25.0)
        series = presence_density(
            PresenceSeries(grid.ids(), 900, slot_starts, counts, np.zeros_like(counts, bool)), grid
        )
        write_grid_csv(f"{tmp_path}/grid.csv", grid)
        write_presence_csv(f"{tmp_path}/presence.csv", series)
        write_density_csv(
            f"{tmp_path}/census.csv",
            PopulationDensityMap({cid: 100.0 + i for i, cid in enumerate(grid.ids())}),
        )
        code = run(
            "fit-static",
            "--grid",
            f"{tmp_path}/grid.csv",
            "--presence",
            f"{tmp_path}/presence.csv",
            "--census",
            f"{tmp_path}/census.csv",
            "--out",
            str(tmp_path),
        )
        assert code == 3
        assert "rank-deficient" in capsys.readouterr().err


class TestLanduseStage:
    def test_landuse_clusters(self, tmp_path):
        config = write_config(
            tmp_path / "scenario.cfg",
            grid_nx=8,
            grid_ny=8,
            template="zones",
            population_total=4000,
            days=14,
            seed=4,
        )
        out = tmp_path / "sim"
        assert run("simulate", "--config", config, "--out", str(out)) == 0
        assert (
            run("presence", "--grid", f"{out}/grid.csv", "--events", f"{out}/events.csv", "--out", str(out))
            == 0
        )
        code = run(
            "landuse",
            "--grid",
            f"{out}/grid.csv",
            "--volumes",
            f"{out}/volumes.csv",
            "--k",
            "5",
            "--out",
            str(out),
        )
        assert code == 0
        with open(f"{out}/clusters.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 64
        assert len({r["cluster"] for r in rows}) == 5
