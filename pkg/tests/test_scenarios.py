import csv
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plumepinn import network as nw
from plumepinn import physics as ph
from plumepinn import refsolver as rs
from plumepinn import scenarios as S
from plumepinn.training import ObservationSet, Schedule

TINY_ARCH = nw.ArchitectureSpec(hidden_width=6, depth=1, block_kind="resnet", sin_input_layer=True)


def tiny_config(**kw):
    base = dict(arch=TINY_ARCH, schedule=Schedule(4, 2), n_collocation=40, initial_points=20)
    base.update(kw)
    return S.desk_inverse_config(**base)


def small_entry(name="S2"):
    entry = S.builtin_scenarios()[name]
    return replace(entry, grid=rs.GridSpec(16, 16), sensors=S.SensorLayout(n_side=4))


class TestRegistry:
    def test_names(self):
        assert sorted(S.builtin_scenarios()) == ["RD", "S1", "S2", "S3", "S4"]

    def test_s1(self):
        sc = S.builtin_scenarios()["S1"].scenario
        np.testing.assert_array_equal(sc.sources.centers, [[4.0, 4.0]])
        assert sc.domain == (0.0, 10.0, 0.0, 10.0) and sc.k == 0.5 and sc.observation_times == (3.0,)
        assert ph.wind_at(sc.wind, 1.0, 2.0, 0.5) == (0.7, 0.7)
        assert sc.sources.sigma == 2.5

    def test_s2_s3_s4(self):
        reg = S.builtin_scenarios()
        assert reg["S2"].scenario.k == 0.5 and reg["S3"].scenario.k == 1e-5
        assert reg["S2"].scenario.time_window == (0.0, 4.0)
        assert reg["S4"].scenario.sources.n_sources == 2
        np.testing.assert_array_equal(reg["S4"].scenario.sources.centers, [[4, 4], [3, 6]])

    def test_rd(self):
        rd = S.builtin_scenarios()["RD"]
        assert rd.scenario.domain == (0.0, 20000.0, 0.0, 20000.0)
        assert (rd.grid.nx, rd.grid.ny) == (100, 100)
        np.testing.assert_array_equal(rd.scenario.sources.centers, [[37 * 200.0, 44 * 200.0]])

    def test_s1_peclet(self):
        sc = S.builtin_scenarios()["S1"].scenario
        np.testing.assert_allclose(ph.peclet(ph.default_scales(sc, 1.0), sc.k), 10 * 0.7 * math.sqrt(2) / 0.5)

    def test_initial_term_needed(self):
        reg = S.builtin_scenarios()
        assert S.needs_initial_term(reg["S1"].scenario)
        assert not S.needs_initial_term(reg["S3"].scenario)

    def test_verify_coordinates(self):
        assert len(S.VERIFY_COORDINATES) == 10 and S.VERIFY_COORDINATES[4] == (7.0, 7.0)
        assert S.STUDY_CASES[1] == (15000, 2500)


class TestScore:
    def test_mixed_case_fails(self):
        # one coordinate far off and the other nearly exact
        sq, ab, ok = S.score([[5.0 + math.sqrt(15.0), 4.0 + math.sqrt(9.3e-5)]], [[5.0, 4.0]], 0.1)
        np.testing.assert_allclose(sq, [[15.0, 9.3e-5]], rtol=1e-9)
        assert not ok

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-20, 20), min_size=4, max_size=4), st.floats(1e-3, 1.0))
    def test_verdict_matches_recomputation(self, v, thr):
        sq, ab, ok = S.score([v[:2]], [v[2:]], thr)
        errs = [abs(v[0] - v[2]), abs(v[1] - v[3])]
        assert ok == (max(errs) <= thr)
        np.testing.assert_array_equal(ab, [errs])
        assert (sq >= 0).all()


class TestIngestion:
    def write(self, path, rows, header=("x", "y", "t", "c")):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        return path

    def test_ten_rows(self, tmp_path):
        rows = [[i, 2 * i, 0.5, 0.1 * i] for i in range(10)]
        obs, frag = S.ingest_observations(self.write(tmp_path / "o.csv", rows), coordinate_convention="xy")
        assert len(obs) == 10 and obs.provenance == "ingested"
        assert frag["observation_times"] == (0.5,)

    def test_yx_swaps_columns(self, tmp_path):
        obs, _ = S.ingest_observations(self.write(tmp_path / "o.csv", [[44, 37, 0, 1.0]]), coordinate_convention="yx")
        np.testing.assert_array_equal(obs.points[0, :2], [37, 44])

    def test_convention_required(self, tmp_path):
        with pytest.raises(S.IngestError):
            S.ingest_observations(self.write(tmp_path / "o.csv", [[0, 0, 0, 1]]))

    def test_non_numeric_row_named(self, tmp_path):
        rows = [[0, 0, 0, 1], [1, 1, 0, "abc"]]
        with pytest.raises(S.IngestError, match="row 3"):
            S.ingest_observations(self.write(tmp_path / "o.csv", rows), coordinate_convention="xy")

    def test_missing_column(self, tmp_path):
        with pytest.raises(S.IngestError, match="missing columns"):
            S.ingest_observations(self.write(tmp_path / "o.csv", [[0, 0, 1]], header=("x", "y", "c")),
                                  coordinate_convention="xy")

    def test_missing_file(self, tmp_path):
        with pytest.raises(S.IngestError, match="not found"):
            S.ingest_observations(tmp_path / "nope.csv", coordinate_convention="xy")

    def test_out_of_domain(self, tmp_path):
        rows = [[1, 1, 0, 1], [11, 1, 0, 1]]
        with pytest.raises(S.IngestError, match="row 3"):
            S.ingest_observations(self.write(tmp_path / "o.csv", rows), coordinate_convention="xy",
                                  domain=(0, 10, 0, 10))

    @pytest.mark.parametrize("direction,expected", [(180.0, (0.0, 1.0)), (270.0, (1.0, 0.0)), (0.0, (0.0, -1.0))])
    def test_wind_convention(self, direction, expected):
        np.testing.assert_allclose(S.wind_components(1.0, direction), expected, atol=1e-15)

    def test_wind_csv_uv(self, tmp_path):
        rows = [[t, x, y, 1.0 + t, -y] for t in (0, 1) for y in (0, 5) for x in (0, 5, 10)]
        w = S.read_wind_csv(self.write(tmp_path / "w.csv", rows, header=("t", "x", "y", "u", "v")))
        np.testing.assert_allclose(ph.wind_at(w, 2.5, 2.5, 0.5), (1.5, -2.5))

    def test_wind_csv_incomplete_grid(self, tmp_path):
        rows = [[0, 0, 0, 1, 1], [0, 1, 0, 1, 1], [0, 0, 1, 1, 1]]
        with pytest.raises(S.IngestError, match="full"):
            S.read_wind_csv(self.write(tmp_path / "w.csv", rows, header=("t", "x", "y", "u", "v")))

    def test_rd_dataset_round_trip(self, tmp_path):
        # coarse grid keeps the generator quick; the file layout is what is under test
        rd = replace(S.builtin_scenarios()["RD"], grid=rs.GridSpec(20, 20), sensors=S.SensorLayout(n_side=5))
        for conv in ("xy", "yx"):
            paths = S.generate_rd_dataset(tmp_path / conv, coordinate_convention=conv, entry=rd)
            obs, frag = S.ingest_observations(paths["observations"], coordinate_convention=conv,
                                              domain=rd.scenario.domain, wind_path=paths["wind"])
            direct, _ = S.synthesize_observations(rd)
            np.testing.assert_array_equal(obs.points, direct.points)
            np.testing.assert_array_equal(obs.values, direct.values)
            q = (1234.0, 15000.0, 900.0)
            np.testing.assert_allclose(ph.wind_at(frag["wind"], *q), ph.wind_at(rd.scenario.wind, *q), atol=1e-12)
            assert "[truth]" in paths["meta"].read_text()


class TestInverseDriver:
    def test_estimate_fields(self):
        est = S.run_inverse(small_entry(), tiny_config(), seed=0)
        assert est.predicted.shape == (1, 2) and est.truth.shape == (1, 2)
        assert est.trajectory.shape == (7, 1, 2) and est.complete
        d = est.to_dict()
        assert set(d) >= {"predicted", "truth", "mse", "abs_error", "threshold", "passed", "scales", "seed"}
        _, _, ok = S.score(est.predicted, est.truth, est.threshold)
        assert est.passed == ok

    def test_initial_term_added_for_single_instant(self):
        entry = small_entry("S1")
        est = S.run_inverse(entry, tiny_config(), seed=0)
        assert est.report.initial.bc > 0.0

    def test_empty_observations(self):
        with pytest.raises(S.IngestError):
            S.run_inverse(small_entry(), tiny_config(), observations=ObservationSet(np.zeros((0, 3)), []))

    def test_unit_coherence(self):
        entry = small_entry()
        obs, _ = S.synthesize_observations(entry)
        scales = ph.CharacteristicScales(C=float(obs.values.max()), L=10.0, U=0.6)
        phys = entry.scenario.with_scales(scales)
        nd = ph.nondimensionalize(phys)
        Sc = ph.Scaling(scales)
        obs_nd = ObservationSet(Sc.points(obs.points), Sc.c(obs.values))
        cfg = tiny_config()
        a = S.run_inverse(replace(entry, scenario=phys), cfg, observations=obs)
        b = S.run_inverse(replace(entry, scenario=nd), cfg, observations=obs_nd, truth=Sc.x(phys.sources.centers))
        assert a.report.trajectory.tobytes() == b.report.trajectory.tobytes()
        np.testing.assert_allclose(a.predicted, Sc.x_back(b.predicted), rtol=1e-14)

    def test_verify_suite_shape_and_determinism(self):
        coords = S.VERIFY_COORDINATES[:2]
        a = S.verify_suite(tiny_config(), seed=1, coordinates=coords, base=small_entry("S3"))
        b = S.verify_suite(tiny_config(), seed=1, coordinates=coords, base=small_entry("S3"))
        assert [r.index for r in a.rows] == [1, 2]
        assert [(r.predicted, r.mse, r.passed) for r in a.rows] == [(r.predicted, r.mse, r.passed) for r in b.rows]
        assert a.pass_rate == a.passes / 2
        assert "pass rate:" in a.table().splitlines()[-1]

    def test_verify_row_failure_recorded(self, monkeypatch):
        def boom(*a, **k):
            raise RuntimeError("boom")

        monkeypatch.setattr(S, "run_inverse", boom)
        rep = S.verify_suite(tiny_config(), coordinates=[(4.0, 4.0)], base=small_entry("S3"))
        assert rep.rows[0].passed is False and "boom" in rep.rows[0].error


class TestStudy:
    def test_rows(self, tmp_path):
        rows = S.epoch_collocation_study(tiny_config(), cases=((40, 30), (60, 30), (60, 10)), epoch_scale=0.1,
                                         entry=small_entry("S2"))
        assert [(r.epochs, r.points) for r in rows] == [(40, 30), (60, 30), (60, 10)]
        S.write_study_csv(rows, tmp_path / "s.csv")
        with open(tmp_path / "s.csv") as fh:
            head = next(csv.reader(fh))
        assert head == ["epochs", "points", "x_pred", "y_pred", "mse_x", "mse_y"]


class TestForwardDriver:
    def test_tiny_forward(self):
        entry = replace(S.builtin_scenarios()["S1"], grid=rs.GridSpec(16, 16))
        cfg = S.ForwardConfig(arch=replace(TINY_ARCH, output_heads="fo_pinn"), schedule=Schedule(3, 2),
                              n_collocation=30, n_boundary=10, n_snapshots=3)
        res = S.run_forward(entry, cfg, seed=0)
        assert res.mse.shape == (3,) and res.prediction.fields.shape == res.reference.fields.shape
        np.testing.assert_allclose(res.mse[0], rs.field_mse(res.prediction.fields[0] / res.scales.C,
                                                             res.reference.fields[0] / res.scales.C))
        assert res.report.trajectory is None
        assert res.passed == bool(np.all(res.mse < 1e-3))

    def test_snapshot_times(self):
        np.testing.assert_allclose(S.snapshot_times(S.builtin_scenarios()["S1"].scenario, 4), [0, 1, 2, 3])


class TestSelfConsistency:
    def test_quick_recovery(self):
        res = S.self_consistency_run(seed=1, config=tiny_config(
            arch=nw.ArchitectureSpec(hidden_width=8, depth=1, block_kind="resnet"),
            schedule=Schedule(100, 100), n_collocation=200))
        assert res.error < 1e-2
