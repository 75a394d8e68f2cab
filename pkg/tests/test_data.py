"""Dataset containers, CSV ingestion, dose standardization, INR reward."""

import numpy as np
import pytest

from dosetree import (Dataset, DoseScaler, StageData, load_csv,
                      load_stage_csv, standardize_doses, warfarin_reward)
from dosetree.data import MAXIMIZE, MINIMIZE
from dosetree.errors import DegenerateDoseError, ParseError, SchemaError


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


SCHEMA = {"dose": "a", "outcome": "y", "covariates": ["x1", "x2"]}


class TestDoseScaler:
    def test_round_trip_exact(self):
        rng = np.random.default_rng(0)
        scaler = DoseScaler(2.0, 11.5)
        doses = rng.uniform(2.0, 11.5, size=1000)
        back = scaler.unscale(scaler.scale(doses))
        assert np.max(np.abs(back - doses)) <= 1e-12

    def test_scale_maps_endpoints(self):
        scaler = DoseScaler(2.0, 6.0)
        assert scaler.scale(2.0) == 0.0
        assert scaler.scale(6.0) == 1.0
        assert scaler.scale(4.0) == 0.5

    def test_degenerate_bounds_rejected(self):
        with pytest.raises(DegenerateDoseError):
            DoseScaler(3.0, 3.0)


class TestDataset:
    def test_basic_construction(self):
        ds = Dataset(np.zeros((3, 2)), np.array([0.1, 0.5, 0.9]),
                     np.array([1.0, 2.0, 3.0]), ("x1", "x2"))
        assert ds.n == 3
        assert ds.p == 2
        assert ds.direction == MINIMIZE

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[np.nan, 0.0], [0.0, 0.0]]),
                    np.array([0.1, 0.5]), np.array([1.0, 2.0]), ("x1", "x2"))

    def test_negation_flips_direction_and_outcomes(self):
        ds = Dataset(np.zeros((2, 1)), np.array([0.1, 0.9]),
                     np.array([1.0, -2.0]), ("x1",), MINIMIZE)
        flipped = ds.as_maximization()
        assert flipped.direction == MAXIMIZE
        assert np.allclose(flipped.outcomes, [-1.0, 2.0])

    def test_stage_data_requires_equal_n(self):
        s1 = Dataset(np.zeros((3, 1)), np.full(3, 0.5) + [0, 0.1, 0.2],
                     np.zeros(3), ("x1",))
        s2 = Dataset(np.zeros((2, 1)), np.array([0.1, 0.9]),
                     np.zeros(2), ("z1",))
        with pytest.raises(ValueError):
            StageData((s1, s2))


class TestWarfarinReward:
    def test_plateau_value(self):
        # maximal on [2, 3]: both kinks and the midpoint all give -100
        assert warfarin_reward(2.5) == -100.0
        assert warfarin_reward(2.0) == -100.0
        assert warfarin_reward(3.0) == -100.0

    def test_tail_value(self):
        assert warfarin_reward(4.0) == -300.0

    def test_concavity(self):
        rng = np.random.default_rng(1)
        u = rng.uniform(0.0, 6.0, size=500)
        v = rng.uniform(0.0, 6.0, size=500)
        lam = rng.uniform(0.0, 1.0, size=500)
        mix = warfarin_reward(lam * u + (1 - lam) * v)
        chord = lam * warfarin_reward(u) + (1 - lam) * warfarin_reward(v)
        assert np.all(mix >= chord - 1e-9)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            warfarin_reward(np.inf)


class TestStandardizeDoses:
    def test_affine_map(self):
        ds = Dataset(np.zeros((3, 1)), np.array([2.0, 4.0, 6.0]),
                     np.zeros(3), ("x1",))
        scaled, scaler = standardize_doses(ds)
        assert np.allclose(scaled.doses, [0.0, 0.5, 1.0])
        assert (scaler.a_min, scaler.a_max) == (2.0, 6.0)

    def test_unit_interval_passthrough(self):
        ds = Dataset(np.zeros((3, 1)), np.array([0.1, 0.5, 0.9]),
                     np.zeros(3), ("x1",))
        scaled, scaler = standardize_doses(ds)
        assert scaled.doses is ds.doses
        assert (scaler.a_min, scaler.a_max) == (0.0, 1.0)

    def test_constant_doses_rejected(self):
        ds = Dataset(np.zeros((3, 1)), np.full(3, 5.0), np.zeros(3), ("x1",))
        with pytest.raises(DegenerateDoseError):
            standardize_doses(ds)


class TestLoadCsv:
    def test_basic_parse(self, tmp_path):
        path = _write(tmp_path, "x1,x2,a,y\n0.1,0.2,0.3,1.0\n"
                                "0.4,0.5,0.6,2.0\n0.7,0.8,0.9,3.0\n")
        ds = load_csv(path, SCHEMA)
        assert ds.n == 3
        assert ds.p == 2
        assert np.allclose(ds.doses, [0.3, 0.6, 0.9])

    def test_non_numeric_cell_names_row_and_column(self, tmp_path):
        path = _write(tmp_path, "x1,x2,a,y\n0.1,0.2,0.3,1.0\n"
                                "0.4,0.5,NA,2.0\n")
        with pytest.raises(ParseError) as err:
            load_csv(path, SCHEMA)
        assert err.value.row == 1
        assert err.value.column == "a"

    def test_missing_column_is_schema_error(self, tmp_path):
        path = _write(tmp_path, "x1,a,y\n0.1,0.3,1.0\n")
        with pytest.raises(SchemaError):
            load_csv(path, SCHEMA)

    def test_missing_cells_drop_rows(self, tmp_path):
        path = _write(tmp_path, "x1,x2,a,y\n0.1,0.2,0.3,1.0\n"
                                "0.4,,0.6,2.0\n0.7,0.8,0.9,3.0\n")
        ds = load_csv(path, SCHEMA)
        assert ds.n == 2
        assert np.allclose(ds.doses, [0.3, 0.9])

    def test_round_trip_idempotent(self, tmp_path):
        path = _write(tmp_path, "x1,x2,a,y\n0.125,0.25,0.375,1.5\n"
                                "0.5,0.625,0.75,2.5\n0.875,1.0,0.0625,3.5\n")
        ds1 = load_csv(path, SCHEMA)
        out = tmp_path / "rewrite.csv"
        header = "x1,x2,a,y"
        rows = [",".join(f"{v!r}" for v in [*map(float, x), float(a), float(y)])
                for x, a, y in zip(ds1.covariates, ds1.doses, ds1.outcomes)]
        out.write_text("\n".join([header] + rows) + "\n")
        ds2 = load_csv(out, SCHEMA)
        assert np.array_equal(ds1.covariates, ds2.covariates)
        assert np.array_equal(ds1.doses, ds2.doses)
        assert np.array_equal(ds1.outcomes, ds2.outcomes)

    def test_inr_reward_transform(self, tmp_path):
        path = _write(tmp_path, "weight,age,dose,inr\n70,45,30,2.5\n"
                                "80,60,35,4.0\n")
        ds = load_csv(path, {"dose": "dose", "outcome": "inr",
                             "covariates": ["weight", "age"],
                             "reward": "warfarin"})
        assert np.allclose(ds.outcomes, [-100.0, -300.0])
        assert ds.direction == MAXIMIZE


class TestLoadStageCsv:
    def test_wide_two_stage(self, tmp_path):
        path = _write(tmp_path,
                      "x1_t1,a_t1,r_t1,x1_t2,a_t2,r_t2\n"
                      "0.1,0.2,1.0,0.3,0.4,2.0\n"
                      "0.5,0.6,3.0,0.7,0.8,4.0\n")
        sd = load_stage_csv(path, [
            {"dose": "a_t1", "outcome": "r_t1", "covariates": ["x1_t1"]},
            {"dose": "a_t2", "outcome": "r_t2", "covariates": ["x1_t2"]},
        ])
        assert sd.n_stages == 2
        assert sd.n == 2
        assert np.allclose(sd.stages[1].doses, [0.4, 0.8])
