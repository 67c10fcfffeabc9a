"""
Tests for the data layer: records, normalization, VISUELLE loading, synthetic catalogs.
"""

import datetime as dt
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from PIL import Image

# Add project root to path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from config.errors import DataError, ShapeError
from data.normalization import NormalizationState, normalize_sales
from data.records import Dataset, ProductImage, ProductRecord, ReleaseDate, SalesCurve
from data.synthetic import (
    SyntheticConfig,
    generate_synthetic,
    load_synthetic,
    noiseless_curve,
    save_synthetic,
)
from data.tensors import build_tensors
from data.visuelle import load_visuelle


def _record(product_id, split="train", sales=(1, 2, 3, 4, 5, 6), size=32):
    return ProductRecord(
        id=product_id,
        image=ProductImage(pixels=np.full((size, size, 3), 0.5, dtype=np.float32)),
        release=ReleaseDate(day=3, week=10, month=3, year=2019),
        sales=SalesCurve(values=tuple(float(v) for v in sales)),
        split=split,
    )


def _write_visuelle(root: Path, rows, missing_image=None):
    (root / "images").mkdir(parents=True)
    for split in ("train", "test"):
        table = []
        for product_id, date in rows.get(split, []):
            image_name = f"{product_id}.png"
            if product_id != missing_image:
                Image.new("RGB", (40, 40), (120, 30, 200)).save(root / "images" / image_name)
            entry = {"external_code": product_id, "image_path": image_name, "release_date": date}
            entry.update({str(w): float(w + 1) for w in range(12)})
            table.append(entry)
        pd.DataFrame(table, columns=["external_code", "image_path", "release_date"]
                     + [str(w) for w in range(12)]).to_csv(root / f"{split}.csv", index=False)


class TestReleaseDate:
    def test_vector_is_scaled_by_natural_maxima(self):
        date = ReleaseDate(day=31, week=53, month=12, year=2020)
        vector = date.to_vector(year_min=2015, year_span=10)
        np.testing.assert_allclose(vector, [1.0, 1.0, 1.0, 0.5])

    def test_from_date_uses_iso_week(self):
        date = ReleaseDate.from_date(dt.date(2019, 1, 1))
        assert (date.day, date.week, date.month, date.year) == (1, 1, 1, 2019)

    def test_out_of_range_component_is_rejected(self):
        with pytest.raises(DataError):
            ReleaseDate(day=32, week=1, month=1, year=2019)

    def test_year_outside_span_is_rejected(self):
        with pytest.raises(DataError):
            ReleaseDate(day=1, week=1, month=1, year=2030).to_vector(2015, 10)

    @pytest.mark.parametrize("day,month,year", [(30, 2, 2020), (29, 2, 2019), (31, 4, 2021)])
    def test_impossible_calendar_day_is_rejected(self, day, month, year):
        with pytest.raises(DataError, match="does not exist"):
            ReleaseDate(day=day, week=9, month=month, year=year)

    def test_leap_day_is_accepted(self):
        assert ReleaseDate(day=29, week=9, month=2, year=2020).day == 29


class TestRecords:
    def test_sales_window_keeps_first_horizon_weeks(self):
        curve = SalesCurve(values=tuple(range(12)), horizon=6)
        np.testing.assert_array_equal(curve.window(), np.arange(6, dtype=float))

    def test_short_or_negative_sales_are_rejected(self):
        with pytest.raises(DataError):
            SalesCurve(values=(1.0, 2.0), horizon=6)
        with pytest.raises(DataError):
            SalesCurve(values=(1.0, -2.0, 0, 0, 0, 0))

    def test_non_square_image_is_rejected(self):
        with pytest.raises(ShapeError):
            ProductImage(pixels=np.zeros((32, 40, 3), dtype=np.float32))

    def test_duplicate_ids_are_rejected(self):
        with pytest.raises(DataError):
            Dataset(records=(_record("a"), _record("a", split="test")))

    def test_carve_validation_only_splits_train(self):
        records = tuple(_record(f"p{i}") for i in range(10)) + (_record("t0", split="test"),)
        fit, val = Dataset(records=records).carve_validation(0.2, seed=1)
        assert len(fit) == 8 and len(val) == 2
        assert not {r.id for r in fit} & {r.id for r in val}
        assert all(r.split == "train" for r in fit + val)


class TestNormalization:
    def test_minmax_hand_example(self):
        state = NormalizationState.fit(np.array([0.0, 10.0]), mode="minmax")
        np.testing.assert_allclose(state.transform([0.0, 10.0]), [0.0, 1.0])

    def test_minmax_degenerate_range_maps_to_zero_and_inverts(self):
        state = NormalizationState.fit(np.full((3, 6), 5.0), mode="minmax")
        np.testing.assert_array_equal(state.transform(np.full(6, 5.0)), np.zeros(6))
        np.testing.assert_array_equal(state.inverse(np.zeros(6)), np.full(6, 5.0))

    def test_constant_sales_under_zscore_suggest_minmax(self):
        with pytest.raises(DataError, match="minmax"):
            NormalizationState.fit(np.full((3, 6), 5.0), mode="zscore")

    def test_zscore_round_trip(self):
        y = np.array([[1.0, 4.0, 9.0], [2.0, 3.0, 7.0]])
        state = NormalizationState.fit(y)
        np.testing.assert_allclose(state.inverse(state.transform(y)), y, atol=1e-12)

    @pytest.mark.parametrize("mode", ["zscore", "minmax"])
    def test_inverse_undoes_transform_on_random_curves(self, mode):
        rng = np.random.default_rng(11)
        state = NormalizationState.fit(rng.gamma(2.0, 15.0, size=(40, 6)), mode=mode)
        curves = rng.gamma(2.0, 15.0, size=(1000, 6)) * rng.uniform(0.01, 100.0, size=(1000, 1))
        for curve in curves:
            np.testing.assert_allclose(state.inverse(state.transform(curve)), curve, rtol=1e-10, atol=1e-9)

    def test_scaler_is_fitted_on_train_only(self):
        records = (_record("a", sales=[0] * 6), _record("b", sales=[10] * 6),
                   _record("c", split="test", sales=[1000] * 6))
        dataset = normalize_sales(Dataset(records=records), mode="minmax")
        assert dataset.scaler.maximum == 10.0
        with pytest.raises(DataError):
            normalize_sales(dataset)


class TestVisuelle:
    def test_single_valid_record(self, tmp_path):
        _write_visuelle(tmp_path, {"train": [("p1", "2019-03-04")]})
        dataset = load_visuelle(str(tmp_path), horizon=6)
        assert len(dataset) == 1
        assert len(dataset.records[0].sales.window()) == 6

    def test_missing_image_is_excluded_and_logged(self, tmp_path, caplog):
        _write_visuelle(tmp_path, {"train": [("p1", "2019-03-04"), ("p2", "2019-05-06")],
                                   "test": [("p3", "2019-07-08")]}, missing_image="p2")
        with caplog.at_level(logging.ERROR, logger="mdiff"):
            dataset = load_visuelle(str(tmp_path))
        assert dataset.ids() == ["p1", "p3"]
        assert [r.id for r in dataset.rejected] == ["p2"]
        assert "p2" in caplog.text

    def test_malformed_date_is_rejected(self, tmp_path):
        _write_visuelle(tmp_path, {"train": [("p1", "2019-03-04"), ("p2", "not-a-date")]})
        dataset = load_visuelle(str(tmp_path))
        assert dataset.ids() == ["p1"]
        assert dataset.rejected[0].id == "p2"

    def test_release_year_outside_span_is_rejected(self, tmp_path, caplog):
        _write_visuelle(tmp_path, {"train": [("p1", "2019-03-04"), ("p2", "2031-01-05")],
                                   "test": [("p3", "2010-07-08")]})
        with caplog.at_level(logging.ERROR, logger="mdiff"):
            dataset = load_visuelle(str(tmp_path), year_range=(2015, 10))
        assert dataset.ids() == ["p1"]
        assert sorted(r.id for r in dataset.rejected) == ["p2", "p3"]
        assert "2031" in caplog.text

    def test_empty_train_split_is_fatal(self, tmp_path):
        _write_visuelle(tmp_path, {"test": [("p3", "2019-07-08")]})
        with pytest.raises(DataError, match="train split is empty"):
            load_visuelle(str(tmp_path))

    def test_missing_table_names_the_path(self, tmp_path):
        _write_visuelle(tmp_path, {"train": [("p1", "2019-03-04")]})
        (tmp_path / "test.csv").unlink()
        with pytest.raises(DataError, match="test.csv"):
            load_visuelle(str(tmp_path))

    def test_column_map_overrides_names(self, tmp_path):
        _write_visuelle(tmp_path, {"train": [("p1", "04/03/2019")]})
        mapping = tmp_path / "columns.json"
        mapping.write_text(json.dumps({"date_format": "%d/%m/%Y"}))
        dataset = load_visuelle(str(tmp_path), column_map=str(mapping))
        assert dataset.records[0].release.month == 3


class TestSynthetic:
    def test_same_seed_gives_identical_catalogs(self):
        config = SyntheticConfig(n_train=8, n_test=4, image_size=32)
        first = generate_synthetic(config, seed=7)
        second = generate_synthetic(config, seed=7)
        assert first.manifest() == second.manifest()
        assert first.dataset_hash() == second.dataset_hash()

    def test_sizes_and_disjoint_ids(self):
        catalog = generate_synthetic(SyntheticConfig(n_train=64, n_test=16, image_size=32), seed=0)
        assert len(catalog.dataset) == 80
        assert len(set(catalog.dataset.ids("train")) & set(catalog.dataset.ids("test"))) == 0
        assert len(catalog.dataset.split("test")) == 16

    def test_noiseless_curves_depend_only_on_latents_and_month(self):
        catalog = generate_synthetic(SyntheticConfig(n_train=128, n_test=1, image_size=32,
                                                     noise_level=0.0), seed=3)
        groups = {}
        for record in catalog.dataset.records:
            key = (catalog.latents[record.id], record.release.month)
            groups.setdefault(key, []).append(record)
        pairs = [group for group in groups.values() if len(group) >= 2]
        assert pairs, "expected at least one repeated (latents, month) pair"
        for group in pairs:
            np.testing.assert_array_equal(group[0].sales.values, group[1].sales.values)

    def test_expected_curve_matches_generator(self):
        catalog = generate_synthetic(SyntheticConfig(n_train=4, n_test=1, image_size=32), seed=1)
        record = catalog.dataset.records[0]
        expected = noiseless_curve(catalog.params, catalog.latents[record.id], record.release.month)
        np.testing.assert_array_equal(catalog.expected_curve(record.id), expected)

    @pytest.mark.parametrize("field,value", [("n_train", 0), ("noise_level", -0.1), ("image_size", 8)])
    def test_invalid_config_is_rejected(self, field, value):
        config = SyntheticConfig(n_train=4, n_test=1, image_size=32)
        setattr(config, field, value)
        with pytest.raises(DataError):
            generate_synthetic(config, seed=0)

    def test_save_and_load_preserve_the_hash(self, tmp_path):
        catalog = generate_synthetic(SyntheticConfig(n_train=4, n_test=2, image_size=32), seed=5)
        save_synthetic(catalog, str(tmp_path / "fresh" / "catalog"))
        loaded = load_synthetic(str(tmp_path / "fresh" / "catalog"))
        assert loaded.dataset.ids() == catalog.dataset.ids()
        assert loaded.dataset_hash() == catalog.dataset_hash()
        manifest = json.loads((tmp_path / "fresh" / "catalog" / "manifest.json").read_text())
        assert manifest["dataset_hash"] == catalog.dataset_hash()


class TestTensors:
    def test_shapes_and_targets_are_normalized(self):
        records = (_record("a", sales=[0] * 6), _record("b", sales=[10] * 6))
        dataset = normalize_sales(Dataset(records=records), mode="minmax")
        tensors = build_tensors(dataset, dataset.split("train"), image_size=32, year_min=2015, year_span=10)
        assert tuple(tensors.images.shape) == (2, 3, 32, 32)
        assert tuple(tensors.dates.shape) == (2, 4)
        np.testing.assert_allclose(tensors.targets.numpy(), [[0.0] * 6, [1.0] * 6])

    def test_missing_images_are_skipped_with_warning(self, tmp_path, caplog):
        ghost = ProductRecord(
            id="ghost",
            image=ProductImage(path=str(tmp_path / "nope.png")),
            release=ReleaseDate(day=1, week=1, month=1, year=2019),
            sales=SalesCurve(values=(1, 2, 3, 4, 5, 6)),
            split="test",
        )
        records = (_record("a", sales=[0] * 6), _record("b", sales=[10] * 6), ghost)
        dataset = normalize_sales(Dataset(records=records), mode="minmax")
        with caplog.at_level(logging.WARNING, logger="mdiff"):
            tensors = build_tensors(dataset, dataset.split("test"), 32, 2015, 10, skip_missing=True)
        assert len(tensors) == 0
        assert "ghost" in caplog.text

    def test_release_year_outside_span_is_skipped(self, caplog):
        late = ProductRecord(
            id="late",
            image=ProductImage(pixels=np.full((32, 32, 3), 0.5, dtype=np.float32)),
            release=ReleaseDate(day=1, week=1, month=1, year=2031),
            sales=SalesCurve(values=(1, 2, 3, 4, 5, 6)),
            split="train",
        )
        records = (_record("a", sales=[0] * 6), _record("b", sales=[10] * 6), late)
        dataset = normalize_sales(Dataset(records=records), mode="minmax")
        with caplog.at_level(logging.WARNING, logger="mdiff"):
            tensors = build_tensors(dataset, dataset.split("train"), 32, 2015, 10, skip_missing=True)
        assert tensors.ids == ["a", "b"]
        assert "late" in caplog.text
        with pytest.raises(DataError, match="2031"):
            build_tensors(dataset, dataset.split("train"), 32, 2015, 10)
