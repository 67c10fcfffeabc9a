"""
Loader for datasets in the public VISUELLE layout.

The column names of the public dump drift between releases, so every name the
loader touches comes from a small JSON mapping file (see ``DEFAULT_COLUMN_MAP``).
Text descriptions, Google Trends series and customer purchase logs are never read.
"""

import json
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import pandas as pd

from config.console import get_logger
from config.errors import DataError
from data.records import (
    Dataset,
    ProductImage,
    ProductRecord,
    RejectedRecord,
    ReleaseDate,
    SalesCurve,
)

logger = get_logger(__name__)

DEFAULT_COLUMN_MAP: Dict = {
    "train_file": "train.csv",
    "test_file": "test.csv",
    "split_file": None,
    "sales_file": None,
    "images_dir": "images",
    "id_column": "external_code",
    "image_column": "image_path",
    "release_date_column": "release_date",
    "split_column": "split",
    "date_format": "%Y-%m-%d",
    "sales_columns": [str(week) for week in range(12)],
}


def load_column_map(path: Optional[str]) -> Dict:
    """Default mapping updated with the keys found in ``path``."""
    mapping = dict(DEFAULT_COLUMN_MAP)
    if path:
        try:
            with open(path, "r", encoding="utf-8") as handle:
                mapping.update(json.load(handle))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read column mapping {path}: {exc}") from exc
    return mapping


def _read_table(path: Path, id_column: str) -> pd.DataFrame:
    if not path.is_file():
        raise DataError(f"split table not found: {path}")
    return pd.read_csv(path, dtype={id_column: str})


def _split_tables(root: Path, mapping: Dict) -> List[Tuple[str, pd.DataFrame]]:
    if mapping.get("split_file"):
        sales = _read_table(root / mapping["sales_file"], mapping["id_column"])
        splits = _read_table(root / mapping["split_file"], mapping["id_column"])
        id_col, split_col = mapping["id_column"], mapping["split_column"]
        sales[id_col] = sales[id_col].astype(str)
        splits[id_col] = splits[id_col].astype(str)
        merged = sales.merge(splits[[id_col, split_col]], on=id_col, how="inner")
        return [(name, merged[merged[split_col] == name]) for name in ("train", "test")]
    return [
        ("train", _read_table(root / mapping["train_file"], mapping["id_column"])),
        ("test", _read_table(root / mapping["test_file"], mapping["id_column"])),
    ]


def _parse_row(row: pd.Series, split: str, root: Path, mapping: Dict, horizon: int,
               year_range: Optional[Tuple[int, int]]) -> ProductRecord:
    product_id = str(row[mapping["id_column"]])
    image_path = root / mapping["images_dir"] / str(row[mapping["image_column"]])
    if not image_path.is_file():
        raise FileNotFoundError(f"image file missing: {image_path}")
    try:
        stamp = pd.to_datetime(row[mapping["release_date_column"]], format=mapping["date_format"])
    except (ValueError, TypeError) as exc:
        raise ValueError(f"malformed release date {row[mapping['release_date_column']]!r}") from exc
    if pd.isna(stamp):
        raise ValueError("missing release date")
    release = ReleaseDate.from_date(stamp.date())
    if year_range is not None:
        release.check_year(*year_range)
    values = tuple(float(row[col]) for col in mapping["sales_columns"])
    return ProductRecord(
        id=product_id,
        image=ProductImage(path=str(image_path)),
        release=release,
        sales=SalesCurve(values=values, horizon=horizon),
        split=split,
    )


def load_visuelle(root_path: str, horizon: int = 6, column_map: Optional[str] = None,
                  year_range: Optional[Tuple[int, int]] = None) -> Dataset:
    """
    Load a VISUELLE-layout directory.

    Args:
        root_path: dataset root holding the split tables and the images directory
        horizon: number of leading weeks kept as the forecasting target
        column_map: optional JSON file overriding ``DEFAULT_COLUMN_MAP`` keys
        year_range: optional (year_min, year_span); products released outside it are rejected

    Returns:
        Dataset with per-record problems listed in ``Dataset.rejected``
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DataError(f"VISUELLE root not found: {root}")
    mapping = load_column_map(column_map)
    if len(mapping["sales_columns"]) < horizon:
        raise DataError(f"column mapping lists {len(mapping['sales_columns'])} sales columns, horizon is {horizon}")

    records: List[ProductRecord] = []
    rejected: List[RejectedRecord] = []
    seen: Dict[str, str] = {}
    for split, table in _split_tables(root, mapping):
        kept = 0
        for _, row in table.iterrows():
            product_id = str(row.get(mapping["id_column"], "<no id>"))
            try:
                record = _parse_row(row, split, root, mapping, horizon, year_range)
            except (FileNotFoundError, ValueError, KeyError, DataError) as exc:
                logger.error("rejecting product %s (%s): %s", product_id, split, exc)
                rejected.append(RejectedRecord(id=product_id, reason=str(exc)))
                continue
            if record.id in seen:
                raise DataError(
                    f"product id {record.id} appears in both '{seen[record.id]}' and '{split}' splits"
                )
            seen[record.id] = split
            records.append(record)
            kept += 1
        if kept == 0 and split == "train":
            raise DataError(f"train split is empty after loading {root}")
        if kept == 0:
            logger.warning("%s split is empty after loading %s", split, root)
        logger.info("loaded %d %s products (%d rejected so far)", kept, split, len(rejected))

    return Dataset(records=tuple(records), rejected=tuple(rejected), source=f"visuelle:{root}")
