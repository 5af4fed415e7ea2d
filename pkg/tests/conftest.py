import csv
from datetime import datetime, timedelta

import numpy as np
import pytest

ETT_COLUMNS = ["HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"]


def write_ett_csv(path, T=1000, channels=ETT_COLUMNS, seed=0, step=timedelta(hours=1)):
    """Hourly ETT-style CSV starting 2016-07-01 with daily seasonality plus noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(T)
    start = datetime(2016, 7, 1)
    cols = []
    for j, _ in enumerate(channels):
        cols.append(10 + j + 3 * np.sin(2 * np.pi * t / 24 + j) + 0.5 * rng.standard_normal(T))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *channels])
        for i in range(T):
            w.writerow([(start + step * i).strftime("%Y-%m-%d %H:%M:%S"),
                        *[repr(float(c[i])) for c in cols]])
    return path


def write_config(path, csv_path, **extra):
    import yaml

    doc = {
        "dataset": {"path": str(csv_path), "name": "ETTh1", "context": "etth1"},
        "lookback": 96,
        "horizon": 96,
        "generations": 1,
        "provider": {"kind": "mock_seasonal_naive", "period": 24},
        "output_dir": str(path.parent / "runs"),
        "cache_dir": None,
    }
    for key, value in extra.items():
        doc[key] = value
    path.write_text(yaml.safe_dump(doc))
    return path


@pytest.fixture
def ett_csv(tmp_path):
    return write_ett_csv(tmp_path / "ETTh1.csv", T=1000, channels=["OT"])


@pytest.fixture
def ett_multi_csv(tmp_path):
    return write_ett_csv(tmp_path / "ETTh1_multi.csv", T=600)


@pytest.fixture
def run_config(tmp_path, ett_csv):
    return write_config(tmp_path / "run.yaml", ett_csv)
