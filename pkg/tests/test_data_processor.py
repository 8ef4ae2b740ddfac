import json

import numpy as np
import pandas as pd
import pytest

from models.curvature_algebra import sphere_tensor
from utils.data_processor import SCHEMA_VERSION, ReportProcessor
from utils.errors import PreconditionError


@pytest.fixture
def processor():
    return ReportProcessor()


def test_report_is_versioned_and_sorted(processor):
    report = processor.create_report("identities", {"n": 5}, "PASS", 0,
                                     {"kn_symmetry": {"passed": True, "value": np.float64(1e-16)}},
                                     {"values": np.arange(3)})
    text = processor.to_json(report)
    data = json.loads(text)
    assert data["schema_version"] == SCHEMA_VERSION
    assert data["results"]["values"] == [0, 1, 2]
    assert list(data) == sorted(data)


def test_replayed_reports_match_without_timestamp(processor):
    first = processor.create_report("step2", {"seed": 1}, "PASS", 0)
    second = processor.create_report("step2", {"seed": 1}, "PASS", 0)
    assert processor.strip_volatile(first) == processor.strip_volatile(second)


def test_json_files(processor, tmp_path):
    report = processor.create_report("catalog", {}, "FAIL", 2)
    path = processor.write_json(report, tmp_path / "out" / "report.json")
    assert processor.read_json(path)["verdict"] == "FAIL"
    stale = dict(report, schema_version="0.1")
    path.write_text(json.dumps(stale))
    with pytest.raises(PreconditionError):
        processor.read_json(path)


def test_csv_from_rows_and_frames(processor, tmp_path):
    rows = [{"z": 0.0, "slack": 1.0}, {"z": 0.5, "slack": -0.2}]
    path = processor.write_csv(rows, tmp_path / "rows.csv")
    pd.testing.assert_frame_equal(pd.read_csv(path), pd.DataFrame(rows))
    processor.write_csv(pd.DataFrame(rows), tmp_path / "frame.csv")
    assert (tmp_path / "frame.csv").read_text() == path.read_text()


def test_checks_frame(processor):
    frame = processor.checks_frame({"a": {"passed": True, "value": 0.0}, "b": {"passed": False, "value": 1.0}})
    assert list(frame["name"]) == ["a", "b"]
    assert list(frame["passed"]) == [True, False]
    assert processor.checks_frame({}).empty


def test_tensor_files(processor, tmp_path):
    R = sphere_tensor(5) * 0.5
    path = processor.write_tensor(R, tmp_path / "sphere.json", label="half sphere")
    assert processor.read_tensor(path).max_error(R) == 0.0
    bare = tmp_path / "bare.json"
    bare.write_text(json.dumps(R.to_record()))
    assert processor.read_tensor(bare).max_error(R) == 0.0
    empty = tmp_path / "empty.json"
    empty.write_text("{}")
    with pytest.raises(PreconditionError):
        processor.read_tensor(empty)
