import pandas as pd
import numpy as np
import json
from datetime import datetime
from pathlib import Path

from models.curvature_algebra import CurvatureTensor
from utils.errors import PreconditionError

SCHEMA_VERSION = "1.0"
VOLATILE_FIELDS = ("timestamp",)


def _encode(value):
    """JSON fallback for numpy scalars and arrays"""
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


class ReportProcessor:
    def __init__(self, schema_version=SCHEMA_VERSION):
        self.schema_version = schema_version

    def create_report(self, command, config, verdict, exit_code, checks=None, results=None):
        """Assemble a versioned run report; checks maps name -> {"passed": ..., "value": ...}"""
        report = {
            'schema_version': self.schema_version,
            'timestamp': datetime.now().isoformat(),
            'command': command,
            'verdict': verdict,
            'exit_code': exit_code,
            'config': config or {},
            'checks': checks or {},
            'results': results or {},
        }

        return report

    def to_json(self, report):
        """Sorted-key JSON so identical reports give identical bytes"""
        return json.dumps(report, sort_keys=True, indent=2, default=_encode)

    def write_json(self, report, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(report) + "\n")
        return path

    def read_json(self, path):
        report = json.loads(Path(path).read_text())
        version = report.get('schema_version')
        if version != self.schema_version:
            raise PreconditionError(f"report schema {version!r} does not match {self.schema_version!r}")
        return report

    def strip_volatile(self, report):
        """Copy of the report without fields that change between replays"""
        return {key: value for key, value in report.items() if key not in VOLATILE_FIELDS}

    def write_csv(self, rows, path):
        """Write a DataFrame or a list of row dicts"""
        df = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, index=False)
        return path

    def checks_frame(self, checks):
        """One row per check: name, passed, value"""
        if not checks:
            return pd.DataFrame(columns=['name', 'passed', 'value'])
        return pd.DataFrame([
            {'name': name, 'passed': bool(entry.get('passed')), 'value': entry.get('value')}
            for name, entry in checks.items()
        ])

    def write_tensor(self, tensor, path, **metadata):
        record = {'schema_version': self.schema_version, 'tensor': tensor.to_record(), **metadata}
        return self.write_json(record, path)

    def read_tensor(self, path):
        """CurvatureTensor from a file written by write_tensor, or from a bare tensor record"""
        data = json.loads(Path(path).read_text())
        record = data.get('tensor', data)
        if 'packed' not in record:
            raise PreconditionError(f"{path} holds no tensor record")
        return CurvatureTensor.from_record(record)
