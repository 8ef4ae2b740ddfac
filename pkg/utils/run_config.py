"""Run configuration: dataclass defaults, then a TOML file, then command-line flags."""
import logging
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # Python 3.10: API-identical backport
    import tomli as tomllib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from models.hamilton_ode import theta_bar_estimate
from utils.errors import PreconditionError

logger = logging.getLogger(__name__)

OUTPUT_FORMATS = ("json", "csv")


@dataclass
class RunConfig:
    command: str = None
    n: int = 5
    sigma: float = 1.5
    theta: object = 0.0  # float, or "auto" for half of theta bar(n)
    seed: int = 0
    samples: int = 50
    restarts: int = 64
    tol: float = 1e-8
    band: float = 1e-6
    horizon: float = 100.0
    rtol: float = 1e-8
    threads: int = 1
    depth: int = 20
    profile: str = "standard"
    radius: float = 1.0
    delta: float = 0.0
    json_path: str = None
    csv_path: str = None
    format: str = "json"
    record: bool = False

    @classmethod
    def keys(cls):
        return {f.name for f in fields(cls)}

    @classmethod
    def from_toml(cls, path, **overrides):
        """Read top-level keys or a [lab] table; keyword overrides that are not None win"""
        path = Path(path)
        try:
            with path.open("rb") as handle:
                data = tomllib.load(handle)
        except FileNotFoundError as exc:
            raise PreconditionError(f"config file {path} not found") from exc
        except tomllib.TOMLDecodeError as exc:
            raise PreconditionError(f"config file {path} is not valid TOML: {exc}") from exc
        table = data.get("lab", data)
        unknown = set(table) - cls.keys()
        if unknown:
            raise PreconditionError(f"unknown config keys in {path}: {sorted(unknown)}")
        logger.info(f"loaded {len(table)} config values from {path}")
        return cls(**table).merged(**overrides)

    def merged(self, **overrides):
        values = asdict(self)
        unknown = set(overrides) - self.keys()
        if unknown:
            raise PreconditionError(f"unknown config keys: {sorted(unknown)}")
        values.update({key: value for key, value in overrides.items() if value is not None})
        return RunConfig(**values)

    def validate(self):
        if not 4 <= self.n <= 12:
            raise PreconditionError(f"n = {self.n} outside [4, 12]")
        if not 0.0 < self.sigma <= 2.0:
            raise PreconditionError(f"sigma = {self.sigma} outside (0, 2]")
        if isinstance(self.theta, str):
            if self.theta != "auto":
                raise PreconditionError(f"theta must be a number or 'auto', got {self.theta!r}")
        elif self.theta < 0.0:
            raise PreconditionError(f"theta = {self.theta} must be nonnegative")
        for name in ("samples", "restarts", "threads", "depth"):
            if getattr(self, name) < 1:
                raise PreconditionError(f"{name} must be at least 1, got {getattr(self, name)}")
        for name in ("tol", "band", "horizon", "rtol", "radius"):
            if getattr(self, name) <= 0.0:
                raise PreconditionError(f"{name} must be positive, got {getattr(self, name)}")
        if self.format not in OUTPUT_FORMATS:
            raise PreconditionError(f"format must be one of {OUTPUT_FORMATS}, got {self.format!r}")
        return self

    def resolved_theta(self):
        """theta as a number; 'auto' is half of the largest theta the step 4 scan admits"""
        if self.theta != "auto":
            return float(self.theta)
        theta = 0.5 * theta_bar_estimate(self.n)
        logger.info(f"theta auto resolved to {theta:.6g} for n = {self.n}")
        return theta

    def to_dict(self):
        return asdict(self)
