from sqlalchemy import create_engine, Column, Integer, String, Float, DateTime, Boolean, JSON
from sqlalchemy.orm import declarative_base, sessionmaker, Session
from datetime import datetime, timezone
import os
from pathlib import Path

Base = declarative_base()


def _now():
    return datetime.now(timezone.utc).replace(tzinfo=None)


class Run(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String, index=True)  # e.g. "invariance", "surgery"
    config = Column(JSON)  # RunConfig as a dict
    seed = Column(Integer)
    verdict = Column(String)  # "PASS", "FAIL", "ERROR"
    exit_code = Column(Integer)
    created_at = Column(DateTime, default=_now)


class CheckResult(Base):
    __tablename__ = "check_results"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, index=True)
    name = Column(String)
    passed = Column(Boolean)
    max_error = Column(Float)  # max error or min slack, whichever the check reports
    recorded_at = Column(DateTime, default=_now)


PROJECT_ROOT = Path(__file__).resolve().parent.parent
DEFAULT_LEDGER = PROJECT_ROOT / "data" / "lab.sqlite3"


def resolve_database_url(database_url=None):
    """DATABASE_URL or the local ledger; creates the directory of a file-backed SQLite URL"""
    url = database_url or os.getenv("DATABASE_URL") or f"sqlite:///{DEFAULT_LEDGER}"
    if url.startswith("sqlite:///"):
        path = url[len("sqlite:///"):]
        if path and path != ":memory:":
            folder = Path(path).parent
            if not folder.is_absolute():
                folder = PROJECT_ROOT / folder
            folder.mkdir(parents=True, exist_ok=True)
    return url


class DatabaseManager:
    def __init__(self, database_url: str = None):
        self.database_url = resolve_database_url(database_url)
        connect_args = {"check_same_thread": False} if self.database_url.startswith("sqlite") else {}
        self.engine = create_engine(self.database_url, connect_args=connect_args, future=True)
        self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, expire_on_commit=False,
                                         bind=self.engine)

    def create_tables(self):
        """Create all database tables"""
        Base.metadata.create_all(bind=self.engine)

    def get_session(self) -> Session:
        return self.SessionLocal()

    def record_run(self, command: str, config: dict, seed: int, verdict: str, exit_code: int,
                   checks: dict = None) -> Run:
        """Store one CLI run with its per-check results; checks maps name -> (passed, max_error)"""
        db = self.get_session()
        try:
            run = Run(command=command, config=config, seed=seed, verdict=verdict, exit_code=exit_code)
            db.add(run)
            db.commit()
            db.refresh(run)
            records = [
                CheckResult(run_id=run.id, name=name, passed=bool(passed),
                            max_error=None if value is None else float(value))
                for name, (passed, value) in (checks or {}).items()
            ]
            if records:
                db.add_all(records)
                db.commit()
            return run
        finally:
            db.close()

    def get_run(self, run_id: int) -> Run:
        db = self.get_session()
        try:
            return db.query(Run).filter(Run.id == run_id).first()
        finally:
            db.close()

    def get_checks(self, run_id: int) -> list:
        db = self.get_session()
        try:
            return db.query(CheckResult).filter(CheckResult.run_id == run_id).order_by(CheckResult.id).all()
        finally:
            db.close()

    def list_runs(self, command: str = None) -> list:
        db = self.get_session()
        try:
            query = db.query(Run)
            if command:
                query = query.filter(Run.command == command)
            return query.order_by(Run.id).all()
        finally:
            db.close()

    def get_run_statistics(self) -> dict:
        """Counts of runs per command and verdict"""
        db = self.get_session()
        try:
            total_runs = db.query(Run).count()
            passed_runs = db.query(Run).filter(Run.verdict == "PASS").count()
            by_command = {}
            for (command,) in db.query(Run.command).all():
                by_command[command] = by_command.get(command, 0) + 1
            failed_checks = db.query(CheckResult).filter(CheckResult.passed.is_(False)).count()

            return {
                "total_runs": total_runs,
                "passed_runs": passed_runs,
                "pass_rate": passed_runs / max(total_runs, 1),
                "runs_by_command": by_command,
                "failed_checks": failed_checks,
            }
        finally:
            db.close()


# Global database manager instance, created on first use
db_manager = None


def get_db_manager() -> DatabaseManager:
    global db_manager
    if db_manager is None:
        db_manager = DatabaseManager()
        db_manager.create_tables()
    return db_manager
