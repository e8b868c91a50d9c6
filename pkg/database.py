import logging
import os
from contextlib import contextmanager
from datetime import datetime
from typing import Dict, List, Optional

from sqlalchemy import JSON, Column, DateTime, Integer, String, create_engine
from sqlalchemy.orm import declarative_base, sessionmaker
from sqlalchemy.types import TypeDecorator

logger = logging.getLogger(__name__)

Base = declarative_base()


class SeedType(TypeDecorator):
    """Unsigned 64-bit seed stored as its decimal text; no backend integer type holds all of them"""

    impl = String(20)
    cache_ok = True

    def process_bind_param(self, value, dialect):
        return None if value is None else str(int(value))

    def process_result_value(self, value, dialect):
        return None if value is None else int(value)


class ExperimentRun(Base):
    __tablename__ = "experiment_runs"

    id = Column(Integer, primary_key=True, index=True)
    experiment = Column(String(32), nullable=False, index=True)
    master_seed = Column(SeedType, nullable=False, index=True)
    config = Column(JSON, nullable=False)  # fully resolved ExperimentConfig
    code_version = Column(String(32), nullable=False)
    status = Column(String(16), default="running")  # running, finished, failed
    artifacts = Column(JSON, default=list)
    summary = Column(JSON, default=dict)
    error = Column(JSON, nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)
    finished_at = Column(DateTime, nullable=True)

    @classmethod
    def create(cls, db, experiment: str, master_seed: int, config: Dict, code_version: str):
        run = cls(
            experiment=experiment,
            master_seed=master_seed,
            config=config,
            code_version=code_version,
        )
        db.add(run)
        db.commit()
        db.refresh(run)
        return run

    def mark_finished(self, db, artifacts: List[str], summary: Dict):
        self.status = "finished"
        self.artifacts = list(artifacts)
        self.summary = summary
        self.finished_at = datetime.utcnow()
        db.commit()

    def mark_failed(self, db, error: Dict):
        self.status = "failed"
        self.error = error
        self.finished_at = datetime.utcnow()
        db.commit()

    @classmethod
    def get_recent(cls, db, experiment: Optional[str] = None, limit: int = 10):
        query = db.query(cls)
        if experiment:
            query = query.filter(cls.experiment == experiment)
        return query.order_by(cls.created_at.desc(), cls.id.desc()).limit(limit).all()

    @classmethod
    def find_by_seed(cls, db, experiment: str, master_seed: int):
        return db.query(cls).filter(
            cls.experiment == experiment,
            cls.master_seed == master_seed
        ).order_by(cls.created_at.desc()).all()


class Registry:
    """
    Run registry bound to one database URL.

    The URL comes from the caller or the DATABASE_URL environment variable;
    without either the registry is disabled and every call is a no-op.
    """

    def __init__(self, url: Optional[str] = None):
        self.url = url or os.getenv("DATABASE_URL")
        self.engine = None
        self.SessionLocal = None
        if self.url:
            try:
                self.engine = create_engine(self.url, pool_pre_ping=True)
                Base.metadata.create_all(bind=self.engine)
                self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)
                logger.info("Run registry at %s", self.engine.url.render_as_string(hide_password=True))
            except Exception as e:
                logger.error(f"Failed to open run registry: {str(e)}")
                raise

    @property
    def enabled(self) -> bool:
        return self.SessionLocal is not None

    @contextmanager
    def session(self):
        db = self.SessionLocal()
        try:
            yield db
        finally:
            db.close()


def get_db(registry: Registry):
    with registry.session() as db:
        yield db
