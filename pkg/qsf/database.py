# /qsf/database.py

import datetime
import logging
import os

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

from .ml_models.spectral import ZetaTrace

logger = logging.getLogger(__name__)

# Base class every run-bookkeeping table inherits from.
Base = declarative_base()


def _utcnow():
    return datetime.datetime.now(datetime.timezone.utc)


# --- Database Table Models ---

class TrainingRun(Base):
    """One train_stage invocation."""
    __tablename__ = "training_runs"
    id = Column(Integer, primary_key=True, index=True)
    stage = Column(Integer, nullable=False)
    seed = Column(Integer, nullable=False)
    started_at = Column(DateTime, default=_utcnow, nullable=False)
    finished_at = Column(DateTime)
    status = Column(String, default="running", nullable=False)  # running / finished / diverged
    final_val_loss = Column(Float)


class MetricRecord(Base):
    """A train or validation loss at one evaluation step."""
    __tablename__ = "metrics"
    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("training_runs.id"), index=True, nullable=False)
    step = Column(Integer, nullable=False)
    split = Column(String, nullable=False)
    loss = Column(Float)
    lr = Column(Float)


class ZetaRecord(Base):
    __tablename__ = "zeta"
    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("training_runs.id"), index=True, nullable=False)
    step = Column(Integer, nullable=False)
    layer = Column(Integer, nullable=False)
    zeta = Column(Float, nullable=False)


def create_session(db_path):
    """Opens (and on first use creates) the SQLite run database at ``db_path``."""
    os.makedirs(os.path.dirname(os.path.abspath(db_path)), exist_ok=True)
    engine = create_engine(f"sqlite:///{os.path.abspath(db_path)}")
    Base.metadata.create_all(bind=engine)
    SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)
    return SessionLocal()


def close_session(session):
    """Closes ``session`` and disposes the engine create_session built for it."""
    engine = session.get_bind()
    session.close()
    engine.dispose()


def start_run(session, stage, seed):
    run = TrainingRun(stage=stage, seed=seed)
    session.add(run)
    session.commit()
    logger.debug("run database: started run %d (stage %d)", run.id, stage)
    return run


def finish_run(session, run, status, final_val_loss=None):
    run.status = status
    run.finished_at = _utcnow()
    run.final_val_loss = final_val_loss
    session.commit()


def log_metric(session, run, step, split, loss, lr):
    try:
        session.add(MetricRecord(run_id=run.id, step=step, split=split, loss=loss, lr=lr))
        session.commit()
    except Exception as e:
        session.rollback()
        logger.warning("Could not log metric to the run database: %s", e)


def log_zeta(session, run, step, zetas):
    try:
        for layer, zeta in enumerate(zetas):
            session.add(ZetaRecord(run_id=run.id, step=step, layer=layer, zeta=float(zeta)))
        session.commit()
    except Exception as e:
        session.rollback()
        logger.warning("Could not log zeta values to the run database: %s", e)


def load_zeta_trace(session, run_id=None):
    """ZetaTrace of ``run_id`` (default: the most recent run that logged any zeta)."""
    if run_id is None:
        latest = session.query(ZetaRecord.run_id).order_by(ZetaRecord.run_id.desc()).first()
        if latest is None:
            return ZetaTrace()
        run_id = latest[0]
    rows = (session.query(ZetaRecord)
            .filter(ZetaRecord.run_id == run_id)
            .order_by(ZetaRecord.step, ZetaRecord.layer)
            .all())
    trace = ZetaTrace()
    current_step, current = None, []
    for row in rows:
        if row.step != current_step and current:
            trace.append(current_step, current)
            current = []
        current_step = row.step
        current.append(row.zeta)
    if current:
        trace.append(current_step, current)
    return trace
