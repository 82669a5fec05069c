# db.py
"""sqlite run registry: training/eval runs, per-epoch loss terms and final metrics."""
import json
import logging
import os
import sqlite3
from datetime import datetime
from pathlib import Path

from errors import DataIOError

logger = logging.getLogger(__name__)

DB_ENV = "FURPE_DB"
DB_FILE = "runs.db"


def db_path(out_dir):
    return Path(os.environ.get(DB_ENV) or Path(out_dir) / DB_FILE)


def connect(path):
    """Open (and create if needed) the registry database."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        conn = sqlite3.connect(path)
    except (OSError, sqlite3.Error) as e:
        raise DataIOError(f"cannot open run registry ({e})", path) from e
    create_tables(conn)
    return conn


# --- helper: ensure column exists (auto-migration) ---
def ensure_column_exists(conn, table, column, col_type):
    columns = [row[1] for row in conn.execute(f"PRAGMA table_info({table})")]
    if column not in columns:
        logger.info("adding missing column '%s' to table '%s'", column, table)
        conn.execute(f"ALTER TABLE {table} ADD COLUMN {column} {col_type}")
        conn.commit()


# --- Tables ---
def create_tables(conn):
    conn.execute("""
    CREATE TABLE IF NOT EXISTS runs (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        name TEXT,
        command TEXT CHECK(command IN ('train','eval')),
        seed TEXT,
        config TEXT,
        created_at TEXT
    )
    """)
    conn.execute("""
    CREATE TABLE IF NOT EXISTS epoch_losses (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        run_id INTEGER,
        epoch INTEGER,
        term TEXT,
        value REAL,
        FOREIGN KEY(run_id) REFERENCES runs(id)
    )
    """)
    conn.execute("""
    CREATE TABLE IF NOT EXISTS metrics (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        run_id INTEGER,
        metric TEXT,
        value REAL,
        FOREIGN KEY(run_id) REFERENCES runs(id)
    )
    """)
    conn.commit()
    ensure_column_exists(conn, "runs", "checkpoint", "TEXT")


# --- Run functions ---
def register_run(conn, name, command, seed, config):
    created_at = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
    cur = conn.execute(
        "INSERT INTO runs (name, command, seed, config, created_at) VALUES (?, ?, ?, ?, ?)",
        (name, command, str(seed), json.dumps(config, sort_keys=True), created_at),
    )
    conn.commit()
    return cur.lastrowid


def set_checkpoint(conn, run_id, checkpoint):
    conn.execute("UPDATE runs SET checkpoint=? WHERE id=?", (str(checkpoint), run_id))
    conn.commit()


def log_epoch_losses(conn, run_id, rows):
    """One row per (epoch, term) from TrainRun.losses."""
    values = [
        (run_id, int(row["epoch"]), term, float(value))
        for row in rows for term, value in row.items() if term != "epoch"
    ]
    conn.executemany("INSERT INTO epoch_losses (run_id, epoch, term, value) VALUES (?, ?, ?, ?)", values)
    conn.commit()


def log_metrics(conn, run_id, row):
    conn.executemany(
        "INSERT INTO metrics (run_id, metric, value) VALUES (?, ?, ?)",
        [(run_id, metric, float(value)) for metric, value in row.items()],
    )
    conn.commit()


# --- Retrieval helpers ---
def get_runs(conn):
    """All runs, newest last."""
    return conn.execute("SELECT id, name, command, seed, checkpoint, created_at FROM runs ORDER BY id").fetchall()


def get_epoch_losses(conn, run_id):
    rows = conn.execute(
        "SELECT epoch, term, value FROM epoch_losses WHERE run_id=? ORDER BY epoch, id", (run_id,)
    ).fetchall()
    table = {}
    for epoch, term, value in rows:
        table.setdefault(epoch, {"epoch": epoch})[term] = value
    return [table[e] for e in sorted(table)]


def get_metrics(conn, run_id):
    rows = conn.execute("SELECT metric, value FROM metrics WHERE run_id=? ORDER BY id", (run_id,)).fetchall()
    return {metric: value for metric, value in rows}


def get_metric_rows(conn):
    """One dict per run that has metrics: run name plus every metric."""
    out = []
    for run_id, name, *_ in get_runs(conn):
        metrics = get_metrics(conn, run_id)
        if metrics:
            out.append({"run": name, **metrics})
    return out
