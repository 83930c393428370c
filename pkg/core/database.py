# core/database.py
"""
SQLite store for warm-up cost tables and lazily observed latencies
"""

import logging
import sqlite3
from pathlib import Path
from typing import Dict, List, Optional

from .cost import CostTable, check_latency

logger = logging.getLogger(__name__)


class CostStore:
    """
    Named cost tables persisted in one SQLite file.

    Latencies are stored as REAL (IEEE double), so a reloaded table compares
    equal to the saved one.
    """

    def __init__(self, db_path: str = "cost_tables.db"):
        self.db_path = db_path
        if db_path != ":memory:":
            Path(db_path).parent.mkdir(parents=True, exist_ok=True)
        self.connection = sqlite3.connect(db_path, check_same_thread=False)
        self.connection.row_factory = sqlite3.Row  # Enable column access by name
        self._setup_schema()

    def _setup_schema(self):
        cursor = self.connection.cursor()

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS cost_tables (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                name TEXT UNIQUE NOT NULL,
                source TEXT,           -- 'warmup', 'analytic:<preset>', 'csv', ...
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
            )
        """)

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS cost_entries (
                table_id INTEGER NOT NULL,
                seq_len INTEGER NOT NULL,
                batch INTEGER NOT NULL,
                latency_s REAL NOT NULL,
                PRIMARY KEY (table_id, seq_len, batch),
                FOREIGN KEY (table_id) REFERENCES cost_tables (id)
            )
        """)

        # Lazy-update history; the latest observation also overwrites cost_entries
        cursor.execute("""
            CREATE TABLE IF NOT EXISTS cost_observations (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                table_id INTEGER NOT NULL,
                seq_len INTEGER NOT NULL,
                batch INTEGER NOT NULL,
                latency_s REAL NOT NULL,
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                FOREIGN KEY (table_id) REFERENCES cost_tables (id)
            )
        """)

        cursor.execute("CREATE INDEX IF NOT EXISTS idx_observations_table ON cost_observations(table_id)")

        self.connection.commit()
        logger.debug(f"Cost store schema ready at {self.db_path}")

    def _table_id(self, name: str) -> Optional[int]:
        row = self.connection.execute("SELECT id FROM cost_tables WHERE name = ?", (name,)).fetchone()
        return row["id"] if row else None

    def save_table(self, name: str, table: CostTable, source: str = "warmup") -> int:
        """Insert or replace the table stored under `name`"""
        for (seq_len, batch), latency in table.entries.items():
            check_latency(seq_len, batch, latency)
        with self.connection:
            table_id = self._table_id(name)
            if table_id is None:
                cursor = self.connection.execute(
                    "INSERT INTO cost_tables (name, source) VALUES (?, ?)", (name, source)
                )
                table_id = cursor.lastrowid
            else:
                self.connection.execute("UPDATE cost_tables SET source = ? WHERE id = ?", (source, table_id))
                self.connection.execute("DELETE FROM cost_entries WHERE table_id = ?", (table_id,))

            self.connection.executemany(
                "INSERT INTO cost_entries (table_id, seq_len, batch, latency_s) VALUES (?, ?, ?, ?)",
                [(table_id, s, b, latency) for (s, b), latency in sorted(table.entries.items())],
            )
        logger.info(f"✅ Saved cost table '{name}' ({len(table.entries)} entries)")
        return table_id

    def load_table(self, name: str) -> CostTable:
        table_id = self._table_id(name)
        if table_id is None:
            raise KeyError(f"no cost table named '{name}'")
        rows = self.connection.execute(
            "SELECT seq_len, batch, latency_s FROM cost_entries WHERE table_id = ?", (table_id,)
        ).fetchall()
        table = CostTable()
        for row in rows:
            try:
                table.add(row["seq_len"], row["batch"], row["latency_s"])
            except ValueError as e:
                raise ValueError(f"cost table '{name}' in {self.db_path}: {e}")
        return table

    def record_observation(self, name: str, seq_len: int, batch: int, latency: float) -> None:
        latency = check_latency(seq_len, batch, latency)
        table_id = self._table_id(name)
        if table_id is None:
            raise KeyError(f"no cost table named '{name}'")
        with self.connection:
            self.connection.execute(
                "INSERT INTO cost_observations (table_id, seq_len, batch, latency_s) VALUES (?, ?, ?, ?)",
                (table_id, seq_len, batch, float(latency)),
            )
            self.connection.execute(
                "INSERT OR REPLACE INTO cost_entries (table_id, seq_len, batch, latency_s) VALUES (?, ?, ?, ?)",
                (table_id, seq_len, batch, float(latency)),
            )

    def observations(self, name: str) -> List[Dict]:
        table_id = self._table_id(name)
        if table_id is None:
            return []
        rows = self.connection.execute(
            "SELECT seq_len, batch, latency_s FROM cost_observations WHERE table_id = ? ORDER BY id",
            (table_id,),
        ).fetchall()
        return [dict(row) for row in rows]

    def list_tables(self) -> List[Dict]:
        rows = self.connection.execute("""
            SELECT t.name, t.source, t.created_at, COUNT(e.seq_len) AS entries
            FROM cost_tables t LEFT JOIN cost_entries e ON e.table_id = t.id
            GROUP BY t.id ORDER BY t.name
        """).fetchall()
        return [dict(row) for row in rows]

    def close(self):
        """Close database connection"""
        self.connection.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()
