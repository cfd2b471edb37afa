import json
import sqlite3
from datetime import datetime
from pathlib import Path
from typing import Any, Dict

LEDGER_NAME = "runs.db"


def init_db(path) -> Path:
    """Create the runs table if it does not exist yet"""
    path = Path(path)
    conn = sqlite3.connect(path)
    cursor = conn.cursor()

    cursor.execute('''
        CREATE TABLE IF NOT EXISTS runs (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            timestamp TEXT NOT NULL,
            command TEXT NOT NULL,
            seed INTEGER NOT NULL,
            inputs_json TEXT NOT NULL,
            outputs_json TEXT NOT NULL
        )
    ''')

    conn.commit()
    conn.close()
    return path


def log_run(path, command: str, seed: int, inputs: Dict[str, Any], outputs: Dict[str, Any]) -> int:
    """Append one run to the ledger and return its row id"""
    conn = sqlite3.connect(init_db(path))
    cursor = conn.cursor()

    cursor.execute('''
        INSERT INTO runs (timestamp, command, seed, inputs_json, outputs_json)
        VALUES (?, ?, ?, ?, ?)
    ''', (
        datetime.now().isoformat(),
        command,
        seed,
        json.dumps(inputs, sort_keys=True, default=str),
        json.dumps(outputs, sort_keys=True, default=str)
    ))
    row_id = cursor.lastrowid

    conn.commit()
    conn.close()
    return row_id


def list_runs(path, command: str | None = None) -> list[dict]:
    conn = sqlite3.connect(init_db(path))
    conn.row_factory = sqlite3.Row
    query = "SELECT * FROM runs" + (" WHERE command = ?" if command else "") + " ORDER BY id"
    rows = conn.execute(query, (command,) if command else ()).fetchall()
    conn.close()
    return [
        {**dict(r), "inputs": json.loads(r["inputs_json"]), "outputs": json.loads(r["outputs_json"])}
        for r in rows
    ]
