from __future__ import annotations

import os
from datetime import datetime, timezone

import aiosqlite

RUNNING, COMPLETE, FAILED = "running", "complete", "failed"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunRegistry:
    """Статусы всех прогонов, запущенных через CLI, в одном файле SQLite."""

    def __init__(self, path: str) -> None:
        self._path = path
        self._conn: aiosqlite.Connection | None = None

    async def connect(self) -> None:
        if self._conn is None:
            parent_dir = os.path.dirname(self._path) or "."
            os.makedirs(parent_dir, exist_ok=True)
            self._conn = await aiosqlite.connect(self._path)
            await self._conn.commit()

    async def init_schema(self) -> None:
        await self.exec(
            """
            CREATE TABLE IF NOT EXISTS runs (
                run_id TEXT PRIMARY KEY,
                experiment TEXT NOT NULL,
                arch TEXT NOT NULL,
                seed INTEGER,
                run_dir TEXT NOT NULL,
                status TEXT NOT NULL,
                started_at TEXT NOT NULL,
                finished_at TEXT,
                error TEXT
            );
            """
        )

    async def close(self) -> None:
        if self._conn is not None:
            await self._conn.close()
            self._conn = None

    @property
    def connection(self) -> aiosqlite.Connection:
        if self._conn is None:
            raise RuntimeError("Run registry is not connected")
        return self._conn

    async def exec(self, query: str, *params) -> None:
        await self.connection.executescript(query) if not params else await self.connection.execute(query, params)
        await self.connection.commit()

    async def fetchall(self, query: str, *params):
        async with self.connection.execute(query, params) as cursor:
            return await cursor.fetchall()

    async def start_run(self, run_id: str, experiment: str, arch: str, seed: int | None, run_dir: str) -> None:
        await self.exec(
            "INSERT OR REPLACE INTO runs(run_id, experiment, arch, seed, run_dir, status, started_at, finished_at, error)"
            " VALUES(?, ?, ?, ?, ?, ?, ?, NULL, NULL)",
            run_id, experiment, arch, seed, run_dir, RUNNING, _now(),
        )

    async def finish_run(self, run_id: str) -> None:
        await self.exec("UPDATE runs SET status=?, finished_at=? WHERE run_id=?", COMPLETE, _now(), run_id)

    async def fail_run(self, run_id: str, error: str) -> None:
        await self.exec("UPDATE runs SET status=?, finished_at=?, error=? WHERE run_id=?", FAILED, _now(), error, run_id)

    async def incomplete_runs(self) -> list[tuple[str, str, str, str]]:
        """(run_id, status, run_dir, error) для всех незавершённых прогонов."""
        rows = await self.fetchall(
            "SELECT run_id, status, run_dir, COALESCE(error, '') FROM runs WHERE status != ? ORDER BY started_at",
            COMPLETE,
        )
        return [tuple(r) for r in rows]
