from pathlib import Path

import aiosqlite


async def init_db(path: str | Path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    async with aiosqlite.connect(path) as db:
        await db.execute("""
            CREATE TABLE IF NOT EXISTS campaigns (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                command TEXT NOT NULL,
                seed INTEGER NOT NULL,
                config TEXT NOT NULL,
                estimate REAL,
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
            )
        """)
        await db.execute("""
            CREATE TABLE IF NOT EXISTS level_stats (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                campaign_id INTEGER NOT NULL REFERENCES campaigns(id),
                level INTEGER NOT NULL,
                dofs INTEGER NOT NULL,
                n INTEGER NOT NULL,
                mean_y REAL NOT NULL,
                var_y REAL NOT NULL,
                mean_q REAL NOT NULL,
                var_q REAL NOT NULL,
                cost_sec REAL NOT NULL
            )
        """)
        await db.execute("""
            CREATE TABLE IF NOT EXISTS qoi_samples (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                campaign_id INTEGER NOT NULL REFERENCES campaigns(id),
                level INTEGER NOT NULL,
                sample INTEGER NOT NULL,
                q_fine REAL NOT NULL,
                q_coarse REAL
            )
        """)
        await db.commit()


async def save_campaign(
    path: str | Path,
    command: str,
    seed: int,
    config_lines: list[str],
    estimate: float | None = None,
) -> int:
    async with aiosqlite.connect(path) as db:
        cursor = await db.execute(
            "INSERT INTO campaigns (command, seed, config, estimate) VALUES (?, ?, ?, ?)",
            # sqlite integers are signed 64-bit
            (command, seed if seed < 2**63 else seed - 2**64, "\n".join(config_lines), estimate),
        )
        await db.commit()
        return cursor.lastrowid


async def save_level_stats(path: str | Path, campaign_id: int, rows: list[dict]):
    async with aiosqlite.connect(path) as db:
        await db.executemany(
            """INSERT INTO level_stats (campaign_id, level, dofs, n, mean_y, var_y, mean_q, var_q, cost_sec)
               VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)""",
            [
                (
                    campaign_id, r["level"], r["dofs"], r["n"],
                    r["mean_y"], r["var_y"], r["mean_q"], r["var_q"], r["cost_sec"],
                )
                for r in rows
            ],
        )
        await db.commit()


async def save_qoi_samples(
    path: str | Path,
    campaign_id: int,
    level: int,
    samples: list[tuple[int, float, float | None]],
):
    async with aiosqlite.connect(path) as db:
        await db.executemany(
            "INSERT INTO qoi_samples (campaign_id, level, sample, q_fine, q_coarse) VALUES (?, ?, ?, ?, ?)",
            [(campaign_id, level, i, q_f, q_c) for i, q_f, q_c in samples],
        )
        await db.commit()


async def get_campaigns(path: str | Path, limit: int = 20) -> list[dict]:
    async with aiosqlite.connect(path) as db:
        db.row_factory = aiosqlite.Row
        cursor = await db.execute(
            "SELECT * FROM campaigns ORDER BY id DESC LIMIT ?",
            (limit,),
        )
        rows = await cursor.fetchall()
        return [dict(row) for row in rows]


async def get_level_stats(path: str | Path, campaign_id: int) -> list[dict]:
    async with aiosqlite.connect(path) as db:
        db.row_factory = aiosqlite.Row
        cursor = await db.execute(
            "SELECT * FROM level_stats WHERE campaign_id = ? ORDER BY level",
            (campaign_id,),
        )
        rows = await cursor.fetchall()
        return [dict(row) for row in rows]


async def get_qoi_samples(path: str | Path, campaign_id: int, level: int) -> list[dict]:
    async with aiosqlite.connect(path) as db:
        db.row_factory = aiosqlite.Row
        cursor = await db.execute(
            "SELECT * FROM qoi_samples WHERE campaign_id = ? AND level = ? ORDER BY sample",
            (campaign_id, level),
        )
        rows = await cursor.fetchall()
        return [dict(row) for row in rows]
