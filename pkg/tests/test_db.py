import asyncio

import pytest

from spdefield.db.models import (
    get_campaigns,
    get_level_stats,
    get_qoi_samples,
    init_db,
    save_campaign,
    save_level_stats,
    save_qoi_samples,
)


@pytest.fixture
def db_path(tmp_path):
    path = tmp_path / "nested" / "campaigns.db"
    asyncio.run(init_db(path))
    return path


def test_campaign_roundtrip(db_path):
    async def go():
        first = await save_campaign(db_path, "sample", 1, ["run.seed = 1"])
        second = await save_campaign(db_path, "mlmc", 2, ["run.seed = 2", "mlmc.target_mse = 0.001"], 0.97)
        return first, second, await get_campaigns(db_path)

    first, second, rows = asyncio.run(go())
    assert second > first
    assert [r["id"] for r in rows] == [second, first]
    assert rows[0]["command"] == "mlmc"
    assert rows[0]["estimate"] == pytest.approx(0.97)
    assert rows[0]["config"] == "run.seed = 2\nmlmc.target_mse = 0.001"
    assert rows[1]["estimate"] is None


def test_seed_above_signed_range(db_path):
    async def go():
        await save_campaign(db_path, "sample", 2**64 - 1, [])
        return await get_campaigns(db_path, limit=1)

    assert asyncio.run(go())[0]["seed"] == -1


def test_level_stats_and_samples(db_path):
    rows = [
        {"level": 1, "dofs": 16, "n": 40, "mean_y": 1.0, "var_y": 0.5, "mean_q": 1.0, "var_q": 0.5, "cost_sec": 0.1},
        {"level": 0, "dofs": 56, "n": 10, "mean_y": 0.01, "var_y": 1e-3, "mean_q": 1.01, "var_q": 0.6, "cost_sec": 0.4},
    ]

    async def go():
        cid = await save_campaign(db_path, "mlmc", 0, [])
        await save_level_stats(db_path, cid, rows)
        await save_qoi_samples(db_path, cid, 0, [(1, 1.2, 1.1), (0, 0.9, 1.0)])
        await save_qoi_samples(db_path, cid, 1, [(0, 1.0, None)])
        return (
            await get_level_stats(db_path, cid),
            await get_qoi_samples(db_path, cid, 0),
            await get_qoi_samples(db_path, cid, 1),
        )

    stats, fine, coarsest = asyncio.run(go())
    assert [s["level"] for s in stats] == [0, 1]
    assert stats[0]["n"] == 10
    assert [s["sample"] for s in fine] == [0, 1]
    assert fine[1]["q_coarse"] == pytest.approx(1.1)
    assert coarsest[0]["q_coarse"] is None


def test_init_is_idempotent(db_path):
    asyncio.run(init_db(db_path))
    assert asyncio.run(get_campaigns(db_path)) == []


def test_store_path_is_always_explicit():
    with pytest.raises(TypeError):
        init_db()
