from __future__ import annotations

from mmfr.difficulty import grade_exchange, rollout_exchange
from mmfr.gateway import ScriptStore
from tests.conftest import think_answer


def plant_rollouts(store: ScriptStore, record, pattern, base_seed=0):
    """Plant k probe replies and matching judge verdicts for a record."""
    for i, correct in enumerate(pattern):
        answer = "12" if correct else "99"
        reply = think_answer(120, answer=answer)
        store.plant(rollout_exchange(record, base_seed + i, None), reply)
        judgment = "Equivalent" if correct else "Different"
        store.plant(
            grade_exchange(record, answer), f"Analysis: graded\nJudgment: {judgment}"
        )
