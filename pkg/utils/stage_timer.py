"""
Per-stage timing accumulator for the replay pipeline
"""
import time
from contextlib import contextmanager
from typing import Dict, List

import pandas as pd


class StageTimer:
    """Collects wall-clock durations per named pipeline stage"""

    def __init__(self, stages: List[str]):
        self.stages = list(stages)
        self.samples: Dict[str, List[float]] = {name: [] for name in self.stages}

    @contextmanager
    def measure(self, stage: str):
        """Time the enclosed block under the given stage name"""
        start = time.perf_counter()
        try:
            yield
        finally:
            self.samples.setdefault(stage, []).append(time.perf_counter() - start)

    def to_frame(self) -> pd.DataFrame:
        """Summary table: calls, total, mean and max milliseconds per stage"""
        rows = []
        for stage in self.stages + [s for s in self.samples if s not in self.stages]:
            values = self.samples.get(stage, [])
            total = sum(values)
            rows.append({
                "stage": stage,
                "calls": len(values),
                "total_ms": total * 1000.0,
                "mean_ms": (total / len(values) * 1000.0) if values else 0.0,
                "max_ms": (max(values) * 1000.0) if values else 0.0,
            })
        return pd.DataFrame(rows, columns=["stage", "calls", "total_ms", "mean_ms", "max_ms"])

    def total_seconds(self, stage: str) -> float:
        return float(sum(self.samples.get(stage, [])))
