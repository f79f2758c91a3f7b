"""Timing of block-split ridge fit + predict for several split counts.

Only the solver path is timed (fit on a reference design matrix, predict
on a query matrix of the same size), with BLAS pinned to one thread.
"""

import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .solver import RidgeConfig, block_split_fit, inversion_cost, ridge_predict


@dataclass
class BenchRow:
    splits: int
    block_dim: int
    mean_s: float
    inversion_cost: int
    repetitions: int
    std_s: float


@dataclass
class BenchResult:
    feature_dim: int
    rows: int
    lam: float
    table: list

    def to_dict(self):
        return {"feature_dim": self.feature_dim, "rows": self.rows, "lam": self.lam,
                "table": [asdict(r) for r in self.table]}

    def format_table(self):
        lines = [f"{'splits':>6} {'block':>6} {'mean_ms':>10} {'std_ms':>9} {'cost':>10} {'reps':>5}"]
        for r in self.table:
            lines.append(f"{r.splits:>6} {r.block_dim:>6} {r.mean_s * 1e3:>10.2f} {r.std_s * 1e3:>9.2f} "
                         f"{r.inversion_cost:>10} {r.repetitions:>5}")
        return "\n".join(lines)


def run_bench(cdim=800, rows=4096, splits=(1, 2, 4, 8), reps=10, lam=5.0, seed=0, bias=True):
    if reps < 1:
        raise ValueError("reps must be at least 1")
    for s in splits:
        if s < 1 or cdim % s:
            raise ValueError(f"split count {s} does not divide feature dimension {cdim}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((rows, cdim))
    y = np.where(rng.uniform(size=(rows, 1)) < 0.3, 1.0, -1.0)
    f_q = rng.standard_normal((rows, cdim))
    table = []
    with threadpool_limits(limits=1):
        for s in splits:
            cfg = RidgeConfig(lam, s, bias)
            ridge_predict(f_q, block_split_fit(x, y, cfg))  # warm-up
            times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                ridge_predict(f_q, block_split_fit(x, y, cfg))
                times.append(time.perf_counter() - t0)
            cost = inversion_cost(cdim, s)
            assert cost * s == cdim * cdim
            table.append(BenchRow(s, cdim // s, float(np.mean(times)), cost, reps,
                                  float(np.std(times)) if reps > 1 else 0.0))
    return BenchResult(cdim, rows, lam, table)
