"""Result rows, CSV persistence and the console tables (CD x 10^-3)."""

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from modules.dg_engine import ABLATION_LABELS
from modules.errors import ContractError

logger = logging.getLogger("ResultTable")

CSV_HEADER = ("mode", "task", "seed", "mean_cd", "n_samples")
REPORT_SCALE = 1e3


@dataclass(frozen=True)
class ResultRow:
    mode: str
    task: str
    seed: int
    mean_cd: float
    n_samples: int


@dataclass(frozen=True)
class Aggregate:
    mode: str
    task: str
    mean: float
    std: float
    n_seeds: int


class ResultTable:
    def __init__(self, rows=None):
        self.rows = list(rows or [])

    def add(self, row):
        if row.mean_cd < 0:
            raise ContractError(f"negative Chamfer distance {row.mean_cd}")
        self.rows.append(row)

    def sorted_rows(self, mode_order=None, task_order=None):
        mode_rank = {m: i for i, m in enumerate(mode_order or [])}
        task_rank = {t: i for i, t in enumerate(task_order or [])}
        return sorted(
            self.rows,
            key=lambda r: (mode_rank.get(r.mode, len(mode_rank)), r.mode,
                           task_rank.get(r.task, len(task_rank)), r.task, r.seed),
        )

    # ----- persistence -----
    def to_csv(self, path, mode_order=None, task_order=None):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for r in self.sorted_rows(mode_order, task_order):
                writer.writerow([r.mode, r.task, r.seed, repr(float(r.mean_cd)), r.n_samples])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            return cls(
                ResultRow(r["mode"], r["task"], int(r["seed"]), float(r["mean_cd"]), int(r["n_samples"]))
                for r in reader
            )

    # ----- aggregation -----
    def aggregate(self):
        groups = defaultdict(list)
        for r in self.rows:
            groups[(r.mode, r.task)].append(r.mean_cd)
        out = {}
        for (mode, task), values in groups.items():
            v = np.asarray(values, dtype=np.float64)
            std = float(v.std(ddof=1)) if v.size > 1 else 0.0
            out[(mode, task)] = Aggregate(mode, task, float(v.mean()), std, int(v.size))
        return out

    def ranking(self):
        """Modes ordered by their mean CD averaged over tasks (best first)."""
        per_mode = defaultdict(list)
        for agg in self.aggregate().values():
            per_mode[agg.mode].append(agg.mean)
        return sorted(((float(np.mean(v)), m) for m, v in per_mode.items()))

    # ----- rendering -----
    def render(self, mode_order, task_order):
        aggs = self.aggregate()
        width = max(len(ABLATION_LABELS.get(m, m)) for m in mode_order) + 2
        head = "".join(f"{t[:14]:>22}" for t in task_order)
        lines = [f"{'Mode':<{width}}{head}", "-" * (width + 22 * len(task_order))]
        for mode in mode_order:
            cells = []
            for task in task_order:
                agg = aggs.get((mode, task))
                if agg is None:
                    cells.append(f"{'-':>22}")
                else:
                    cells.append(f"{agg.mean * REPORT_SCALE:>13.1f} ± {agg.std * REPORT_SCALE:<6.1f}")
            lines.append(f"{ABLATION_LABELS.get(mode, mode):<{width}}" + "".join(cells))
        lines.append("")
        lines.append("Ranking (mean CD x 10^-3 over tasks):")
        for i, (score, mode) in enumerate(self.ranking(), start=1):
            lines.append(f"  {i}. {ABLATION_LABELS.get(mode, mode)} ({mode}): {score * REPORT_SCALE:.1f}")
        return "\n".join(lines)
