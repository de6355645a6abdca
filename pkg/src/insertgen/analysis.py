"""Generation-order analysis over decoded trajectories.

The questions answered here: which token classes does a trained model insert
early versus late, and does its order look left-to-right, right-to-left, or
neither? Both work on the relative insertion index: the t-th of n insertions
gets index t/(n-1), so 0 is first and 1 is last (a lone insertion counts as
0). Indices are histogrammed into ten bins per token class.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field

from .tasks import Vocab
from .trajectories import Insert, Trajectory

N_BINS = 10


def relative_insertion_indices(traj: Trajectory) -> list[tuple[int, float]]:
    """(token, relative index) per insertion, in insertion order."""
    inserts = [ev for ev in traj if isinstance(ev, Insert)]
    n = len(inserts)
    if n == 0:
        return []
    if n == 1:
        return [(inserts[0].token, 0.0)]
    return [(ev.token, t / (n - 1)) for t, ev in enumerate(inserts)]


def rel_index_bin(rel: float) -> int:
    """Bin 0 covers [0, 0.1), ..., bin 9 covers [0.9, 1.0]."""
    if not 0.0 <= rel <= 1.0:
        raise ValueError(f"relative index {rel} out of [0, 1]")
    return min(int(rel * N_BINS), N_BINS - 1)


def order_direction(traj: Trajectory) -> str:
    """"l2r" when every insertion appends, "r2l" when every one prepends,
    otherwise "mixed". A single insertion does both; l2r wins."""
    inserts = [ev for ev in traj if isinstance(ev, Insert)]
    if all(ev.pos == t for t, ev in enumerate(inserts)):
        return "l2r"
    if all(ev.pos == 0 for ev in inserts):
        return "r2l"
    return "mixed"


@dataclass
class OrderProfile:
    """Aggregated insertion-order statistics for a batch of trajectories."""

    counts: Counter = field(default_factory=Counter)  # (class, bin) -> n
    rel_sum: Counter = field(default_factory=Counter)  # class -> sum of rel
    rel_n: Counter = field(default_factory=Counter)  # class -> n
    directions: Counter = field(default_factory=Counter)
    n_trajectories: int = 0

    def add(self, traj: Trajectory, vocab: Vocab) -> None:
        for token, rel in relative_insertion_indices(traj):
            cls = vocab.class_of(token)
            self.counts[(cls, rel_index_bin(rel))] += 1
            self.rel_sum[cls] += rel
            self.rel_n[cls] += 1
        self.directions[order_direction(traj)] += 1
        self.n_trajectories += 1

    def mean_rel_index(self, cls: str) -> float:
        if self.rel_n[cls] == 0:
            raise ValueError(f"no insertions observed for class {cls!r}")
        return self.rel_sum[cls] / self.rel_n[cls]

    def classes(self) -> list[str]:
        return sorted(self.rel_n)


def profile_trajectories(trajs: list[Trajectory], vocab: Vocab) -> OrderProfile:
    prof = OrderProfile()
    for t in trajs:
        prof.add(t, vocab)
    return prof


def write_profile_csv(path, prof: OrderProfile) -> None:
    """class,bin,count rows; every (class, bin) cell is written, zeros too."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "bin", "count"])
        for cls in prof.classes():
            for b in range(N_BINS):
                w.writerow([cls, b, prof.counts[(cls, b)]])


def read_profile_csv(path) -> dict[tuple[str, int], int]:
    counts: dict[tuple[str, int], int] = {}
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if header != ["class", "bin", "count"]:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in r:
            counts[(row[0], int(row[1]))] = int(row[2])
    return counts
