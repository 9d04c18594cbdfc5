"""Rectangular linear sum assignment with deterministic tie-breaking.

The matching subproblem is a rectangular assignment: every column (a local
neuron) must be matched to a distinct row (a candidate global atom), with
at least as many rows as columns. scipy's Jonker-Volgenant solver does the
heavy lifting; on top of it we canonicalize among cost-equal optima so that
repeated runs, and runs on reordered inputs, pick the same assignment:
among optimal solutions the one whose row-index sequence (read column by
column, left to right) is lexicographically smallest is returned.

Tie detection is exact: a smaller row is only adopted when its cost entry
is bit-equal to the incumbent's and re-solving the remainder reproduces the
optimal total exactly (totals are compared as correctly rounded sums via
``math.fsum``, so summation order cannot create spurious differences).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = ["AssignmentMatrix", "solve_assignment", "assignment_total"]


class AssignmentMatrix:
    """Binary matching of columns (local neurons) into rows (global atoms).

    Stored compactly as ``row_of[l]`` = the row matched to column ``l``.
    Column sums of the dense form are exactly 1 and row sums at most 1 by
    construction; both are validated here.
    """

    __slots__ = ("row_of", "num_rows")

    def __init__(self, row_of, num_rows: int):
        row_of = np.asarray(row_of, dtype=np.int64)
        if row_of.ndim != 1:
            raise ValueError("row_of must be 1-D")
        num_rows = int(num_rows)
        if row_of.size and (row_of.min() < 0 or row_of.max() >= num_rows):
            raise ValueError(
                f"row indices must lie in 0..{num_rows - 1}, got "
                f"[{row_of.min()}, {row_of.max()}]"
            )
        if np.unique(row_of).size != row_of.size:
            raise ValueError("two columns matched to the same row")
        self.row_of = row_of
        self.row_of.setflags(write=False)
        self.num_rows = num_rows

    @property
    def num_cols(self) -> int:
        return int(self.row_of.size)

    def dense(self) -> np.ndarray:
        """The explicit binary matrix, shape (num_rows, num_cols)."""
        out = np.zeros((self.num_rows, self.num_cols), dtype=np.uint8)
        out[self.row_of, np.arange(self.num_cols)] = 1
        return out

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, AssignmentMatrix)
            and self.num_rows == other.num_rows
            and np.array_equal(self.row_of, other.row_of)
        )

    def __repr__(self) -> str:
        return f"AssignmentMatrix(row_of={self.row_of.tolist()}, num_rows={self.num_rows})"


def assignment_total(cost: np.ndarray, row_of: np.ndarray) -> float:
    """Correctly rounded total cost of an assignment (order-independent)."""
    return math.fsum(float(cost[row_of[c], c]) for c in range(len(row_of)))


def solve_assignment(cost) -> AssignmentMatrix:
    """Minimum-cost matching of every column to a distinct row.

    Requires at least as many rows as columns and finite entries. Among
    cost-equal optima, returns the one with the lexicographically smallest
    row-index sequence over columns in order (ties recognized by exact
    float equality of entries and totals).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    n_rows, n_cols = cost.shape
    if n_rows < n_cols:
        raise ValueError(
            f"cost must have at least as many rows as columns, got {cost.shape}"
        )
    if not np.all(np.isfinite(cost)):
        bad = np.argwhere(~np.isfinite(cost))[0]
        raise ValueError(f"cost contains a non-finite entry at {tuple(bad)}")

    rows, cols = linear_sum_assignment(cost)
    row_of = np.empty(n_cols, dtype=np.int64)
    row_of[cols] = rows
    row_of = _lexicographic_refine(cost, row_of)
    return AssignmentMatrix(row_of, n_rows)


def _resolve_with_fixed(cost, fixed_rows, fixed_cols, free_cols):
    """Optimal completion of an assignment whose first columns are pinned."""
    avail = np.setdiff1d(np.arange(cost.shape[0]), fixed_rows, assume_unique=False)
    if len(free_cols) > len(avail):
        return None
    sub = cost[np.ix_(avail, free_cols)]
    r, c = linear_sum_assignment(sub)
    row_of = np.empty(cost.shape[1], dtype=np.int64)
    row_of[fixed_cols] = fixed_rows
    row_of[free_cols[c]] = avail[r]
    return row_of


def _lexicographic_refine(cost, row_of):
    """Move each column to the smallest row that keeps the total optimal.

    Only rows whose cost entry is bit-equal to the incumbent's are
    candidates, which covers the ties that occur structurally (duplicate
    atoms produce duplicate rows or columns). Each candidate is confirmed
    by an exact re-solve of the remaining subproblem.
    """
    n_cols = cost.shape[1]
    best_total = assignment_total(cost, row_of)
    for c in range(n_cols):
        fixed_rows = row_of[:c]
        r_cur = row_of[c]
        smaller = np.arange(r_cur)
        smaller = smaller[cost[smaller, c] == cost[r_cur, c]]
        if smaller.size == 0:
            continue
        taken = set(fixed_rows.tolist())
        free_cols = np.arange(c + 1, n_cols)
        for r in smaller:
            if int(r) in taken:
                continue
            trial = _resolve_with_fixed(
                cost,
                np.concatenate([fixed_rows, [r]]),
                np.arange(c + 1),
                free_cols,
            )
            if trial is None:
                continue
            if assignment_total(cost, trial) == best_total:
                row_of = trial
                break
    return row_of
