"""Single-layer neuron matching by MAP inference in a Beta-Bernoulli model.

Each of J batches contributes an unordered set of atoms (one real vector
per neuron). Global atoms are modeled as draws from a Gaussian base measure
with an Indian-buffet prior over which batches use which atom; local atoms
are Gaussian-noised copies of their global atom. Collapsing the Gaussians
turns the per-batch matching problem into a rectangular linear sum
assignment whose rows are "join an existing global atom" (priced by a
posterior-norm improvement plus a popularity term m/(J-m)) or "open the
r-th new atom" (priced by the same improvement against the bare prior
minus a new-atom term gamma0/J discounted by r).

Optimization is coordinate ascent: batches are visited in a seeded random
order; each visit removes the batch's contributions, compacts global atoms
that became unused, rebuilds the cost matrix and re-solves the assignment.
Full passes repeat in reshuffled order until an entire pass changes
nothing, or ``max_passes`` is hit.

All computation is float64. Sufficient statistics are recomputed from
scratch at every step (never updated incrementally) so results are
bit-reproducible for a given seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .assignment import AssignmentMatrix, solve_assignment
from .validation import as_float_matrix, as_float_vector, check_positive

__all__ = [
    "PriorConfig",
    "AtomStats",
    "GlobalAtoms",
    "MatchSchedule",
    "MatchTimings",
    "PosteriorStep",
    "build_cost_matrix",
    "map_atoms",
    "log_posterior",
    "match_single_layer",
]


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters of the matching model.

    sigma0_sq is the prior variance of a global atom around mu0, sigma_sq
    the observation variance of a local atom around its global atom (shared
    across batches), gamma0 the mass parameter controlling new-atom
    creation, and num_batches the total number of batches J.
    """

    sigma0_sq: float
    sigma_sq: float
    gamma0: float
    num_batches: int
    mu0: float | np.ndarray = 0.0

    def __post_init__(self):
        check_positive(self.sigma0_sq, "sigma0_sq")
        check_positive(self.sigma_sq, "sigma_sq")
        check_positive(self.gamma0, "gamma0")
        if int(self.num_batches) < 1:
            raise ValueError(f"num_batches must be >= 1, got {self.num_batches}")

    def mu0_vector(self, dim: int) -> np.ndarray:
        """mu0 broadcast (if scalar) or validated against the atom dimension."""
        if np.ndim(self.mu0) == 0:
            return np.full(dim, float(self.mu0))
        vec = as_float_vector(self.mu0, "mu0")
        if vec.shape[0] != dim:
            raise ValueError(
                f"mu0 has dimension {vec.shape[0]} but atoms have dimension {dim}"
            )
        return vec


@dataclass(frozen=True)
class AtomStats:
    """Sufficient statistics of the global state with one batch excluded.

    ``counts[i]`` is the number of other batches matched to atom i and
    ``sums[i]`` the sum of their local atom vectors.
    """

    counts: np.ndarray
    sums: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        sums = np.asarray(self.sums, dtype=np.float64)
        if sums.ndim != 2 or counts.ndim != 1 or counts.shape[0] != sums.shape[0]:
            raise ValueError(
                f"inconsistent stats: counts {counts.shape}, sums {sums.shape}"
            )
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "sums", sums)

    @property
    def num_atoms(self) -> int:
        return int(self.counts.shape[0])


@dataclass(frozen=True)
class PosteriorStep:
    """Log-posterior recorded after one per-batch step."""

    pass_index: int
    batch: int
    log_posterior: float
    reassignment: bool


@dataclass(frozen=True)
class GlobalAtoms:
    """Matched global atoms with per-batch assignments.

    ``atoms[i]`` is the MAP estimate of global atom i, ``match_counts[i]``
    the number of batches matched to it, and ``assignments[j]`` the
    matching of batch j's neurons into rows 0..L-1. Atoms with zero matches
    are never retained.
    """

    atoms: np.ndarray
    match_counts: np.ndarray
    assignments: tuple[AssignmentMatrix, ...]
    n_passes: int = 0
    trace: tuple[PosteriorStep, ...] = ()

    @property
    def num_atoms(self) -> int:
        return int(self.atoms.shape[0])


@dataclass(frozen=True)
class MatchSchedule:
    """Pass control for the coordinate-ascent matcher.

    The seed drives the batch visit order (reshuffled every pass). A single
    sequential pass over the batches counts as pass 1; set max_passes=1 for
    one-shot matching, or leave stop_on_converged on to iterate until a
    full pass changes no assignment.
    """

    seed: int
    max_passes: int = 10
    stop_on_converged: bool = True

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("a seed is required for reproducible matching")
        if int(self.max_passes) < 1:
            raise ValueError(f"max_passes must be >= 1, got {self.max_passes}")


@dataclass
class MatchTimings:
    """Accumulated wall-clock spent in cost construction vs. assignment."""

    cost_seconds: float = 0.0
    solve_seconds: float = 0.0
    num_solves: int = 0


def build_cost_matrix(local_atoms, others: AtomStats, prior: PriorConfig) -> np.ndarray:
    """Assignment costs for matching one batch against the rest.

    Rows 0..L-1 price joining each existing global atom (the posterior-norm
    difference of adding this neuron, plus 2*log(m/(J-m)) for popularity m
    among the other batches); rows L..L+L_j-1 price opening the r-th new
    atom and differ only by the strictly increasing penalty
    -2*log(r/(gamma0/J)). Entries are negated so the solver minimizes.
    """
    V = as_float_matrix(local_atoms, "local_atoms")
    n_local, dim = V.shape
    counts = others.counts
    sums = others.sums
    n_exist = others.num_atoms
    if n_exist and sums.shape[1] != dim:
        raise ValueError(
            f"global atoms have dimension {sums.shape[1]}, local atoms {dim}"
        )
    J = int(prior.num_batches)
    if n_exist and counts.min() <= 0:
        raise ValueError(
            "a retained global atom has no matches outside this batch; "
            "compact zero-count atoms before building costs"
        )
    if n_exist and counts.max() >= J:
        raise ValueError(
            "an atom is matched by >= J batches with one batch excluded, "
            "which cannot happen for a valid state"
        )

    s0 = float(prior.sigma0_sq)
    s = float(prior.sigma_sq)
    mu0 = prior.mu0_vector(dim)
    prior_part = mu0 / s0

    cost = np.empty((n_exist + n_local, n_local), dtype=np.float64)

    if n_exist:
        t = prior_part + sums / s
        denom = 1.0 / s0 + counts / s
        t_norm = np.sum(t * t, axis=1) / denom
        popularity = 2.0 * np.log(counts / (J - counts))
        denom_plus = denom + 1.0 / s
        for l in range(n_local):
            u = t + V[l] / s
            gain = np.sum(u * u, axis=1) / denom_plus - t_norm
            cost[:n_exist, l] = -(gain + popularity)

    u_new = prior_part + V / s
    new_gain = np.sum(u_new * u_new, axis=1) / (1.0 / s0 + 1.0 / s)
    new_gain -= np.sum(prior_part * prior_part) * s0
    order_penalty = 2.0 * (np.log(prior.gamma0 / J) - np.log(np.arange(1, n_local + 1)))
    cost[n_exist:, :] = -(new_gain[None, :] + order_penalty[:, None])
    return cost


def _accumulate_stats(row_maps, atom_sets, num_atoms, dim, exclude=None):
    """Counts and vector sums per global atom, batches taken in index order."""
    counts = np.zeros(num_atoms, dtype=np.int64)
    sums = np.zeros((num_atoms, dim), dtype=np.float64)
    for j, rows in enumerate(row_maps):
        if rows is None or j == exclude:
            continue
        counts[rows] += 1
        sums[rows] += atom_sets[j]
    return counts, sums


def _as_row_maps(assignments):
    rows = []
    for j, a in enumerate(assignments):
        r = a.row_of if isinstance(a, AssignmentMatrix) else \
            np.asarray(a, dtype=np.int64)
        if r.size and (np.unique(r).size != r.size or r.min() < 0):
            raise ValueError(
                f"batch {j}: rows must be distinct non-negative atom indices"
            )
        rows.append(r)
    return rows


def map_atoms(assignments, local_atoms, prior: PriorConfig) -> GlobalAtoms:
    """MAP estimate of the global atoms implied by per-batch assignments.

    Each atom is the precision-weighted average of its matched local atoms
    with the prior: (mu0/s0 + sum(v)/s) / (1/s0 + m/s). Atoms matched by no
    batch are dropped and the assignments reindexed accordingly.
    """
    atom_sets = [as_float_matrix(a, f"batch {j} atoms") for j, a in enumerate(local_atoms)]
    row_maps = _as_row_maps(assignments)
    if len(row_maps) != len(atom_sets):
        raise ValueError("one assignment per batch is required")
    for j, (rows, V) in enumerate(zip(row_maps, atom_sets)):
        if rows.shape[0] != V.shape[0]:
            raise ValueError(f"batch {j}: {rows.shape[0]} assignments for {V.shape[0]} atoms")
    dim = atom_sets[0].shape[1]
    num_slots = 1 + max((int(r.max()) for r in row_maps if r.size), default=-1)
    counts, sums = _accumulate_stats(row_maps, atom_sets, num_slots, dim)

    active = counts > 0
    remap = -np.ones(num_slots, dtype=np.int64)
    remap[active] = np.arange(int(active.sum()))
    n_active = int(active.sum())

    s0 = float(prior.sigma0_sq)
    s = float(prior.sigma_sq)
    mu0 = prior.mu0_vector(dim)
    numer = mu0 / s0 + sums[active] / s
    denom = 1.0 / s0 + counts[active] / s
    atoms = numer / denom[:, None]

    new_assignments = tuple(
        AssignmentMatrix(remap[rows], n_active) for rows in row_maps
    )
    match_counts = counts[active]
    atoms.setflags(write=False)
    match_counts.setflags(write=False)
    return GlobalAtoms(atoms=atoms, match_counts=match_counts,
                       assignments=new_assignments)


def log_posterior(state, local_atoms, prior: PriorConfig) -> float:
    """Matching objective of a full assignment state, up to a constant.

    The collapsed Gaussian term 0.5 * sum_i |mu0/s0 + sum(v)/s|^2 / (1/s0 +
    m/s) over active atoms, plus the buffet prior per active atom:
    log Gamma(m) + log Gamma(J-m+1) - log Gamma(J+1) + log(gamma0), whose
    increments reproduce the assignment costs' log(m/(J-m)) popularity
    odds and the log(gamma0/J) price of opening an atom. Only differences
    between states over the same inputs are meaningful.
    """
    row_maps = _as_row_maps(state.assignments if isinstance(state, GlobalAtoms) else state)
    atom_sets = [as_float_matrix(a, f"batch {j} atoms") for j, a in enumerate(local_atoms)]
    return _log_posterior_rows(row_maps, atom_sets, prior)


def _log_posterior_rows(row_maps, atom_sets, prior: PriorConfig) -> float:
    dim = atom_sets[0].shape[1]
    num_slots = 1 + max((int(r.max()) for r in row_maps if r is not None and r.size),
                        default=-1)
    counts, sums = _accumulate_stats(row_maps, atom_sets, num_slots, dim)
    active = counts > 0
    m = counts[active].astype(np.float64)
    J = float(prior.num_batches)

    s0 = float(prior.sigma0_sq)
    s = float(prior.sigma_sq)
    mu0 = prior.mu0_vector(dim)
    t = mu0 / s0 + sums[active] / s
    denom = 1.0 / s0 + m / s
    gauss = 0.5 * float(np.sum(np.sum(t * t, axis=1) / denom))

    buffet = float(np.sum(gammaln(m) + gammaln(J - m + 1.0) - gammaln(J + 1.0)
                          + np.log(prior.gamma0)))
    return gauss + buffet


def match_single_layer(local_atom_sets, prior: PriorConfig,
                       schedule: MatchSchedule,
                       timings: MatchTimings | None = None) -> GlobalAtoms:
    """Match J sets of local atoms into a shared set of global atoms.

    Initialization processes the batches once in a seeded random order (the
    first batch trivially creates one global atom per neuron); subsequent
    passes revisit every batch in a reshuffled order, removing it,
    compacting unused atoms and re-solving its assignment. A re-solved
    assignment is accepted only if it does not lower ``log_posterior``
    (the solver's rank penalty on fresh atoms is bookkeeping the joint
    objective does not carry, so a cost-optimal proposal can occasionally
    lose posterior mass; such proposals are discarded and the batch keeps
    its previous assignment). The posterior trace is therefore
    non-decreasing across reassignment steps by construction. The returned
    atom count L satisfies max_j L_j <= L <= sum_j L_j.
    """
    atom_sets = [as_float_matrix(a, f"batch {j} atoms")
                 for j, a in enumerate(local_atom_sets)]
    n_batches = len(atom_sets)
    if n_batches == 0:
        raise ValueError("at least one batch is required")
    dim = atom_sets[0].shape[1]
    for j, V in enumerate(atom_sets):
        if V.shape[1] != dim:
            raise ValueError(
                f"batch {j} atoms have dimension {V.shape[1]}, expected {dim}"
            )
    if int(prior.num_batches) != n_batches:
        raise ValueError(
            f"prior.num_batches is {prior.num_batches} but {n_batches} batches given"
        )

    rng = np.random.default_rng(schedule.seed)
    row_maps: list[np.ndarray | None] = [None] * n_batches
    num_atoms = 0
    trace: list[PosteriorStep] = []
    prev_partition = None
    n_passes = 0
    current_lp = None

    for pass_index in range(1, int(schedule.max_passes) + 1):
        n_passes = pass_index
        order = rng.permutation(n_batches)
        for j in order:
            j = int(j)
            snapshot = ([r.copy() if r is not None else None for r in row_maps],
                        num_atoms)
            counts, sums = _accumulate_stats(row_maps, atom_sets, num_atoms, dim,
                                             exclude=j)
            keep = counts > 0
            if not np.all(keep):
                remap = -np.ones(num_atoms, dtype=np.int64)
                remap[keep] = np.arange(int(keep.sum()))
                for j2, rows in enumerate(row_maps):
                    if rows is not None and j2 != j:
                        row_maps[j2] = remap[rows]
                counts, sums = counts[keep], sums[keep]
                num_atoms = int(keep.sum())

            t0 = time.perf_counter()
            cost = build_cost_matrix(atom_sets[j], AtomStats(counts, sums), prior)
            t1 = time.perf_counter()
            solved = solve_assignment(cost)
            t2 = time.perf_counter()
            if timings is not None:
                timings.cost_seconds += t1 - t0
                timings.solve_seconds += t2 - t1
                timings.num_solves += 1

            rows = solved.row_of.copy()
            new_mask = rows >= num_atoms
            n_new = int(new_mask.sum())
            if not np.array_equal(np.sort(rows[new_mask]),
                                  num_atoms + np.arange(n_new)):
                raise AssertionError(
                    "new-atom rows are not a contiguous prefix; the strictly "
                    "increasing order penalty should make this impossible"
                )
            # Within the new block the cost is separable (per-column base plus
            # per-row penalty), so any pairing is optimal; order new atoms by
            # column for a canonical result.
            rows[new_mask] = num_atoms + np.arange(n_new)
            row_maps[j] = rows
            num_atoms += n_new

            if all(r is not None for r in row_maps):
                lp = _log_posterior_rows(row_maps, atom_sets, prior)
                if current_lp is not None and lp < current_lp:
                    row_maps, num_atoms = snapshot
                    lp = current_lp
                current_lp = lp
                trace.append(PosteriorStep(
                    pass_index=pass_index,
                    batch=j,
                    log_posterior=lp,
                    reassignment=pass_index > 1,
                ))

        partition = _canonical_partition(row_maps)
        if (schedule.stop_on_converged and prev_partition is not None
                and partition == prev_partition):
            break
        prev_partition = partition

    result = map_atoms([np.asarray(r) for r in row_maps], atom_sets, prior)
    n_atoms = result.num_atoms
    largest = max(V.shape[0] for V in atom_sets)
    total = sum(V.shape[0] for V in atom_sets)
    if not largest <= n_atoms <= total:
        raise AssertionError(
            f"global atom count {n_atoms} outside [{largest}, {total}]"
        )
    return GlobalAtoms(atoms=result.atoms, match_counts=result.match_counts,
                       assignments=result.assignments, n_passes=n_passes,
                       trace=tuple(trace))


def _canonical_partition(row_maps):
    """Assignment state as a set of atom member-sets, immune to reindexing."""
    members: dict[int, list] = {}
    for j, rows in enumerate(row_maps):
        if rows is None:
            continue
        for l, r in enumerate(rows.tolist()):
            members.setdefault(r, []).append((j, l))
    return frozenset(frozenset(v) for v in members.values())
