"""Top-down matching of deep MLPs into one global network.

Layers are matched greedily from the output side down. At layer c a
neuron's atom is its vector of outgoing weights, scattered into the
coordinate frame of the already-matched global layer c+1 (coordinates
belonging to upper neurons absent from the batch are exactly zero); at the
top hidden layer the output classes provide a shared, unpermuted frame. A
bias slot is kept in every atom, and the bottom layer additionally carries
its incoming input weights, mirroring the single-layer layout. After each
layer is matched its global size is frozen and the next layer down is
processed; the matched atoms are finally reassembled into weight matrices.

The output-layer bias belongs to no atom and is averaged across batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matching import GlobalAtoms, MatchSchedule, MatchTimings, PriorConfig, \
    match_single_layer
from .nets import MLPParams, forward, to_atoms
from .validation import as_float_matrix

__all__ = [
    "LayerAtomSet",
    "GlobalNetwork",
    "extract_layer_atoms",
    "match_multilayer",
    "forward_global",
    "local_params_from_global",
]


@dataclass(frozen=True)
class LayerAtomSet:
    """Per-batch atoms of one layer, in the global upper-layer frame."""

    layer_index: int
    atom_dim: int
    atoms: tuple
    upper_assignments: tuple | None

    @property
    def num_batches(self) -> int:
        return len(self.atoms)


@dataclass(frozen=True)
class GlobalNetwork:
    """The fused network plus the matching that produced it.

    ``layer_assignments[c][j]`` maps batch j's layer-c neurons into global
    layer-c atoms; it is what a batch needs to pull its slice of the global
    model back out (e.g. to re-initialize for another communication round).
    """

    params: MLPParams
    layer_sizes: tuple
    match_counts: tuple
    layer_assignments: tuple

    @property
    def input_dim(self) -> int:
        return self.params.input_dim

    @property
    def output_dim(self) -> int:
        return self.params.output_dim

    @property
    def num_batches(self) -> int:
        return len(self.layer_assignments[0])


def _check_same_architecture(local_params):
    if not local_params:
        raise ValueError("at least one local network is required")
    depth = len(local_params[0].weights) - 1
    d_in = local_params[0].input_dim
    d_out = local_params[0].output_dim
    act = local_params[0].activation
    for j, p in enumerate(local_params):
        if len(p.weights) - 1 != depth:
            raise ValueError(
                f"batch {j} has {len(p.weights) - 1} hidden layers, expected {depth}; "
                "matching across unequal depths is not defined"
            )
        if p.input_dim != d_in or p.output_dim != d_out:
            raise ValueError(f"batch {j} input/output dimensions differ from batch 0")
        if p.activation != act:
            raise ValueError(f"batch {j} uses activation {p.activation!r}, expected {act!r}")
    return depth, d_in, d_out, act


def extract_layer_atoms(local_params, layer: int,
                        upper_assignments=None) -> LayerAtomSet:
    """Atoms of one hidden layer, scattered into the global upper frame.

    ``upper_assignments`` is the per-batch matching of layer layer+1 (None
    for the top hidden layer, whose outgoing weights already live in the
    shared output-class frame). The bottom layer prepends the D incoming
    input weights; every layer keeps its bias slot.
    """
    depth, d_in, d_out, _ = _check_same_architecture(local_params)
    if not 0 <= layer < depth:
        raise ValueError(f"layer must be in 0..{depth - 1}, got {layer}")
    top = layer == depth - 1
    if top:
        if upper_assignments is not None:
            raise ValueError("the top hidden layer takes no upper assignments")
        upper_size = d_out
    else:
        if upper_assignments is None or len(upper_assignments) != len(local_params):
            raise ValueError("one upper assignment per batch is required")
        upper_size = upper_assignments[0].num_rows

    out = []
    for j, p in enumerate(local_params):
        local = to_atoms(p)[layer]
        lead = (d_in if layer == 0 else 0) + 1
        head, outgoing = local[:, :lead], local[:, lead:]
        if top:
            scattered = outgoing
        else:
            rows = upper_assignments[j].row_of
            if upper_assignments[j].num_rows != upper_size:
                raise ValueError(f"batch {j} upper assignment disagrees on layer size")
            if rows.shape[0] != outgoing.shape[1]:
                raise ValueError(
                    f"batch {j}: {outgoing.shape[1]} outgoing columns but "
                    f"{rows.shape[0]} upper assignments"
                )
            scattered = np.zeros((outgoing.shape[0], upper_size))
            scattered[:, rows] = outgoing
        out.append(np.ascontiguousarray(np.concatenate([head, scattered], axis=1)))
    return LayerAtomSet(layer_index=layer, atom_dim=out[0].shape[1],
                        atoms=tuple(out),
                        upper_assignments=None if top else tuple(upper_assignments))


def _priors_per_layer(priors, depth: int, n_batches: int):
    if isinstance(priors, PriorConfig):
        priors = [priors] * depth
    priors = list(priors)
    if len(priors) != depth:
        raise ValueError(f"{len(priors)} priors for {depth} layers")
    for c, p in enumerate(priors):
        if p.num_batches != n_batches:
            raise ValueError(f"layer {c} prior expects {p.num_batches} batches, got {n_batches}")
    return priors


def match_multilayer(local_params, priors, schedule: MatchSchedule,
                     timings: MatchTimings | None = None) -> GlobalNetwork:
    """Fuse J local networks of equal depth into one global network.

    ``priors`` is a single PriorConfig applied at every layer, or one per
    hidden layer (indexed bottom-up). Matching runs top-down; every layer
    reuses the same schedule seed, so a one-hidden-layer network matches
    bit-identically to ``match_single_layer`` on the concatenated atoms.
    """
    depth, d_in, d_out, act = _check_same_architecture(local_params)
    n_batches = len(local_params)
    priors = _priors_per_layer(priors, depth, n_batches)

    results: list[GlobalAtoms] = [None] * depth
    upper = None
    for layer in range(depth - 1, -1, -1):
        atom_set = extract_layer_atoms(local_params, layer, upper)
        results[layer] = match_single_layer(atom_set.atoms, priors[layer],
                                            schedule, timings)
        upper = results[layer].assignments

    sizes = tuple(r.num_atoms for r in results)
    weights = []
    biases = []
    weights.append(results[0].atoms[:, :d_in].T.copy())
    for layer in range(depth):
        ofs = d_in if layer == 0 else 0
        biases.append(results[layer].atoms[:, ofs].copy())
        weights.append(results[layer].atoms[:, ofs + 1:].copy())
    biases.append(np.mean([p.biases[-1] for p in local_params], axis=0))

    params = MLPParams(weights, biases, act)
    return GlobalNetwork(
        params=params,
        layer_sizes=sizes,
        match_counts=tuple(r.match_counts for r in results),
        layer_assignments=tuple(r.assignments for r in results),
    )


def forward_global(network: GlobalNetwork, X) -> np.ndarray:
    """Class probabilities of the fused network; rows sum to one."""
    X = as_float_matrix(X, "X")
    return forward(network.params, X)


def local_params_from_global(network: GlobalNetwork, batch: int) -> MLPParams:
    """The slice of the global network matched to one batch.

    Gathers each layer's atoms through the batch's assignment: incoming
    input weights and biases directly, inter-layer weights through the
    assignments of both endpoint layers. This is the re-initialization rule
    of the communication protocol; every local neuron equals its matched
    global atom exactly.
    """
    depth = len(network.layer_sizes)
    rows = [network.layer_assignments[c][batch].row_of for c in range(depth)]
    g = network.params
    weights = [g.weights[0][:, rows[0]].copy()]
    for c in range(1, depth):
        weights.append(g.weights[c][np.ix_(rows[c - 1], rows[c])])
    weights.append(g.weights[depth][rows[depth - 1], :].copy())
    biases = [g.biases[c][rows[c]].copy() for c in range(depth)]
    biases.append(g.biases[depth].copy())
    return MLPParams(weights, biases, g.activation)
