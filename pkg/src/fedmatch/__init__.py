"""Federated fusion of independently trained MLPs by neuron matching."""

from .assignment import AssignmentMatrix, solve_assignment
from .datasets import Dataset, generate_synthetic, load_mnist
from .deep import GlobalNetwork, extract_layer_atoms, forward_global, \
    local_params_from_global, match_multilayer
from .estimators import FederatedMatcher, MLPClassifier
from .federation import Partition, RoundLog, aggregate_ensemble, \
    aggregate_fedavg, aggregate_kmeans, federate_pfnm, \
    partition_heterogeneous, partition_homogeneous
from .matching import AtomStats, GlobalAtoms, MatchSchedule, MatchTimings, \
    PriorConfig, build_cost_matrix, log_posterior, map_atoms, \
    match_single_layer
from .nets import MLPParams, TrainConfig, apply_permutation, evaluate, \
    forward, from_atoms, init_params, to_atoms, train
from .experiment import ExperimentConfig, ResultRecord, emit_results, \
    run_experiment

__version__ = "0.1.0"
