"""Clustered federated learning with a pairwise fusion penalty.

Devices keep personalised models; a server-side ADMM splitting on pairwise
differences shrinks ``omega_i - omega_j`` to exactly zero for devices that
should share a model, so clusters fall out of training without being
specified in advance.
"""
from .core import (Constant, DivergenceError, FPFCError, Growing, HyperParams,
                   InvalidHyperparameterError, InvalidPairError, ModelParams, PairwiseState,
                   PerDevice, ProtocolError, RoundTrace, pair_index)
from .penalty import (PenaltyKind, prox_group_l1, prox_scad, prox_smoothed_scad, scad,
                      smoothed_scad, smoothed_scad_deriv)
from .losses import ModelKind, ModelSpec, grad, loss, predict_metric
from .data import (DeviceData, Federation, gen_linear_clusters, gen_synthetic,
                   load_csv_federation, split)
from .clustering import (ClusterAssignment, adjusted_rand_index, extract_clusters,
                         oracle_estimator)
from .engine import (DelayModel, EngineState, FPFCEngine, Schedule, aug_lagrangian,
                     inexactness_epochs, local_update, objective, run_async_fpfc, run_fpfc,
                     sample_active, server_update, stationarity_residuals)
from .tuning import LambdaLadder, run_fedavg, run_local_baseline, tune_separate, tune_warmup

__version__ = "0.1.0"
