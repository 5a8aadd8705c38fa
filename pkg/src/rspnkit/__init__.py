"""Recurrent sum-product networks compiled from Bayesian networks and IOHMMs,
trained with differentiation-free EM and queried exactly."""
from .bayesnet import BayesNet, BnVariable, Cpt, IohmmSpec, compile_network, compile_rspn, unroll_iohmm
from .circuit import (
    CategoricalLeaf,
    CircuitGraph,
    IndicatorLeaf,
    Node,
    conditional,
    evaluate,
    evaluate_batch,
    posterior_over,
    predict_map,
    validate,
)
from .data import SequenceDataset, load, save, split, to_evidence
from .em import ClusteringConfig, EmConfig, EmState, TrainReport, e_step, em_step, expand_leaf, train, train_restarts
from .errors import InputError, RspnError
from .iohmm import IohmmSample, enumerate_joint, loglik_forward, sample
from .rspn import CircuitFragment, RspnSpec, unroll, unroll_for_dataset

__version__ = "0.1.0"
