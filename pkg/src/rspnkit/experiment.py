"""Synthetic IOHMM experiment: sample from a generator, train a randomly
initialized RSPN on the training split, and compare held-out log-likelihoods
of the generator and the learned model."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .bayesnet import IohmmSpec, compile_rspn
from .circuit import evaluate_batch
from .data import SequenceDataset, to_evidence
from .em import EmConfig, train_restarts
from .errors import InputError
from .iohmm import loglik_forward, sample
from .rspn import RspnSpec, unroll_for_dataset


@dataclass(frozen=True)
class ExperimentConfig:
    generator: IohmmSpec
    n_train: int = 2000
    n_test: int = 500
    seq_length: int = 10
    seed: int = 0
    em: EmConfig = field(default_factory=EmConfig)
    model_states: Optional[int] = None
    restarts: int = 5
    repeats: int = 1
    missing_fraction: float = 0.0
    skip_training: bool = False

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise InputError("n_train and n_test must be at least 1")
        if self.seq_length < 2:
            raise InputError("seq_length must be at least 2")
        if self.restarts < 1 or self.repeats < 1:
            raise InputError("restarts and repeats must be at least 1")

    @classmethod
    def from_json(cls, doc: dict, base_dir=".") -> "ExperimentConfig":
        doc = dict(doc)
        gen = doc.pop("generator")
        if isinstance(gen, str):
            gen = IohmmSpec.load(Path(base_dir) / gen)
        else:
            gen = IohmmSpec.from_json(gen)
        em = EmConfig.from_json(doc.pop("em", {}))
        return cls(generator=gen, em=em, **doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_json(json.load(f), Path(path).parent)


def score(spec: RspnSpec, dataset: SequenceDataset) -> float:
    """Total log-likelihood, evaluated per distinct sequence length."""
    total = 0.0
    circuits = unroll_for_dataset(spec, dataset)
    for length, idx in dataset.by_length().items():
        total += float(evaluate_batch(circuits[length], [to_evidence(dataset, i) for i in idx]).sum())
    return total


def run_once(cfg: ExperimentConfig, seed: int) -> dict:
    gen = cfg.generator
    samples = sample(gen, cfg.seq_length, cfg.n_train + cfg.n_test, seed)
    data = SequenceDataset.from_samples(samples, gen.n_inputs, gen.n_obs)
    train_set = data.subset(range(cfg.n_train))
    test_set = data.subset(range(cfg.n_train, cfg.n_train + cfg.n_test))
    if cfg.missing_fraction > 0:
        train_set = train_set.with_missing(["x"], cfg.missing_fraction, seed)

    run = {"seed": seed}
    if cfg.skip_training:
        model = compile_rspn(gen)
    else:
        n_states = cfg.model_states or gen.n_states
        shape = compile_rspn(IohmmSpec.uniform(gen.n_inputs, n_states, gen.n_obs))
        model, report, init_seed = train_restarts(shape, train_set, cfg.em, cfg.restarts, seed)
        run.update(init_seed=init_seed, iterations=report.iterations, stop_reason=report.stop_reason,
                   train_log_likelihood=report.final_log_likelihood, expansions=report.expansions)
    gen_ll = float(sum(loglik_forward(gen, s.inputs, s.observations) for s in samples[cfg.n_train:]))
    model_ll = score(model, test_set)
    run.update(generator_log_likelihood=gen_ll, model_log_likelihood=model_ll,
               relative_gap=abs(model_ll - gen_ll) / abs(gen_ll))
    run["model"] = model
    return run


def run_experiment(cfg: ExperimentConfig) -> dict:
    runs = [run_once(cfg, cfg.seed + r) for r in range(cfg.repeats)]
    summary = {}
    for key in ("generator_log_likelihood", "model_log_likelihood", "relative_gap"):
        vals = np.array([r[key] for r in runs])
        summary[key] = {"mean": float(vals.mean()), "sd": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}
    return {
        "config": {"n_train": cfg.n_train, "n_test": cfg.n_test, "seq_length": cfg.seq_length,
                   "seed": cfg.seed, "repeats": cfg.repeats, "restarts": cfg.restarts,
                   "model_states": cfg.model_states or cfg.generator.n_states,
                   "missing_fraction": cfg.missing_fraction, "skip_training": cfg.skip_training,
                   "em": cfg.em.to_json()},
        "runs": [{k: v for k, v in r.items() if k != "model"} for r in runs],
        "summary": summary,
    }
