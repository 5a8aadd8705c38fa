"""Classical IOHMM routines: forward-recursion likelihood, exhaustive
enumeration and ancestral sampling.

These work directly on the probability tables and share no numerical code with
the circuit path, so they serve as ground truth for it.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .bayesnet import IohmmSpec
from .errors import LengthMismatch, SpaceTooLarge

MAX_ENUMERATION = 10**6


@dataclass
class IohmmSample:
    inputs: List[int]
    states: List[int]
    observations: List[int]

    def __post_init__(self):
        if not len(self.inputs) == len(self.states) == len(self.observations):
            raise LengthMismatch("inputs, states and observations must have equal length")


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def loglik_forward(spec: IohmmSpec, inputs: Sequence[Optional[int]], observations: Sequence[Optional[int]]) -> float:
    """log P(inputs, observations) with latent states summed out.

    ``None`` entries are marginalized.
    """
    if len(inputs) != len(observations):
        raise LengthMismatch(f"{len(inputs)} inputs vs {len(observations)} observations")
    if len(inputs) == 0:
        return 0.0
    log_prior = _log(spec.input_prior)                  # (u,)
    log_init = _log(spec.initial)                       # (u, z)
    log_trans = _log(spec.transition)                   # (z', u, z)
    log_emit = _log(spec.emission)                      # (z, u, x)

    def input_term(u):
        term = log_prior.copy() if u is None else np.full(spec.n_inputs, -np.inf)
        if u is not None:
            term[u] = log_prior[u]
        return term

    def emit_term(x):                                   # (u, z)
        if x is None:
            return np.zeros((spec.n_inputs, spec.n_states))
        return log_emit[:, :, x].T

    # alpha[z] = log P(u_1..t, x_1..t, z_t = z)
    a = input_term(inputs[0])[:, None] + log_init + emit_term(observations[0])
    alpha = logsumexp(a, axis=0)
    for u, x in zip(inputs[1:], observations[1:]):
        # (z', u, z)
        a = alpha[:, None, None] + log_trans + input_term(u)[None, :, None] + emit_term(x)[None, :, :]
        alpha = logsumexp(a, axis=(0, 1))
    return float(logsumexp(alpha))


def enumerate_joint(spec: IohmmSpec, length: int) -> Dict[Tuple[tuple, tuple, tuple], float]:
    """Probability of every (inputs, states, observations) triple of sequences."""
    per_slice = spec.n_inputs * spec.n_states * spec.n_obs
    if per_slice ** length > MAX_ENUMERATION:
        raise SpaceTooLarge(f"{per_slice}**{length} assignments exceed {MAX_ENUMERATION}")
    triples = list(itertools.product(range(spec.n_inputs), range(spec.n_states), range(spec.n_obs)))
    out = {}
    for path in itertools.product(triples, repeat=length):
        p = 1.0
        prev = None
        for u, z, x in path:
            p *= spec.input_prior[u]
            p *= spec.initial[u, z] if prev is None else spec.transition[prev, u, z]
            p *= spec.emission[z, u, x]
            prev = z
        us, zs, xs = zip(*path)
        out[(us, zs, xs)] = float(p)
    return out


def _draw(rng, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per row of ``probs``."""
    cdf = np.cumsum(probs, axis=-1)
    r = rng.random(probs.shape[0])[:, None]
    return (r >= cdf[:, :-1]).sum(axis=1)


def sample(spec: IohmmSpec, length: int, count: int, seed: int) -> List[IohmmSample]:
    """Ancestral samples: u_t, then z_t, then x_t in each slice."""
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    u = np.zeros((count, length), dtype=int)
    z = np.zeros((count, length), dtype=int)
    x = np.zeros((count, length), dtype=int)
    for t in range(length):
        u[:, t] = _draw(rng, np.broadcast_to(spec.input_prior, (count, spec.n_inputs)))
        if t == 0:
            z[:, t] = _draw(rng, spec.initial[u[:, t]])
        else:
            z[:, t] = _draw(rng, spec.transition[z[:, t - 1], u[:, t]])
        x[:, t] = _draw(rng, spec.emission[z[:, t], u[:, t]])
    return [IohmmSample(u[i].tolist(), z[i].tolist(), x[i].tolist()) for i in range(count)]


def write_samples(samples: Sequence[IohmmSample], path, include_states: bool = True):
    with open(path, "w") as f:
        for s in samples:
            rec = {"inputs": s.inputs, "observations": s.observations}
            if include_states:
                rec["states"] = s.states
            f.write(json.dumps(rec) + "\n")
