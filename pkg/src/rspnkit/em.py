"""Expectation-maximization for recurrent SPNs without differentiation.

Each iteration evaluates the unrolled circuits bottom-up, then pushes a
per-datapoint "reaching" probability top-down: a sum node splits what it
receives among its children in proportion to weight times child value, a
product node hands it unchanged to every child, and a leaf records it with
the data. Sum weights are re-estimated from the aggregated edge mass and
categorical leaves from their weighted data. Aggregation is by tie, so every
copy of a repeated node contributes to, and receives, one shared update.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .circuit import (
    LEAF,
    SUM,
    CategoricalLeaf,
    CircuitGraph,
    Node,
    Plan,
    _CAT,
    _PROD,
    _SUM,
    evidence_columns,
    log_weights,
)
from .data import SequenceDataset
from .errors import EmptyDataset, InputError, InsufficientData, LeafNotFound, NumericalFailure, SchemaViolation
from .rspn import CircuitFragment, RspnSpec, unroll

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClusteringConfig:
    k: int = 2
    seed: int = 0


@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 200
    rel_ll_tol: float = 1e-6
    weight_smoothing: float = 1e-3
    leaf_prob_floor: float = 0.0
    clustering: Optional[ClusteringConfig] = None
    threads: int = 1

    def __post_init__(self):
        if self.max_iters < 1:
            raise InputError("max_iters must be at least 1")
        if not self.rel_ll_tol > 0:
            raise InputError("rel_ll_tol must be positive")
        if self.weight_smoothing < 0:
            raise InputError("weight_smoothing must be non-negative")
        if not 0 <= self.leaf_prob_floor < 1:
            raise InputError("leaf_prob_floor must lie in [0, 1)")
        if isinstance(self.clustering, Mapping):
            object.__setattr__(self, "clustering", ClusteringConfig(**self.clustering))
        if self.clustering is not None and self.clustering.k < 2:
            raise InputError("clustering needs k >= 2")

    @classmethod
    def from_json(cls, doc: Mapping) -> "EmConfig":
        return cls(**doc)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class EmState:
    """Statistics from one E-step.

    ``sum_counts[tie][i]`` is the aggregated mass passed from sums of that tie
    to their i-th child; ``leaf_counts[tie]`` the expected value counts of a
    categorical leaf tie. ``leaf_data`` and ``pass_down`` are only filled on
    request.
    """

    log_likelihood: float
    n: int
    sum_counts: Dict[str, np.ndarray] = field(default_factory=dict)
    leaf_counts: Dict[str, np.ndarray] = field(default_factory=dict)
    leaf_data: Optional[Dict[str, Tuple[np.ndarray, np.ndarray]]] = None
    pass_down: Optional[Dict[int, Dict[tuple, np.ndarray]]] = None

    @property
    def edge_counts(self) -> Dict[Tuple[str, int], float]:
        return {(tie, i): float(c) for tie, cs in self.sum_counts.items() for i, c in enumerate(cs)}


@dataclass
class TrainReport:
    initial_log_likelihood: float
    records: List[dict] = field(default_factory=list)
    stop_reason: str = "max_iters"
    expansions: List[str] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def trace(self) -> List[float]:
        return [self.initial_log_likelihood] + [r["log_likelihood"] for r in self.records]

    @property
    def final_log_likelihood(self) -> float:
        return self.trace[-1]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)


# ---------------------------------------------------------------------------
# Engine


def _key(plan: Plan, i: int) -> str:
    return plan.tie[i] or f"#{plan.order[i]}"


class _Group:
    def __init__(self, graph: CircuitGraph, columns: Dict[str, np.ndarray], n: int, label):
        self.graph = graph
        self.plan = graph.plan
        self.columns = columns
        self.n = n
        self.label = label
        self.keys = [_key(self.plan, i) for i in range(len(self.plan))]


class _Engine:
    """E-step over a fixed set of (circuit, data) groups with tie-keyed parameters."""

    def __init__(self, groups: Sequence[_Group], threads: int = 1):
        self.groups = list(groups)
        self.threads = max(1, int(threads))

    @classmethod
    def for_rspn(cls, spec: RspnSpec, dataset: SequenceDataset, threads: int = 1) -> "_Engine":
        if len(dataset) == 0:
            raise EmptyDataset("dataset is empty")
        for var, card in dataset.schema.items():
            if var not in spec.variables:
                raise SchemaViolation(f"dataset variable {var!r} is not modelled")
            if card > spec.variables[var]:
                raise SchemaViolation(f"dataset variable {var!r} has {card} values; the model has {spec.variables[var]}")
        groups = []
        for length, idx in dataset.by_length().items():
            groups.append(_Group(unroll(spec, length), dataset.columns(idx, length), len(idx), length))
        return cls(groups, threads)

    @classmethod
    def for_circuit(cls, graph: CircuitGraph, rows, threads: int = 1) -> "_Engine":
        if len(rows) == 0:
            raise EmptyDataset("dataset is empty")
        return cls([_Group(graph, evidence_columns(graph, rows), len(rows), 0)], threads)

    def e_step(self, sums, leaves, keep_leaf_data=False, keep_pass_down=False) -> EmState:
        run = lambda g: self._group_pass(g, sums, leaves, keep_leaf_data, keep_pass_down)
        if self.threads > 1 and len(self.groups) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                parts = list(pool.map(run, self.groups))
        else:
            parts = [run(g) for g in self.groups]
        state = EmState(0.0, 0, leaf_data={} if keep_leaf_data else None,
                        pass_down={} if keep_pass_down else None)
        for g, (ll, sc, lc, ld, pd) in zip(self.groups, parts):
            state.log_likelihood += ll
            state.n += g.n
            for k, v in sc.items():
                state.sum_counts[k] = state.sum_counts[k] + v if k in state.sum_counts else v
            for k, v in lc.items():
                state.leaf_counts[k] = state.leaf_counts[k] + v if k in state.leaf_counts else v
            if keep_leaf_data:
                for k, (rows, w) in ld.items():
                    if k in state.leaf_data:
                        r0, w0 = state.leaf_data[k]
                        rows, w = np.concatenate([r0, rows]), np.concatenate([w0, w])
                    state.leaf_data[k] = (rows, w)
            if keep_pass_down:
                state.pass_down[g.label] = pd
        return state

    @staticmethod
    def _group_pass(g: _Group, sums, leaves, keep_leaf_data, keep_pass_down):
        plan, keys = g.plan, g.keys
        weights = [sums[k] if kind == _SUM else None for k, kind in zip(keys, plan.kind)]
        probs = [leaves[k] if kind == _CAT else None for k, kind in zip(keys, plan.kind)]
        vals = plan.forward(g.columns, g.n, weights, probs)
        root = vals[plan.root]
        if np.isnan(vals).any():
            raise NumericalFailure("NaN encountered while evaluating the circuit")
        ll = float(root.sum())

        dl = np.zeros_like(vals)
        dl[plan.root] = 1.0
        sum_counts: Dict[str, np.ndarray] = {}
        leaf_counts: Dict[str, np.ndarray] = {}
        leaf_data: Dict[str, list] = {}
        pass_down = {} if keep_pass_down else None
        if keep_pass_down:
            pass_down[(None, plan.order[plan.root])] = np.ones(g.n)
        dead = ~np.isfinite(vals)
        for i in range(len(plan) - 1, -1, -1):
            kind = plan.kind[i]
            d = dl[i]
            if kind == _SUM:
                ch = plan.children[i]
                if len(ch) == 1:
                    pl = d[None, :]
                else:
                    with np.errstate(invalid="ignore", over="ignore"):
                        r = np.exp(vals[ch] + log_weights(weights[i])[:, None] - vals[i])
                    r[:, dead[i]] = 0.0
                    pl = r * d
                dl[ch] += pl
                c = pl.sum(axis=1)
                k = keys[i]
                sum_counts[k] = sum_counts[k] + c if k in sum_counts else c
            elif kind == _PROD:
                ch = plan.children[i]
                dl[ch] += d
                if keep_pass_down:
                    pl = np.broadcast_to(d, (len(ch), g.n))
            elif kind == _CAT:
                col = g.columns.get(plan.variable[i])
                p = np.asarray(probs[i], dtype=float)
                if col is None:
                    col = np.full(g.n, -1, dtype=np.intp)
                obs = col >= 0
                c = np.bincount(col[obs], weights=d[obs], minlength=len(p)) + d[~obs].sum() * p
                k = keys[i]
                leaf_counts[k] = leaf_counts[k] + c if k in leaf_counts else c
                if keep_leaf_data:
                    leaf_data.setdefault(k, []).append((col.copy(), d.copy()))
            if keep_pass_down and kind in (_SUM, _PROD):
                for j, c_pos in enumerate(plan.children[i]):
                    pass_down[(plan.order[i], plan.order[c_pos])] = np.array(pl[j])
        ld = {k: (np.concatenate([r for r, _ in v]), np.concatenate([w for _, w in v])) for k, v in leaf_data.items()}
        return ll, sum_counts, leaf_counts, ld, pass_down


# ---------------------------------------------------------------------------
# Parameters


def _params_from_nodes(items) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    sums, leaves = {}, {}
    for key, node in items:
        if node.kind == SUM:
            sums.setdefault(key, np.asarray(node.weights, dtype=float))
        elif node.kind == LEAF and isinstance(node.leaf, CategoricalLeaf):
            leaves.setdefault(key, np.asarray(node.leaf.probs, dtype=float))
    return sums, leaves


def _spec_params(spec: RspnSpec):
    return _params_from_nodes((n.tie, n) for f in spec.fragments.values() for n in f.nodes.values())


def _graph_params(graph: CircuitGraph):
    return _params_from_nodes((n.tie or f"#{i}", n) for i, n in graph.nodes.items())


def _tuples(params):
    return {k: tuple(float(x) for x in v) for k, v in params.items()}


def _with_graph_params(graph: CircuitGraph, sums, leaves) -> CircuitGraph:
    nodes = {}
    for i, node in graph.nodes.items():
        key = node.tie or f"#{i}"
        if node.kind == SUM and key in sums:
            node = Node(SUM, node.children, tuple(float(w) for w in sums[key]), tie=node.tie)
        elif node.kind == LEAF and isinstance(node.leaf, CategoricalLeaf) and key in leaves:
            node = Node(LEAF, leaf=CategoricalLeaf(node.leaf.variable, tuple(float(p) for p in leaves[key])),
                        tie=node.tie)
        nodes[i] = node
    return CircuitGraph(nodes, graph.root, graph.variables)


def _m_step(sums, leaves, state: EmState, config: EmConfig):
    alpha = config.weight_smoothing
    new_sums = {}
    for k, w in sums.items():
        c = state.sum_counts.get(k)
        if c is None or len(w) == 1:
            new_sums[k] = w
            continue
        tot = c + alpha
        s = tot.sum()
        new_sums[k] = tot / s if s > 0 else w
    new_leaves = {}
    for k, p in leaves.items():
        c = state.leaf_counts.get(k)
        if c is None:
            new_leaves[k] = p
            continue
        tot = c + alpha
        s = tot.sum()
        if s <= 0:
            new_leaves[k] = p
            continue
        q = tot / s
        if config.leaf_prob_floor > 0:
            q = np.maximum(q, config.leaf_prob_floor)
            q = q / q.sum()
        new_leaves[k] = q
    return new_sums, new_leaves


def randomize(spec: RspnSpec, seed: int) -> RspnSpec:
    """Dirichlet(1) draws for every sum tie with several children and every leaf tie."""
    rng = np.random.default_rng(seed)
    sums, leaves = _spec_params(spec)
    new_sums = {k: (rng.dirichlet(np.ones(len(w))) if len(w) > 1 else w) for k, w in sorted(sums.items())}
    new_leaves = {k: rng.dirichlet(np.ones(len(p))) for k, p in sorted(leaves.items())}
    return spec.with_parameters(_tuples(new_sums), _tuples(new_leaves))


# ---------------------------------------------------------------------------
# Public operations


def e_step(spec: RspnSpec, dataset: SequenceDataset, keep_leaf_data=False, keep_pass_down=False,
           threads: int = 1) -> EmState:
    engine = _Engine.for_rspn(spec, dataset, threads)
    sums, leaves = _spec_params(spec)
    return engine.e_step(sums, leaves, keep_leaf_data, keep_pass_down)


def em_step(spec: RspnSpec, dataset: SequenceDataset, config: EmConfig = EmConfig()) -> Tuple[RspnSpec, float]:
    """One E+M cycle; returns the updated spec and the log-likelihood before the update."""
    engine = _Engine.for_rspn(spec, dataset, config.threads)
    sums, leaves = _spec_params(spec)
    state = engine.e_step(sums, leaves)
    new_sums, new_leaves = _m_step(sums, leaves, state, config)
    return spec.with_parameters(_tuples(new_sums), _tuples(new_leaves)), state.log_likelihood


def em_step_circuit(graph: CircuitGraph, rows, config: EmConfig = EmConfig()) -> Tuple[CircuitGraph, float]:
    """One E+M cycle on a plain circuit; untied nodes are their own parameter group."""
    engine = _Engine.for_circuit(graph, rows, config.threads)
    sums, leaves = _graph_params(graph)
    state = engine.e_step(sums, leaves)
    new_sums, new_leaves = _m_step(sums, leaves, state, config)
    return _with_graph_params(graph, new_sums, new_leaves), state.log_likelihood


def _replace_leaf(frag: CircuitFragment, tie: str, weights, children_probs) -> CircuitFragment:
    nodes = dict(frag.nodes)
    next_id = max(nodes) + 1
    for nid, node in frag.nodes.items():
        if node.kind != LEAF or node.tie != tie:
            continue
        kids = []
        for j, probs in enumerate(children_probs):
            nodes[next_id] = Node(LEAF, leaf=CategoricalLeaf(node.leaf.variable, tuple(probs)), tie=f"{tie}|mix{j}")
            kids.append(next_id)
            next_id += 1
        nodes[nid] = Node(SUM, tuple(kids), tuple(weights), tie=f"{tie}|mix")
    return CircuitFragment(nodes, frag.roots)


def _ll_after_step(spec: RspnSpec, dataset: SequenceDataset, config: EmConfig) -> float:
    engine = _Engine.for_rspn(spec, dataset, config.threads)
    sums, leaves = _spec_params(spec)
    state = engine.e_step(sums, leaves)
    sums, leaves = _m_step(sums, leaves, state, config)
    return engine.e_step(sums, leaves).log_likelihood


def expand_leaf(spec: RspnSpec, leaf: str, state: EmState, k: int, seed: int, *,
                dataset: Optional[SequenceDataset] = None, config: EmConfig = EmConfig()) -> RspnSpec:
    """Replace every categorical leaf of tie ``leaf`` with a mixture of ``k`` leaves.

    The leaf's weighted data (from ``state.leaf_data``) is clustered with
    weighted k-means on one-hot rows; the mixture weights are the cluster
    masses and each component is its cluster's weighted empirical
    distribution. With ``dataset`` given, the expansion is kept only if one
    further EM step yields a higher log-likelihood than the same step on the
    unexpanded model; otherwise ``spec`` is returned unchanged.
    """
    from sklearn.cluster import KMeans

    if k < 2:
        raise InputError("expansion needs k >= 2")
    leaves = spec.leaf_parameters()
    if leaf not in leaves:
        raise LeafNotFound(f"no categorical leaf with tie {leaf!r}")
    if state.leaf_data is None or leaf not in state.leaf_data:
        raise LeafNotFound(f"state holds no data for leaf {leaf!r}; run e_step with keep_leaf_data=True")
    rows, w = state.leaf_data[leaf]
    keep = (rows >= 0) & (w > 0)
    if keep.sum() < k:
        raise InsufficientData(f"{int(keep.sum())} weighted rows for k={k}")
    card = len(leaves[leaf])
    mass = np.bincount(rows[keep], weights=w[keep], minlength=card)
    values = np.flatnonzero(mass > 0)
    if len(values) < k:
        return spec
    km = KMeans(n_clusters=k, init="k-means++", n_init=10, random_state=seed)
    labels = km.fit_predict(np.eye(card)[values], sample_weight=mass[values])
    if len(set(labels.tolist())) < k:
        return spec

    alpha = config.weight_smoothing
    weights, comps = [], []
    for j in range(k):
        m = np.zeros(card)
        m[values[labels == j]] = mass[values[labels == j]]
        weights.append(m.sum())
        q = (m + alpha) / (m.sum() + alpha * card)
        if config.leaf_prob_floor > 0:
            q = np.maximum(q, config.leaf_prob_floor)
            q = q / q.sum()
        comps.append(q)
    weights = np.asarray(weights) / np.sum(weights)
    expanded = spec.replace(**{name: _replace_leaf(f, leaf, weights, comps) for name, f in spec.fragments.items()})
    if dataset is None:
        return expanded
    base = _ll_after_step(spec, dataset, config)
    grown = _ll_after_step(expanded, dataset, config)
    if grown > base + 1e-9 * abs(base):
        log.info("expanded leaf %s: %.6f -> %.6f", leaf, base, grown)
        return expanded
    log.info("rolled back expansion of leaf %s (%.6f vs %.6f)", leaf, grown, base)
    return spec


def train(spec: RspnSpec, dataset: SequenceDataset, config: EmConfig = EmConfig(),
          callback=None) -> Tuple[RspnSpec, TrainReport]:
    """Iterate EM until the relative improvement drops below ``rel_ll_tol``.

    With clustering configured, leaf expansion is attempted once at the first
    convergence; if any leaf is expanded, training resumes within the same
    iteration budget.
    """
    engine = _Engine.for_rspn(spec, dataset, config.threads)
    sums, leaves = _spec_params(spec)
    state = engine.e_step(sums, leaves)
    report = TrainReport(state.log_likelihood)
    expansion_pending = config.clustering is not None
    for it in range(1, config.max_iters + 1):
        t0 = time.perf_counter()
        sums, leaves = _m_step(sums, leaves, state, config)
        new = engine.e_step(sums, leaves)
        delta = new.log_likelihood - state.log_likelihood
        rec = {"iter": it, "log_likelihood": new.log_likelihood, "delta": delta,
               "wall_ms": round((time.perf_counter() - t0) * 1000, 3)}
        report.records.append(rec)
        if callback is not None:
            callback(rec)
        log.debug("iter %d ll %.6f delta %.3g", it, new.log_likelihood, delta)
        converged = delta < config.rel_ll_tol * abs(state.log_likelihood)
        state = new
        if not converged:
            continue
        if expansion_pending:
            expansion_pending = False
            current = spec.with_parameters(_tuples(sums), _tuples(leaves))
            grown = _expand_all(current, dataset, config, report)
            if grown is not current:
                spec = grown
                engine = _Engine.for_rspn(spec, dataset, config.threads)
                sums, leaves = _spec_params(spec)
                state = engine.e_step(sums, leaves)
                continue
        report.stop_reason = "tolerance"
        break
    return spec.with_parameters(_tuples(sums), _tuples(leaves)), report


def _expand_all(spec: RspnSpec, dataset: SequenceDataset, config: EmConfig, report: TrainReport) -> RspnSpec:
    state = e_step(spec, dataset, keep_leaf_data=True, threads=config.threads)
    out = spec
    for tie in sorted(spec.leaf_parameters()):
        try:
            grown = expand_leaf(out, tie, state, config.clustering.k, config.clustering.seed,
                                dataset=dataset, config=config)
        except InsufficientData:
            continue
        if grown is not out:
            report.expansions.append(tie)
            out = grown
            state = e_step(out, dataset, keep_leaf_data=True, threads=config.threads)
    return out


def train_restarts(spec: RspnSpec, dataset: SequenceDataset, config: EmConfig = EmConfig(),
                   restarts: int = 1, seed: int = 0):
    """Train from ``restarts`` random initializations; keep the best training fit.

    Returns ``(spec, report, init_seed)`` of the winning run.
    """
    best = None
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=max(1, restarts))
    for s in seeds.tolist():
        model, report = train(randomize(spec, s), dataset, config)
        if best is None or report.final_log_likelihood > best[1].final_log_likelihood:
            best = (model, report, s)
    return best
