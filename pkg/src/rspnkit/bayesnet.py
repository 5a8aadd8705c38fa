"""Discrete Bayesian networks, IOHMMs, and their compilation into circuits.

The compiler walks the network in topological order while tracking the set of
variables currently conditioned on. Each variable contributes a layer of sum
nodes (one per assignment of the conditioning set); variables with children
also contribute a layer of product nodes carrying indicators, and childless
variables end in categorical leaves. A conditioning variable is dropped as soon
as all of its children have been placed, which is what lets converging edges
forget it.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .circuit import (
    LEAF,
    PLACEHOLDER,
    PRODUCT,
    SUM,
    CategoricalLeaf,
    CircuitGraph,
    IndicatorLeaf,
    Node,
)
from .errors import CyclicNetwork, InvalidNetwork, NonDiscreteVariable
from .rspn import CircuitFragment, RspnSpec, slice_name

NORM_TOL = 1e-9


@dataclass(frozen=True)
class BnVariable:
    name: str
    cardinality: int
    slice: Optional[int] = None


@dataclass(frozen=True, eq=False)
class Cpt:
    """P(variable | parents) as an array of shape ``parent_cards + (card,)``.

    CPTs that share a ``tie`` label are one parameter table (e.g. the
    transition table of every slice of an unrolled model).
    """

    variable: str
    parents: Tuple[str, ...]
    table: np.ndarray
    tie: Optional[str] = None

    @property
    def label(self) -> str:
        return self.tie or self.variable


class BayesNet:
    def __init__(self, variables: Sequence[BnVariable], cpts: Mapping[str, Cpt]):
        self.variables = list(variables)
        self.cpts = dict(cpts)
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise InvalidNetwork("variable names must be unique")
        self.cardinality = {}
        for v in self.variables:
            if isinstance(v.cardinality, bool) or not isinstance(v.cardinality, (int, np.integer)):
                raise NonDiscreteVariable(f"variable {v.name!r} has no integer cardinality")
            if v.cardinality < 1:
                raise InvalidNetwork(f"variable {v.name!r} has cardinality {v.cardinality}")
            self.cardinality[v.name] = int(v.cardinality)
        if set(self.cpts) != set(names):
            raise InvalidNetwork("exactly one CPT per variable is required")
        for name, cpt in self.cpts.items():
            for p in cpt.parents:
                if p not in self.cardinality:
                    raise InvalidNetwork(f"CPT of {name!r} has unknown parent {p!r}")
            shape = tuple(self.cardinality[p] for p in cpt.parents) + (self.cardinality[name],)
            table = np.asarray(cpt.table, dtype=float)
            if table.shape != shape:
                raise InvalidNetwork(f"CPT of {name!r} has shape {table.shape}, expected {shape}")
            if np.any(table < 0) or np.any(np.abs(table.sum(axis=-1) - 1.0) > NORM_TOL):
                raise InvalidNetwork(f"CPT of {name!r} is not row-normalized")

    @property
    def names(self) -> List[str]:
        return [v.name for v in self.variables]

    def children(self) -> Dict[str, List[str]]:
        out = {n: [] for n in self.names}
        for n in self.names:
            for p in self.cpts[n].parents:
                out[p].append(n)
        return out

    def topological_order(self) -> List[str]:
        """Kahn's algorithm, preferring declaration order among ready variables."""
        rank = {n: i for i, n in enumerate(self.names)}
        indeg = {n: len(set(self.cpts[n].parents)) for n in self.names}
        kids = self.children()
        ready = sorted((n for n in self.names if indeg[n] == 0), key=rank.get)
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for k in sorted(set(kids[n]), key=rank.get):
                indeg[k] -= 1
                if indeg[k] == 0:
                    ready.append(k)
            ready.sort(key=rank.get)
        if len(order) != len(self.names):
            stuck = sorted(set(self.names) - set(order), key=rank.get)
            raise CyclicNetwork(f"network has a directed cycle among {stuck}")
        return order

    def joint(self, assignment: Mapping[str, int]) -> float:
        """Product of CPT entries for a full assignment."""
        p = 1.0
        for n in self.names:
            cpt = self.cpts[n]
            idx = tuple(assignment[q] for q in cpt.parents) + (assignment[n],)
            p *= float(cpt.table[idx])
        return p

    def sample(self, count: int, seed: int) -> List[Dict[str, int]]:
        rng = np.random.default_rng(seed)
        order = self.topological_order()
        cols: Dict[str, np.ndarray] = {}
        for n in order:
            cpt = self.cpts[n]
            rows = np.asarray(cpt.table, dtype=float)[tuple(cols[q] for q in cpt.parents)]
            rows = np.broadcast_to(rows, (count, self.cardinality[n]))
            cols[n] = (rng.random(count)[:, None] > np.cumsum(rows, axis=1)[:, :-1]).sum(axis=1)
        return [{n: int(cols[n][i]) for n in self.names} for i in range(count)]

    def to_json(self) -> dict:
        cpts = []
        for n in self.names:
            cpt = self.cpts[n]
            cards = [self.cardinality[p] for p in cpt.parents]
            table = [[list(pa), [float(x) for x in cpt.table[pa]]] for pa in itertools.product(*map(range, cards))]
            entry = {"variable": n, "parents": list(cpt.parents), "table": table}
            if cpt.tie:
                entry["tie"] = cpt.tie
            cpts.append(entry)
        variables = []
        for v in self.variables:
            entry = {"name": v.name, "cardinality": v.cardinality}
            if v.slice is not None:
                entry["slice"] = v.slice
            variables.append(entry)
        return {"variables": variables, "cpts": cpts}

    @classmethod
    def from_json(cls, doc: dict) -> "BayesNet":
        variables = []
        for v in doc["variables"]:
            if v.get("type", "discrete") not in ("discrete", "categorical") or "cardinality" not in v:
                raise NonDiscreteVariable(f"variable {v.get('name')!r} is not discrete")
            variables.append(BnVariable(v["name"], v["cardinality"], v.get("slice")))
        card = {v.name: v.cardinality for v in variables}
        cpts = {}
        for entry in doc["cpts"]:
            name, parents = entry["variable"], tuple(entry.get("parents", ()))
            if name not in card or any(p not in card for p in parents):
                raise InvalidNetwork(f"CPT of {name!r} refers to an unknown variable")
            shape = tuple(card[p] for p in parents) + (card[name],)
            table = np.full(shape, np.nan)
            for pa, probs in entry["table"]:
                table[tuple(pa)] = probs
            if np.isnan(table).any():
                raise InvalidNetwork(f"CPT of {name!r} does not cover every parent assignment")
            cpts[name] = Cpt(name, parents, table, entry.get("tie"))
        return cls(variables, cpts)

    @classmethod
    def load(cls, path) -> "BayesNet":
        with open(path) as f:
            return cls.from_json(json.load(f))


# ---------------------------------------------------------------------------
# Compilation


def _fmt(assign: Mapping[str, int]) -> str:
    return ",".join(f"{k}={v}" for k, v in assign.items())


class _Builder:
    def __init__(self):
        self.kind: Dict[int, str] = {}
        self.children: Dict[int, list] = {}
        self.weights: Dict[int, list] = {}
        self.leaf: Dict[int, object] = {}
        self.tie: Dict[int, str] = {}
        self.meta: Dict[int, tuple] = {}

    def new(self, kind, tie="", meta=None, leaf=None) -> int:
        nid = len(self.kind)
        self.kind[nid] = kind
        self.children[nid] = []
        self.weights[nid] = []
        self.leaf[nid] = leaf
        self.tie[nid] = tie
        self.meta[nid] = meta
        return nid


def _compile(net: BayesNet, leaf: str = "categorical"):
    """Circuit nodes plus per-node (variable, assignment) metadata."""
    if leaf not in ("categorical", "indicator"):
        raise ValueError(f"unknown leaf mode {leaf!r}")
    order = net.topological_order()
    card = net.cardinality
    kids = net.children()
    b = _Builder()
    indicators: Dict[Tuple[str, int], int] = {}

    def ind(var, v):
        key = (var, v)
        if key not in indicators:
            indicators[key] = b.new(LEAF, f"ind:{var}={v}", (var, {var: v}), IndicatorLeaf(var, v))
        return indicators[key]

    def assignments(vs):
        return itertools.product(*(range(card[u]) for u in vs))

    def prune(c, d, var):
        for lst in d.values():
            while var in lst:
                lst.remove(var)
        for u in [u for u in c if u in d and not d[u]]:
            c.remove(u)
            del d[u]

    root = b.new(PRODUCT, "prod:root", (None, {}))
    p_layer: Dict[tuple, int] = {(): root}
    p_vars: Tuple[str, ...] = ()
    c: List[str] = []
    d: Dict[str, List[str]] = {}

    for var in order:
        cpt = net.cpts[var]
        table = np.asarray(cpt.table, dtype=float)
        s_layer = {}
        for xs in assignments(c):
            s_layer[xs] = b.new(SUM, meta=(var, dict(zip(c, xs))))
        pos = [p_vars.index(u) for u in c]
        for xp, pid in p_layer.items():
            b.children[pid].append(s_layer[tuple(xp[i] for i in pos)])
        c_old = list(c)

        if kids[var]:
            c.append(var)
            prune(c, d, var)
            d[var] = list(kids[var])
            new_p = {}
            for xp in assignments(c):
                a = dict(zip(c, xp))
                pid = b.new(PRODUCT, f"prod:{var}:{_fmt(a)}", (var, a))
                b.children[pid].append(ind(var, a[var]))
                new_p[xp] = pid
            for xs, sid in s_layer.items():
                a = dict(zip(c_old, xs))
                pa = tuple(a[u] for u in cpt.parents)
                row = table[pa]
                for v in range(card[var]):
                    target = tuple(v if u == var else a[u] for u in c)
                    b.children[sid].append(new_p[target])
                    b.weights[sid].append(float(row[v]))
                b.tie[sid] = f"sum:{cpt.label}:{','.join(map(str, pa))}"
            p_layer, p_vars = new_p, tuple(c)
        else:
            for xs, sid in s_layer.items():
                a = dict(zip(c_old, xs))
                pa = tuple(a[u] for u in cpt.parents)
                row = [float(x) for x in table[pa]]
                key = f"{cpt.label}:{','.join(map(str, pa))}"
                if leaf == "categorical":
                    lid = b.new(LEAF, f"cat:{key}", (var, a), CategoricalLeaf(var, tuple(row)))
                    b.children[sid].append(lid)
                    b.weights[sid].append(1.0)
                    b.tie[sid] = f"sum1:{key}"
                else:
                    for v in range(card[var]):
                        b.children[sid].append(ind(var, v))
                        b.weights[sid].append(row[v])
                    b.tie[sid] = f"sum:{key}"
            prune(c, d, var)

    if len(b.children[root]) == 1:
        root_id = b.children[root][0]
        del b.kind[root]
    else:
        root_id = root
    ids = {old: new for new, old in enumerate(sorted(b.kind))}
    nodes = {}
    meta = {}
    for old in sorted(b.kind):
        kind = b.kind[old]
        if kind == LEAF:
            node = Node(LEAF, leaf=b.leaf[old], tie=b.tie[old])
        else:
            node = Node(kind, tuple(ids[ch] for ch in b.children[old]), tuple(b.weights[old]), tie=b.tie[old])
        nodes[ids[old]] = node
        meta[ids[old]] = b.meta[old]
    graph = CircuitGraph(nodes, ids[root_id], dict(net.cardinality))
    return graph, meta


def compile_network(net: BayesNet, leaf: str = "categorical") -> CircuitGraph:
    """Compile ``net`` into a circuit whose value on any assignment is the BN probability.

    ``leaf`` selects how childless variables are represented: ``"categorical"``
    leaves (one per conditioning assignment), or ``"indicator"`` sums that
    weight one indicator per value.
    """
    graph, _ = _compile(net, leaf)
    return graph


# ---------------------------------------------------------------------------
# IOHMMs


@dataclass(frozen=True, eq=False)
class IohmmSpec:
    """Discrete IOHMM with inputs u, latent states z and observations x.

    Table layouts (last axis is the distributed variable):
    ``input_prior[u]``, ``initial[u, z]``, ``transition[z_prev, u, z]``,
    ``emission[z, u, x]``.
    """

    n_inputs: int
    n_states: int
    n_obs: int
    initial: np.ndarray
    transition: np.ndarray
    emission: np.ndarray
    input_prior: np.ndarray

    def __post_init__(self):
        nu, nz, nx = self.n_inputs, self.n_states, self.n_obs
        shapes = {
            "input_prior": (nu,),
            "initial": (nu, nz),
            "transition": (nz, nu, nz),
            "emission": (nz, nu, nx),
        }
        for name, shape in shapes.items():
            table = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, table)
            if table.shape != shape:
                raise InvalidNetwork(f"{name} has shape {table.shape}, expected {shape}")
            if np.any(table < 0) or np.any(np.abs(table.sum(axis=-1) - 1.0) > NORM_TOL):
                raise InvalidNetwork(f"{name} is not row-normalized")

    @classmethod
    def random(cls, n_inputs: int, n_states: int, n_obs: int, rng) -> "IohmmSpec":
        rng = np.random.default_rng(rng)

        def dirichlet(*shape):
            t = rng.dirichlet(np.ones(shape[-1]), size=shape[:-1])
            return t.reshape(shape)

        return cls(n_inputs, n_states, n_obs,
                   initial=dirichlet(n_inputs, n_states),
                   transition=dirichlet(n_states, n_inputs, n_states),
                   emission=dirichlet(n_states, n_inputs, n_obs),
                   input_prior=dirichlet(n_inputs))

    @classmethod
    def uniform(cls, n_inputs: int, n_states: int, n_obs: int) -> "IohmmSpec":
        return cls(n_inputs, n_states, n_obs,
                   initial=np.full((n_inputs, n_states), 1.0 / n_states),
                   transition=np.full((n_states, n_inputs, n_states), 1.0 / n_states),
                   emission=np.full((n_states, n_inputs, n_obs), 1.0 / n_obs),
                   input_prior=np.full(n_inputs, 1.0 / n_inputs))

    def to_json(self) -> dict:
        return {
            "n_inputs": self.n_inputs,
            "n_states": self.n_states,
            "n_obs": self.n_obs,
            "initial": self.initial.tolist(),
            "transition": self.transition.tolist(),
            "emission": self.emission.tolist(),
            "input_prior": self.input_prior.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "IohmmSpec":
        return cls(int(doc["n_inputs"]), int(doc["n_states"]), int(doc["n_obs"]),
                   initial=doc["initial"], transition=doc["transition"],
                   emission=doc["emission"], input_prior=doc["input_prior"])

    @classmethod
    def load(cls, path) -> "IohmmSpec":
        with open(path) as f:
            return cls.from_json(json.load(f))


INPUT, STATE, OBS = "u", "z", "x"


def unroll_iohmm(spec: IohmmSpec, length: int) -> BayesNet:
    """Unrolled network over ``length`` slices, variables ordered u_t, z_t, x_t per slice."""
    if length < 1:
        raise ValueError("length must be at least 1")
    variables, cpts = [], {}
    for t in range(1, length + 1):
        u, z, x = (slice_name(b, t) for b in (INPUT, STATE, OBS))
        variables += [BnVariable(u, spec.n_inputs, t), BnVariable(z, spec.n_states, t), BnVariable(x, spec.n_obs, t)]
        cpts[u] = Cpt(u, (), spec.input_prior, "input_prior")
        if t == 1:
            cpts[z] = Cpt(z, (u,), spec.initial, "initial")
        else:
            cpts[z] = Cpt(z, (slice_name(STATE, t - 1), u), spec.transition, "transition")
        cpts[x] = Cpt(x, (z, u), spec.emission, "emission")
    return BayesNet(variables, cpts)


def compile_rspn(spec: IohmmSpec) -> RspnSpec:
    """Compile a 3-slice unrolling and cut it into top, template and bottom fragments.

    A node belongs to the earliest slice its scope touches. Edges into the next
    slice become placeholder slots, matched across fragments by a
    slice-relative structural key.
    """
    net = unroll_iohmm(spec, 3)
    graph, meta = _compile(net, "categorical")
    slice_of = {v.name: v.slice for v in net.variables}
    base_of = {v.name: v.name.rpartition("_")[0] for v in net.variables}
    scope = graph.scope
    node_slice = {nid: min(slice_of[v] for v in scope[nid]) for nid in graph.nodes}

    def rel_key(nid) -> str:
        node = graph.nodes[nid]
        var, assign = meta[nid]
        t = node_slice[nid]
        if isinstance(node.leaf, IndicatorLeaf):
            return f"ind:{base_of[var]}={node.leaf.value}"
        parts = ",".join(sorted(f"{base_of[u]}{slice_of[u] - t:+d}={x}" for u, x in assign.items()))
        tag = "cat" if node.kind == LEAF else node.kind
        return f"{tag}:{base_of[var]}{slice_of[var] - t:+d}[{parts}]"

    targets = {}
    for t in (1, 2):
        found = set()
        for nid, node in graph.nodes.items():
            if node_slice[nid] != t:
                continue
            for ch in node.children:
                if node_slice[ch] == t + 1:
                    found.add(ch)
                elif node_slice[ch] != t:
                    raise ValueError("edge skips a slice; model is not first-order")
        targets[t] = sorted(found, key=rel_key)
    interface = tuple(rel_key(n) for n in targets[1])
    if interface != tuple(rel_key(n) for n in targets[2]):
        raise ValueError("slice interfaces differ; template is not repeatable")

    def fragment(t: int, role: str) -> CircuitFragment:
        members = sorted(n for n in graph.nodes if node_slice[n] == t)
        local = {nid: i for i, nid in enumerate(members)}
        out_slot = {nid: k for k, nid in enumerate(targets.get(t, ()))}
        slot_ids = {k: len(members) + k for k in out_slot.values()}
        nodes = {}
        for nid in members:
            node = graph.nodes[nid]
            if node.kind == LEAF:
                leaf = node.leaf
                base = base_of[leaf.variable]
                if isinstance(leaf, IndicatorLeaf):
                    nodes[local[nid]] = Node(LEAF, leaf=IndicatorLeaf(base, leaf.value), tie=f"ind:{base}={leaf.value}")
                else:
                    nodes[local[nid]] = Node(LEAF, leaf=CategoricalLeaf(base, leaf.probs), tie=node.tie)
                continue
            children = tuple(slot_ids[out_slot[ch]] if ch in out_slot else local[ch] for ch in node.children)
            tie = node.tie if node.kind == SUM else f"{role}:{rel_key(nid)}"
            nodes[local[nid]] = Node(node.kind, children, node.weights, tie=tie)
        for k, sid in slot_ids.items():
            nodes[sid] = Node(PLACEHOLDER, tie=f"{role}:slot{k}", slot=k)
        if t == 1:
            roots = (local[graph.root],)
        else:
            roots = tuple(local[n] for n in targets[t - 1])
        return CircuitFragment(nodes, roots)

    variables = {INPUT: spec.n_inputs, STATE: spec.n_states, OBS: spec.n_obs}
    return RspnSpec(variables, fragment(1, "top"), fragment(2, "template"), fragment(3, "bottom"),
                    interface, latent=(STATE,))
