"""Sum-product circuits: representation, validation and exact log-space inference.

A circuit is a rooted DAG of sum, product and leaf nodes. Leaves are either
indicators (``X == v``) or categorical distributions over one discrete
variable. Evidence is a mapping from variable name to an observed domain
index; ``None`` (or absence from the mapping) marginalizes the variable.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    InvalidEvidence,
    InvalidGraph,
    OverlappingEvidence,
    UnknownVariable,
    ZeroEvidence,
)

#: Lower bound applied to sum weights inside log-sum-exp.
WEIGHT_FLOOR = 1e-12
#: Tolerance for sum-weight and leaf-probability normalization.
NORMALIZATION_TOL = 1e-9

SUM = "sum"
PRODUCT = "product"
LEAF = "leaf"
PLACEHOLDER = "placeholder"

MARGINALIZED = None

Evidence = Mapping[str, Optional[int]]


@dataclass(frozen=True)
class IndicatorLeaf:
    variable: str
    value: int


@dataclass(frozen=True)
class CategoricalLeaf:
    variable: str
    probs: Tuple[float, ...]


LeafDist = Union[IndicatorLeaf, CategoricalLeaf]


@dataclass(frozen=True)
class Node:
    """One circuit node.

    ``tie`` names the parameter-sharing group; ``slot`` is only used by
    placeholder nodes inside RSPN fragments.
    """

    kind: str
    children: Tuple[int, ...] = ()
    weights: Tuple[float, ...] = ()
    leaf: Optional[LeafDist] = None
    tie: str = ""
    slot: Optional[int] = None


def sum_node(children, weights, tie: str = "") -> Node:
    return Node(SUM, tuple(int(c) for c in children), tuple(float(w) for w in weights), tie=tie)


def product_node(children, tie: str = "") -> Node:
    return Node(PRODUCT, tuple(int(c) for c in children), tie=tie)


def indicator(variable: str, value: int, tie: str = "") -> Node:
    return Node(LEAF, leaf=IndicatorLeaf(variable, int(value)), tie=tie)


def categorical(variable: str, probs, tie: str = "") -> Node:
    return Node(LEAF, leaf=CategoricalLeaf(variable, tuple(float(p) for p in probs)), tie=tie)


def placeholder(slot: int, tie: str = "") -> Node:
    return Node(PLACEHOLDER, tie=tie, slot=int(slot))


@dataclass
class ValidationReport:
    errors: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def __bool__(self):
        return self.ok


@dataclass(frozen=True, eq=False)
class CircuitGraph:
    """Immutable circuit. ``variables`` maps variable name to cardinality."""

    nodes: Mapping[int, Node]
    root: int
    variables: Mapping[str, int]

    @cached_property
    def report(self) -> ValidationReport:
        return validate(self)

    @cached_property
    def scope(self) -> Dict[int, frozenset]:
        return _scopes(self.nodes)

    @cached_property
    def plan(self) -> "Plan":
        self.check()
        return Plan(self)

    def check(self):
        if not self.report.ok:
            raise InvalidGraph(self.report)

    def __len__(self):
        return len(self.nodes)

    def to_json(self) -> dict:
        return {
            "nodes": [node_to_json(i, self.nodes[i]) for i in sorted(self.nodes)],
            "root": self.root,
            "variables": [{"name": k, "cardinality": v} for k, v in self.variables.items()],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CircuitGraph":
        nodes = dict(node_from_json(d) for d in doc["nodes"])
        variables = {v["name"]: int(v["cardinality"]) for v in doc["variables"]}
        return cls(nodes, int(doc["root"]), variables)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)

    @classmethod
    def load(cls, path) -> "CircuitGraph":
        with open(path) as f:
            return cls.from_json(json.load(f))


def node_to_json(node_id: int, node: Node) -> dict:
    out = {"id": node_id, "tie": node.tie, "kind": node.kind, "children": list(node.children)}
    if node.kind == SUM:
        out["weights"] = list(node.weights)
    elif node.kind == LEAF:
        if isinstance(node.leaf, IndicatorLeaf):
            out["leaf"] = {"type": "indicator", "variable": node.leaf.variable, "value": node.leaf.value}
        else:
            out["leaf"] = {"type": "categorical", "variable": node.leaf.variable, "probs": list(node.leaf.probs)}
    elif node.kind == PLACEHOLDER:
        out["slot"] = node.slot
    return out


def node_from_json(doc: dict) -> Tuple[int, Node]:
    kind = doc["kind"]
    tie = doc.get("tie", "")
    if kind == SUM:
        node = sum_node(doc["children"], doc["weights"], tie)
    elif kind == PRODUCT:
        node = product_node(doc["children"], tie)
    elif kind == LEAF:
        leaf = doc["leaf"]
        if leaf["type"] == "indicator":
            node = indicator(leaf["variable"], leaf["value"], tie)
        elif leaf["type"] == "categorical":
            node = categorical(leaf["variable"], leaf["probs"], tie)
        else:
            raise ValueError(f"unknown leaf type {leaf['type']!r}")
    elif kind == PLACEHOLDER:
        node = placeholder(doc["slot"], tie)
    else:
        raise ValueError(f"unknown node kind {kind!r}")
    return int(doc["id"]), node


# ---------------------------------------------------------------------------
# Validation


def _scopes(nodes: Mapping[int, Node]) -> Dict[int, frozenset]:
    """Scope of every node; assumes an acyclic graph with resolvable children."""
    scope: Dict[int, frozenset] = {}
    for start in nodes:
        if start in scope:
            continue
        stack = [(start, False)]
        while stack:
            nid, expanded = stack.pop()
            if nid in scope:
                continue
            node = nodes[nid]
            if node.kind == LEAF:
                scope[nid] = frozenset([node.leaf.variable])
            elif node.kind == PLACEHOLDER:
                scope[nid] = frozenset()
            elif expanded:
                scope[nid] = frozenset().union(*(scope[c] for c in node.children))
            else:
                stack.append((nid, True))
                stack.extend((c, False) for c in node.children if c not in scope)
    return scope


def _find_cycle(nodes: Mapping[int, Node]) -> Optional[int]:
    state: Dict[int, int] = {}  # 1 = on stack, 2 = done
    for start in nodes:
        if start in state:
            continue
        stack = [(start, iter(nodes[start].children))]
        state[start] = 1
        while stack:
            nid, it = stack[-1]
            for c in it:
                s = state.get(c)
                if s == 1:
                    return c
                if s is None:
                    state[c] = 1
                    stack.append((c, iter(nodes[c].children)))
                    break
            else:
                state[nid] = 2
                stack.pop()
    return None


def validate(graph: CircuitGraph) -> ValidationReport:
    """Collect every structural violation of ``graph``.

    Checks node references, acyclicity, reachability, sum normalization,
    leaf domains, decomposability of products, completeness of sums, and
    consistency of tied parameters.
    """
    errors: List[str] = []
    nodes = graph.nodes
    if graph.root not in nodes:
        return ValidationReport([f"root {graph.root} is not a node"])

    refs_ok = True
    for nid, node in nodes.items():
        if node.kind not in (SUM, PRODUCT, LEAF):
            errors.append(f"node {nid}: kind {node.kind!r} not allowed in a circuit")
            refs_ok = False
            continue
        for c in node.children:
            if c not in nodes:
                errors.append(f"node {nid}: child {c} does not exist")
                refs_ok = False
        if len(set(node.children)) != len(node.children):
            errors.append(f"node {nid}: duplicate children")
        if node.kind in (SUM, PRODUCT) and not node.children:
            errors.append(f"node {nid}: {node.kind} without children")
        if node.kind == SUM:
            w = np.asarray(node.weights, dtype=float)
            if len(w) != len(node.children):
                errors.append(f"node {nid}: {len(w)} weights for {len(node.children)} children")
            elif not np.all(np.isfinite(w)) or np.any(w < 0):
                errors.append(f"node {nid}: negative or non-finite sum weight")
            elif abs(w.sum() - 1.0) > NORMALIZATION_TOL:
                errors.append(f"node {nid}: unnormalized sum weights (total {w.sum()!r})")
        if node.kind == LEAF:
            leaf = node.leaf
            card = graph.variables.get(leaf.variable)
            if card is None:
                errors.append(f"node {nid}: unknown variable {leaf.variable!r}")
            elif isinstance(leaf, IndicatorLeaf):
                if not 0 <= leaf.value < card:
                    errors.append(f"node {nid}: indicator value {leaf.value} outside domain of size {card}")
            else:
                p = np.asarray(leaf.probs, dtype=float)
                if len(p) != card:
                    errors.append(f"node {nid}: {len(p)} probabilities for cardinality {card}")
                elif not np.all(np.isfinite(p)) or np.any(p < 0):
                    errors.append(f"node {nid}: negative or non-finite leaf probability")
                elif abs(p.sum() - 1.0) > NORMALIZATION_TOL:
                    errors.append(f"node {nid}: unnormalized leaf probabilities (total {p.sum()!r})")
    if not refs_ok:
        return ValidationReport(errors)

    cyc = _find_cycle(nodes)
    if cyc is not None:
        errors.append(f"cycle through node {cyc}")
        return ValidationReport(errors)

    seen = {graph.root}
    stack = [graph.root]
    while stack:
        for c in nodes[stack.pop()].children:
            if c not in seen:
                seen.add(c)
                stack.append(c)
    unreachable = sorted(set(nodes) - seen)
    if unreachable:
        errors.append(f"{len(unreachable)} node(s) unreachable from root, e.g. {unreachable[:5]}")

    scope = _scopes(nodes)
    for nid, node in nodes.items():
        if node.kind == PRODUCT:
            total = sum(len(scope[c]) for c in node.children)
            if total != len(scope[nid]):
                errors.append(f"node {nid}: product children have overlapping scopes (not decomposable)")
        elif node.kind == SUM:
            first = scope[node.children[0]]
            if any(scope[c] != first for c in node.children[1:]):
                errors.append(f"node {nid}: sum children have different scopes (not complete)")

    errors.extend(_tie_errors(nodes))
    return ValidationReport(errors)


def _tie_errors(nodes: Mapping[int, Node]) -> List[str]:
    groups = defaultdict(list)
    for nid, node in nodes.items():
        if node.tie:
            groups[node.tie].append(nid)
    errors = []
    for tie, members in groups.items():
        ref = nodes[members[0]]
        for nid in members[1:]:
            node = nodes[nid]
            if node.kind != ref.kind or len(node.children) != len(ref.children):
                errors.append(f"tie {tie!r}: nodes {members[0]} and {nid} differ in kind or arity")
            elif node.kind == SUM and node.weights != ref.weights:
                errors.append(f"tie {tie!r}: nodes {members[0]} and {nid} have different weights")
            elif node.kind == LEAF and type(node.leaf) is not type(ref.leaf):
                errors.append(f"tie {tie!r}: nodes {members[0]} and {nid} have different leaf types")
            elif isinstance(node.leaf, CategoricalLeaf) and node.leaf.probs != ref.leaf.probs:
                errors.append(f"tie {tie!r}: nodes {members[0]} and {nid} have different leaf probabilities")
    return errors


# ---------------------------------------------------------------------------
# Evaluation

_SUM, _PROD, _IND, _CAT = 0, 1, 2, 3


def logsumexp0(a: np.ndarray) -> np.ndarray:
    """log(sum(exp(a), axis=0)) that tolerates all--inf columns."""
    m = a.max(axis=0)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.exp(a - m).sum(axis=0)) + m


def _log(x) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(x, dtype=float))


def log_weights(weights) -> np.ndarray:
    return np.log(np.maximum(np.asarray(weights, dtype=float), WEIGHT_FLOOR))


class Plan:
    """Topologically ordered, array-indexed view of a circuit for batch passes.

    Positions are assigned children-first, so the root is the last position.
    """

    def __init__(self, graph: CircuitGraph):
        order: List[int] = []
        done = set()
        stack = [(graph.root, False)]
        while stack:
            nid, expanded = stack.pop()
            if nid in done:
                continue
            if expanded:
                done.add(nid)
                order.append(nid)
                continue
            stack.append((nid, True))
            for c in reversed(graph.nodes[nid].children):
                if c not in done:
                    stack.append((c, False))
        self.order = order
        self.position = {nid: i for i, nid in enumerate(order)}
        self.root = len(order) - 1
        self.kind: List[int] = []
        self.children: List[np.ndarray] = []
        self.variable: List[Optional[str]] = []
        self.value: List[int] = []
        self.tie: List[str] = []
        self.weights: List[Optional[np.ndarray]] = []
        self.probs: List[Optional[np.ndarray]] = []
        for nid in order:
            node = graph.nodes[nid]
            self.tie.append(node.tie)
            self.children.append(np.array([self.position[c] for c in node.children], dtype=np.intp))
            w = p = None
            var, val = None, -1
            if node.kind == SUM:
                kind = _SUM
                w = np.asarray(node.weights, dtype=float)
            elif node.kind == PRODUCT:
                kind = _PROD
            elif isinstance(node.leaf, IndicatorLeaf):
                kind, var, val = _IND, node.leaf.variable, node.leaf.value
            else:
                kind, var = _CAT, node.leaf.variable
                p = np.asarray(node.leaf.probs, dtype=float)
            self.kind.append(kind)
            self.variable.append(var)
            self.value.append(val)
            self.weights.append(w)
            self.probs.append(p)

    def __len__(self):
        return len(self.order)

    def forward(self, columns: Mapping[str, np.ndarray], n: int, weights=None, probs=None) -> np.ndarray:
        """Log value of every node for ``n`` datapoints.

        ``columns`` maps variable name to an int array of length ``n`` with
        -1 marking marginalized entries; absent variables are marginalized.
        ``weights``/``probs`` override the per-position parameters.
        """
        weights = self.weights if weights is None else weights
        probs = self.probs if probs is None else probs
        vals = np.empty((len(self.order), n))
        missing = np.full(n, -1, dtype=np.intp)
        for i, kind in enumerate(self.kind):
            if kind == _SUM:
                ch = self.children[i]
                lw = log_weights(weights[i])
                if len(ch) == 1:
                    vals[i] = vals[ch[0]] + lw[0]
                else:
                    vals[i] = logsumexp0(vals[ch] + lw[:, None])
            elif kind == _PROD:
                ch = self.children[i]
                vals[i] = vals[ch[0]] if len(ch) == 1 else vals[ch].sum(axis=0)
            else:
                col = columns.get(self.variable[i], missing)
                if kind == _IND:
                    vals[i] = np.where((col == self.value[i]) | (col < 0), 0.0, -np.inf)
                else:
                    lp = _log(probs[i])
                    vals[i] = np.where(col < 0, 0.0, lp[np.maximum(col, 0)])
        return vals


def evidence_columns(graph: CircuitGraph, rows: Sequence[Evidence]) -> Dict[str, np.ndarray]:
    """Stack evidence rows into per-variable index columns (-1 = marginalized)."""
    n = len(rows)
    columns: Dict[str, np.ndarray] = {}
    for r, row in enumerate(rows):
        for var, value in row.items():
            card = graph.variables.get(var)
            if card is None:
                raise UnknownVariable(f"variable {var!r} is not in the circuit scope")
            if value is None:
                continue
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or not 0 <= value < card:
                raise InvalidEvidence(f"{var}={value!r} outside domain of size {card}")
            col = columns.get(var)
            if col is None:
                col = columns[var] = np.full(n, -1, dtype=np.intp)
            col[r] = value
    return columns


def evaluate_batch(graph: CircuitGraph, rows: Sequence[Evidence]) -> np.ndarray:
    """Log-probability of each evidence row."""
    plan = graph.plan
    if len(rows) == 0:
        return np.zeros(0)
    vals = plan.forward(evidence_columns(graph, rows), len(rows))
    return vals[plan.root].copy()


def evaluate(graph: CircuitGraph, evidence: Evidence) -> float:
    """Log-probability of a (partial) assignment."""
    return float(evaluate_batch(graph, [evidence])[0])


def _observed(e: Evidence) -> set:
    return {k for k, v in e.items() if v is not None}


def _merge(query: Evidence, given: Evidence) -> dict:
    overlap = _observed(query) & _observed(given)
    if overlap:
        raise OverlappingEvidence(f"variables observed in both query and evidence: {sorted(overlap)}")
    merged = dict(given)
    merged.update({k: v for k, v in query.items() if v is not None})
    return merged


def conditional(graph: CircuitGraph, query: Evidence, given: Evidence) -> float:
    """log P(query | given)."""
    merged = _merge(query, given)
    joint, marg = evaluate_batch(graph, [merged, given])
    if marg == -np.inf:
        raise ZeroEvidence("conditioning evidence has probability zero")
    return float(joint - marg)


def _target_conditionals(graph: CircuitGraph, target: str, given: Evidence) -> np.ndarray:
    card = graph.variables.get(target)
    if card is None:
        raise UnknownVariable(f"variable {target!r} is not in the circuit scope")
    if given.get(target) is not None:
        raise OverlappingEvidence(f"target {target!r} is observed in the evidence")
    rows = [dict(given)] + [dict(given, **{target: v}) for v in range(card)]
    lp = evaluate_batch(graph, rows)
    if lp[0] == -np.inf:
        raise ZeroEvidence("conditioning evidence has probability zero")
    return lp[1:] - lp[0]


def predict_map(graph: CircuitGraph, target: str, given: Evidence) -> Tuple[int, float]:
    """Most probable value of ``target`` given evidence; ties go to the smallest index."""
    lp = _target_conditionals(graph, target, given)
    best = int(np.argmax(lp))
    return best, float(lp[best])


def posterior_over(graph: CircuitGraph, target: str, given: Evidence) -> np.ndarray:
    """P(target = v | given) for every value v."""
    p = np.exp(_target_conditionals(graph, target, given))
    return p / p.sum()
