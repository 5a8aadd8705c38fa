"""Recurrent SPNs: top/template/bottom fragments and unrolling.

Fragments refer to variables by base name (``"u"``, ``"z"``, ...). Unrolling
to length ``L`` stacks the top fragment, ``L - 2`` template copies and the
bottom fragment, substituting each placeholder slot with the matching root of
the next fragment and renaming variables to ``"<base>_<t>"``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

from .circuit import (
    LEAF,
    PLACEHOLDER,
    SUM,
    CategoricalLeaf,
    CircuitGraph,
    IndicatorLeaf,
    Node,
    node_from_json,
    node_to_json,
)
from .errors import InputError, LengthTooShort


def slice_name(base: str, t: int) -> str:
    return f"{base}_{t}"


def split_slice_name(name: str) -> Tuple[str, int]:
    base, _, t = name.rpartition("_")
    if not base or not t.isdigit():
        raise ValueError(f"{name!r} is not a slice-tagged variable name")
    return base, int(t)


@dataclass(frozen=True, eq=False)
class CircuitFragment:
    """Circuit piece whose placeholder leaves stand for the next fragment's roots."""

    nodes: Mapping[int, Node]
    roots: Tuple[int, ...]

    @property
    def slots(self) -> Dict[int, int]:
        """slot index -> placeholder node id."""
        return {n.slot: i for i, n in self.nodes.items() if n.kind == PLACEHOLDER}

    def to_json(self) -> dict:
        return {"nodes": [node_to_json(i, self.nodes[i]) for i in sorted(self.nodes)], "roots": list(self.roots)}

    @classmethod
    def from_json(cls, doc: dict) -> "CircuitFragment":
        return cls(dict(node_from_json(d) for d in doc["nodes"]), tuple(int(r) for r in doc["roots"]))


@dataclass(frozen=True, eq=False)
class RspnSpec:
    variables: Mapping[str, int]
    top: CircuitFragment
    template: CircuitFragment
    bottom: CircuitFragment
    interface: Tuple[str, ...]
    latent: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        k = len(self.interface)
        if len(self.top.roots) != 1:
            raise InputError("top fragment must have exactly one root")
        if sorted(self.top.slots) != list(range(k)):
            raise InputError("top fragment slots do not match the interface")
        if len(self.template.roots) != k or sorted(self.template.slots) != list(range(k)):
            raise InputError("template fragment slots do not match the interface")
        if len(self.bottom.roots) != k or self.bottom.slots:
            raise InputError("bottom fragment must have one root per interface slot and no slots")
        for nid, node in self.template.nodes.items():
            if not node.tie:
                raise InputError(f"template node {nid} has no tie")

    @property
    def fragments(self) -> Dict[str, CircuitFragment]:
        return {"top": self.top, "template": self.template, "bottom": self.bottom}

    def sum_parameters(self) -> Dict[str, Tuple[float, ...]]:
        out = {}
        for frag in self.fragments.values():
            for node in frag.nodes.values():
                if node.kind == SUM:
                    out.setdefault(node.tie, node.weights)
        return out

    def leaf_parameters(self) -> Dict[str, Tuple[float, ...]]:
        out = {}
        for frag in self.fragments.values():
            for node in frag.nodes.values():
                if node.kind == LEAF and isinstance(node.leaf, CategoricalLeaf):
                    out.setdefault(node.tie, node.leaf.probs)
        return out

    def with_parameters(self, sums: Mapping[str, tuple], leaves: Mapping[str, tuple]) -> "RspnSpec":
        """Copy with sum weights and categorical leaf probabilities replaced by tie."""
        frags = {name: CircuitFragment(reparameterize(f.nodes, sums, leaves), f.roots)
                 for name, f in self.fragments.items()}
        return RspnSpec(self.variables, frags["top"], frags["template"], frags["bottom"],
                        self.interface, self.latent)

    def replace(self, **fragments) -> "RspnSpec":
        frags = dict(self.fragments, **fragments)
        return RspnSpec(self.variables, frags["top"], frags["template"], frags["bottom"],
                        self.interface, self.latent)

    def to_json(self) -> dict:
        return {
            "variables": [{"name": k, "cardinality": v} for k, v in self.variables.items()],
            "latent": list(self.latent),
            "interface": list(self.interface),
            **{name: f.to_json() for name, f in self.fragments.items()},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RspnSpec":
        return cls(
            {v["name"]: int(v["cardinality"]) for v in doc["variables"]},
            CircuitFragment.from_json(doc["top"]),
            CircuitFragment.from_json(doc["template"]),
            CircuitFragment.from_json(doc["bottom"]),
            tuple(doc["interface"]),
            tuple(doc.get("latent", ())),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)

    @classmethod
    def load(cls, path) -> "RspnSpec":
        with open(path) as f:
            return cls.from_json(json.load(f))


def reparameterize(nodes: Mapping[int, Node], sums: Mapping[str, tuple], leaves: Mapping[str, tuple]) -> Dict[int, Node]:
    out = {}
    for nid, node in nodes.items():
        if node.kind == SUM and node.tie in sums:
            node = Node(SUM, node.children, tuple(float(w) for w in sums[node.tie]), tie=node.tie)
        elif node.kind == LEAF and isinstance(node.leaf, CategoricalLeaf) and node.tie in leaves:
            probs = tuple(float(p) for p in leaves[node.tie])
            node = Node(LEAF, leaf=CategoricalLeaf(node.leaf.variable, probs), tie=node.tie)
        out[nid] = node
    return out


def unroll(spec: RspnSpec, length: int) -> CircuitGraph:
    """Regular circuit over ``length`` slices with fresh node ids and shared ties."""
    if length < 2:
        raise LengthTooShort(f"cannot unroll to length {length}; need at least 2")
    parts = [spec.top] + [spec.template] * (length - 2) + [spec.bottom]
    maps = []
    next_id = 0
    for frag in parts:
        m = {}
        for lid in sorted(frag.nodes):
            if frag.nodes[lid].kind != PLACEHOLDER:
                m[lid] = next_id
                next_id += 1
        maps.append(m)

    nodes: Dict[int, Node] = {}
    for t, (frag, m) in enumerate(zip(parts, maps), start=1):
        if t < length:
            nxt_frag, nxt_map = parts[t], maps[t]
            slot_target = {k: nxt_map[r] for k, r in enumerate(nxt_frag.roots)}
        else:
            slot_target = {}

        def resolve(c, frag=frag, m=m, slot_target=slot_target):
            child = frag.nodes[c]
            return slot_target[child.slot] if child.kind == PLACEHOLDER else m[c]

        for lid in sorted(m):
            node = frag.nodes[lid]
            if node.kind == LEAF:
                leaf = node.leaf
                var = slice_name(leaf.variable, t)
                if isinstance(leaf, IndicatorLeaf):
                    leaf = IndicatorLeaf(var, leaf.value)
                else:
                    leaf = CategoricalLeaf(var, leaf.probs)
                nodes[m[lid]] = Node(LEAF, leaf=leaf, tie=node.tie)
            else:
                children = tuple(resolve(c) for c in node.children)
                nodes[m[lid]] = Node(node.kind, children, node.weights, tie=node.tie)

    variables = {slice_name(v, t): card for t in range(1, length + 1) for v, card in spec.variables.items()}
    return CircuitGraph(nodes, maps[0][spec.top.roots[0]], variables)


def unroll_for_dataset(spec: RspnSpec, dataset) -> Dict[int, CircuitGraph]:
    """One unrolled circuit per distinct sequence length in ``dataset``."""
    lengths = sorted({len(s) for s in dataset.sequences})
    if lengths and lengths[0] < 2:
        raise LengthTooShort(f"dataset contains a sequence of length {lengths[0]}")
    return {L: unroll(spec, L) for L in lengths}
