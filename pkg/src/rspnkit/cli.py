"""Command-line interface.

Exit codes: 0 on success, 2 for invalid input, 1 for runtime or numerical
failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import data as data_io
from .bayesnet import STATE, BayesNet, IohmmSpec, compile_network, compile_rspn
from .circuit import CircuitGraph, conditional, evaluate, evaluate_batch, posterior_over, predict_map
from .em import EmConfig, train, train_restarts
from .errors import InputError, ParseError, RspnError
from .experiment import ExperimentConfig, run_experiment
from .iohmm import sample, write_samples
from .rspn import RspnSpec, slice_name, unroll, unroll_for_dataset

log = logging.getLogger("rspnkit")

QUERY_TYPES = ("joint", "marginal", "conditional", "map", "posterior")


# ---------------------------------------------------------------------------
# Helpers


def _read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc.msg}, column {exc.colno})", exc.lineno) from None


def _parse_json_text(text: str, what: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed {what}: {exc.msg} at line {exc.lineno}, column {exc.colno} (char {exc.pos})",
                         exc.lineno) from None


def _emit(doc, out: Optional[str]):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _model_kind(doc) -> str:
    if not isinstance(doc, dict):
        raise InputError("model file must hold a JSON object")
    if "top" in doc and "template" in doc:
        return "rspn"
    if "nodes" in doc and "root" in doc:
        return "circuit"
    if "n_states" in doc and "emission" in doc:
        return "iohmm"
    if "cpts" in doc:
        return "bn"
    raise InputError("unrecognized model file: expected a circuit, RSPN, BN or IOHMM document")


def _structured(fn, doc, what):
    """Run a from_json constructor, turning structural JSON errors into input errors."""
    try:
        return fn(doc)
    except (KeyError, TypeError, IndexError, AttributeError) as exc:
        raise InputError(f"malformed {what} document: {exc!r}") from None


def _load_model(path, length: Optional[int]):
    doc = _read_json(path)
    kind = _model_kind(doc)
    if kind == "circuit":
        graph = _structured(CircuitGraph.from_json, doc, "circuit")
        graph.check()
        return graph
    if kind == "rspn":
        spec = _structured(RspnSpec.from_json, doc, "RSPN")
    elif kind == "iohmm":
        spec = compile_rspn(_structured(IohmmSpec.from_json, doc, "IOHMM"))
    else:
        return compile_network(_structured(BayesNet.from_json, doc, "Bayesian network"))
    if length is None:
        raise InputError("--length is required for sequence models")
    return unroll(spec, length)


def _evidence(obj, where: str) -> Dict[str, Optional[int]]:
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise InputError(f"query field {where!r} must be an object mapping variables to values")
    for k, v in obj.items():
        if v is not None and (isinstance(v, bool) or not isinstance(v, int)):
            raise InputError(f"query field {where!r}: value of {k!r} must be an integer or null")
    return dict(obj)


def _load_rspn(path) -> RspnSpec:
    doc = _read_json(path)
    kind = _model_kind(doc)
    if kind == "iohmm":
        return compile_rspn(_structured(IohmmSpec.from_json, doc, "IOHMM"))
    if kind != "rspn":
        raise InputError(f"{path}: expected an RSPN or IOHMM document, found {kind}")
    return _structured(RspnSpec.from_json, doc, "RSPN")


# ---------------------------------------------------------------------------
# Commands


def cmd_compile(args):
    doc = _read_json(args.input)
    kind = _model_kind(doc) if args.kind == "auto" else args.kind
    if kind == "iohmm":
        spec = compile_rspn(_structured(IohmmSpec.from_json, doc, "IOHMM"))
        _emit(spec.to_json(), args.output)
    elif kind == "bn":
        net = _structured(BayesNet.from_json, doc, "Bayesian network")
        _emit(compile_network(net, leaf=args.leaf).to_json(), args.output)
    else:
        raise InputError(f"cannot compile a {kind} document")
    return 0


def cmd_train(args):
    spec = _load_rspn(args.model)
    dataset = data_io.load(args.data, args.format)
    config = EmConfig.from_json(_read_json(args.config)) if args.config else EmConfig()
    if args.threads:
        config = EmConfig(**{**config.to_json(), "threads": args.threads})
    if args.init == "random":
        trained, report, init_seed = train_restarts(spec, dataset, config, args.restarts, args.seed or 0)
        log.info("best of %d restarts: init seed %d", args.restarts, init_seed)
    else:
        trained, report = train(spec, dataset, config)
    log.info("stopped after %d iterations (%s), log-likelihood %.6f",
             report.iterations, report.stop_reason, report.final_log_likelihood)
    _emit(trained.to_json(), args.output)
    report_path = args.report or str(Path(args.output).with_suffix("")) + ".report.jsonl"
    Path(report_path).write_text(report.to_jsonl())
    return 0


def run_query(graph: CircuitGraph, query) -> dict:
    if not isinstance(query, dict):
        raise InputError("query must be a JSON object")
    qtype = query.get("type")
    if qtype not in QUERY_TYPES:
        raise InputError(f"query 'type' must be one of {', '.join(QUERY_TYPES)}; got {qtype!r}")
    evidence = _evidence(query.get("evidence"), "evidence")
    given = _evidence(query.get("given"), "given")
    if qtype in ("joint", "marginal"):
        merged = dict(evidence, **{k: v for k, v in given.items()})
        observed = sum(v is not None for v in merged.values())
        if qtype == "joint" and observed != len(graph.variables):
            missing = sorted(set(graph.variables) - {k for k, v in merged.items() if v is not None})
            raise InputError(f"joint query must assign every variable; missing {missing}")
        lp = evaluate(graph, merged)
        return {"type": qtype, "log_probability": lp, "probability": float(np.exp(lp))}
    if qtype == "conditional":
        lp = conditional(graph, evidence, given)
        return {"type": qtype, "log_probability": lp, "probability": float(np.exp(lp))}
    target = query.get("target")
    if not isinstance(target, str):
        raise InputError("map and posterior queries need a string 'target'")
    conditioning = dict(given, **evidence)
    if qtype == "map":
        value, lp = predict_map(graph, target, conditioning)
        return {"type": qtype, "target": target, "value": value, "probability": float(np.exp(lp))}
    post = posterior_over(graph, target, conditioning)
    return {"type": qtype, "target": target, "distribution": [float(p) for p in post]}


def cmd_query(args):
    graph = _load_model(args.model, args.length)
    text = Path(args.query[1:]).read_text() if args.query.startswith("@") else args.query
    query = _parse_json_text(text, "query")
    _emit(run_query(graph, query), args.output)
    return 0


def state_report(spec: RspnSpec, dataset: data_io.SequenceDataset, action: str = "u",
                 state: str = STATE) -> dict:
    """Filtered state posteriors preceding each action value, plus emission tables.

    For every sequence and every step t >= 2, computes P(z_{t-1} | slices 1..t-1)
    and files it under the action value observed at step t. The report gives
    the mean posterior per action value (over all steps) and per (step, value).
    """
    if state not in spec.variables or action not in spec.variables:
        raise InputError(f"model must contain variables {state!r} and {action!r}")
    n_states = spec.variables[state]
    n_actions = spec.variables[action]
    totals = np.zeros((n_actions, n_states))
    counts = np.zeros(n_actions)
    per_step: Dict[int, np.ndarray] = {}
    per_step_counts: Dict[int, np.ndarray] = {}
    circuits = unroll_for_dataset(spec, dataset)
    for length, idx in dataset.by_length().items():
        graph = circuits[length]
        evs = [data_io.to_evidence(dataset, i) for i in idx]
        for t in range(2, length + 1):
            acts = np.array([-1 if ev[slice_name(action, t)] is None else ev[slice_name(action, t)] for ev in evs])
            prefix = [{k: v for k, v in ev.items() if int(k.rpartition("_")[2]) < t} for ev in evs]
            target = slice_name(state, t - 1)
            rows = prefix + [dict(p, **{target: v}) for v in range(n_states) for p in prefix]
            lp = evaluate_batch(graph, rows).reshape(n_states + 1, len(prefix))
            post = np.exp(lp[1:] - lp[0]).T
            post /= post.sum(axis=1, keepdims=True)
            step_tot = per_step.setdefault(t, np.zeros((n_actions, n_states)))
            step_cnt = per_step_counts.setdefault(t, np.zeros(n_actions))
            for a in range(n_actions):
                sel = acts == a
                totals[a] += post[sel].sum(axis=0)
                counts[a] += sel.sum()
                step_tot[a] += post[sel].sum(axis=0)
                step_cnt[a] += sel.sum()

    def mean(tot, cnt):
        return [(tot[a] / cnt[a]).tolist() if cnt[a] > 0 else None for a in range(n_actions)]

    graph2 = unroll(spec, 2)
    emission = []
    for z in range(n_states):
        rows = []
        for a in range(n_actions):
            given = {slice_name(state, 1): z, slice_name(action, 1): a}
            rows.append({name: posterior_over(graph2, slice_name(name, 1), given).tolist()
                         for name in spec.variables if name not in (state, action)})
        emission.append(rows)
    return {
        "state_variable": state,
        "action_variable": action,
        "sequences": len(dataset),
        "preceding_state_posterior": {str(a): p for a, p in enumerate(mean(totals, counts))},
        "action_counts": {str(a): int(c) for a, c in enumerate(counts)},
        "by_step": {str(t): {str(a): p for a, p in enumerate(mean(per_step[t], per_step_counts[t]))}
                    for t in sorted(per_step)},
        "emission": emission,
    }


def cmd_explain(args):
    spec = _load_rspn(args.model)
    dataset = data_io.load(args.data, args.format)
    _emit(state_report(spec, dataset, args.action, args.state), args.output)
    return 0


def cmd_sample(args):
    spec = _structured(IohmmSpec.from_json, _read_json(args.generator), "IOHMM")
    samples = sample(spec, args.length, args.count, args.seed or 0)
    if args.output:
        write_samples(samples, args.output, include_states=not args.no_states)
    else:
        for s in samples:
            rec = {"inputs": s.inputs, "observations": s.observations}
            if not args.no_states:
                rec["states"] = s.states
            sys.stdout.write(json.dumps(rec) + "\n")
    return 0


def cmd_experiment(args):
    try:
        doc = _read_json(args.config)
        if args.seed is not None:
            doc["seed"] = args.seed
        if args.repeats is not None:
            doc["repeats"] = args.repeats
        if args.threads:
            doc.setdefault("em", {})["threads"] = args.threads
        cfg = ExperimentConfig.from_json(doc, Path(args.config).parent)
    except (KeyError, TypeError) as exc:
        raise InputError(f"malformed experiment config: {exc!r}") from None
    report = run_experiment(cfg)
    for run in report["runs"]:
        log.info("seed %d: generator %.4f, model %.4f, relative gap %.5f%%", run["seed"],
                 run["generator_log_likelihood"], run["model_log_likelihood"], 100 * run["relative_gap"])
    _emit(report, args.output)
    return 0


def cmd_validate(args):
    path = args.input
    kind = args.kind
    if kind == "auto" and Path(path).suffix.lower() in (".csv", ".jsonl", ".ndjson"):
        kind = "dataset"
    if kind == "dataset":
        ds = data_io.load(path)
        _emit({"ok": True, "kind": "dataset", "sequences": len(ds), "schema": dict(ds.schema)}, None)
        return 0
    doc = _read_json(path)
    kind = _model_kind(doc) if kind == "auto" else kind
    if kind == "circuit":
        graph = _structured(CircuitGraph.from_json, doc, "circuit")
        report = graph.report
        _emit({"ok": report.ok, "kind": kind, "errors": list(report.errors), "nodes": len(graph)}, None)
        return 0 if report.ok else 2
    if kind == "rspn":
        spec = _structured(RspnSpec.from_json, doc, "RSPN")
        errors = []
        for length in (2, 3):
            errors += [f"unrolled to {length}: {e}" for e in unroll(spec, length).report.errors]
        _emit({"ok": not errors, "kind": kind, "errors": errors}, None)
        return 0 if not errors else 2
    if kind == "iohmm":
        _structured(IohmmSpec.from_json, doc, "IOHMM")
    else:
        compile_network(_structured(BayesNet.from_json, doc, "Bayesian network")).check()
    _emit({"ok": True, "kind": kind, "errors": []}, None)
    return 0


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rspnkit", description="Recurrent sum-product networks from BNs and IOHMMs.")
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--threads", type=int, default=None, help="worker threads for the E-step")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", help="compile a BN to a circuit or an IOHMM to an RSPN")
    c.add_argument("input")
    c.add_argument("-o", "--output")
    c.add_argument("--kind", choices=["auto", "bn", "iohmm"], default="auto")
    c.add_argument("--leaf", choices=["categorical", "indicator"], default="categorical")
    c.set_defaults(func=cmd_compile)

    t = sub.add_parser("train", help="train an RSPN with EM")
    t.add_argument("model", help="RSPN or IOHMM JSON giving structure (and initial weights)")
    t.add_argument("data", help="dataset (.jsonl or .csv)")
    t.add_argument("-o", "--output", required=True)
    t.add_argument("--config", help="EM config JSON")
    t.add_argument("--report", help="training report path (default: <output>.report.jsonl)")
    t.add_argument("--init", choices=["model", "random"], default="model")
    t.add_argument("--restarts", type=int, default=1, help="random initializations to try with --init random")
    t.add_argument("--format", choices=["jsonl", "csv"])
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("query", help="joint, marginal, conditional, MAP or posterior query")
    q.add_argument("model")
    q.add_argument("query", help="query JSON, or @file")
    q.add_argument("--length", type=int, help="unroll length for sequence models")
    q.add_argument("-o", "--output")
    q.set_defaults(func=cmd_query)

    e = sub.add_parser("explain", help="state posteriors preceding each action, and emission tables")
    e.add_argument("model")
    e.add_argument("data")
    e.add_argument("--action", default="u")
    e.add_argument("--state", default=STATE)
    e.add_argument("--format", choices=["jsonl", "csv"])
    e.add_argument("-o", "--output")
    e.set_defaults(func=cmd_explain)

    s = sub.add_parser("sample", help="sample sequences from an IOHMM")
    s.add_argument("generator")
    s.add_argument("-n", "--count", type=int, required=True)
    s.add_argument("--length", type=int, required=True)
    s.add_argument("--no-states", action="store_true", help="withhold latent states")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_sample)

    x = sub.add_parser("experiment", help="synthetic generator-versus-learned-model experiment")
    x.add_argument("config")
    x.add_argument("--repeats", type=int)
    x.add_argument("-o", "--output")
    x.set_defaults(func=cmd_experiment)

    v = sub.add_parser("validate", help="check a model or dataset file")
    v.add_argument("input")
    v.add_argument("--kind", choices=["auto", "circuit", "rspn", "bn", "iohmm", "dataset"], default="auto")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RspnError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ArithmeticError, MemoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
