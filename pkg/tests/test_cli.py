import json

import numpy as np
import pytest

from rspnkit.bayesnet import IohmmSpec, compile_rspn
from rspnkit.circuit import CircuitGraph, evaluate, validate
from rspnkit.cli import main
from rspnkit.iohmm import enumerate_joint
from rspnkit.rspn import RspnSpec, unroll

from conftest import CONFIGS, random_bn

GEN = str(CONFIGS / "generator_iohmm.json")


def run(capsys, *argv):
    code = main(list(map(str, argv)))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def data_file(tmp_path, capsys):
    path = tmp_path / "d.jsonl"
    assert run(capsys, "--seed", 4, "sample", GEN, "-n", 60, "--length", 5, "--no-states", "-o", path)[0] == 0
    return path


class TestCompile:
    def test_iohmm_to_rspn(self, tmp_path, capsys):
        out = tmp_path / "m.json"
        assert run(capsys, "compile", GEN, "-o", out)[0] == 0
        spec = RspnSpec.load(out)
        assert validate(unroll(spec, 4)).ok
        code, text, _ = run(capsys, "validate", out)
        assert code == 0 and json.loads(text)["ok"]

    def test_bn_to_circuit(self, tmp_path, capsys):
        net = random_bn(5, 4)
        (tmp_path / "bn.json").write_text(json.dumps(net.to_json()))
        assert run(capsys, "compile", tmp_path / "bn.json", "-o", tmp_path / "c.json")[0] == 0
        g = CircuitGraph.load(tmp_path / "c.json")
        a = {v: 1 for v in net.names}
        np.testing.assert_allclose(np.exp(evaluate(g, a)), net.joint(a), rtol=1e-9)

    def test_cyclic_network_exit_two(self, tmp_path, capsys):
        row = [[[0], [0.5, 0.5]], [[1], [0.5, 0.5]]]
        doc = {"variables": [{"name": "a", "cardinality": 2}, {"name": "b", "cardinality": 2}],
               "cpts": [{"variable": "a", "parents": ["b"], "table": row},
                        {"variable": "b", "parents": ["a"], "table": row}]}
        (tmp_path / "cyc.json").write_text(json.dumps(doc))
        code, _, err = run(capsys, "compile", tmp_path / "cyc.json")
        assert code == 2
        assert "CyclicNetwork" in err

    def test_missing_file_exit_two(self, capsys):
        assert run(capsys, "compile", "/nonexistent/x.json")[0] == 2

    def test_invalid_circuit_fails_validation(self, tmp_path, capsys):
        doc = {"nodes": [{"id": 0, "tie": "", "kind": "sum", "children": [1, 2], "weights": [0.5, 0.6]},
                         {"id": 1, "tie": "", "kind": "leaf", "children": [], "leaf": {"type": "indicator", "variable": "X", "value": 0}},
                         {"id": 2, "tie": "", "kind": "leaf", "children": [], "leaf": {"type": "indicator", "variable": "X", "value": 1}}],
               "root": 0, "variables": [{"name": "X", "cardinality": 2}]}
        (tmp_path / "bad.json").write_text(json.dumps(doc))
        code, out, _ = run(capsys, "validate", tmp_path / "bad.json")
        assert code == 2
        assert not json.loads(out)["ok"]


class TestTrain:
    def test_single_iteration_report(self, tmp_path, capsys, data_file):
        (tmp_path / "em.json").write_text(json.dumps({"max_iters": 1}))
        code, _, _ = run(capsys, "train", GEN, data_file, "--config", tmp_path / "em.json", "-o", tmp_path / "t.json")
        assert code == 0
        assert len((tmp_path / "t.report.jsonl").read_text().splitlines()) == 1

    def test_trace_monotone_and_deterministic(self, tmp_path, capsys, data_file):
        (tmp_path / "em.json").write_text(json.dumps({"max_iters": 15}))
        for name in ("a", "b"):
            assert run(capsys, "--seed", 2, "train", GEN, data_file, "--init", "random", "--restarts", 2,
                       "--config", tmp_path / "em.json", "-o", tmp_path / f"{name}.json")[0] == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        lls = [json.loads(l)["log_likelihood"] for l in (tmp_path / "a.report.jsonl").read_text().splitlines()]
        assert np.all(np.diff(lls) >= -1e-7)

    def test_bad_config_exit_two(self, tmp_path, capsys, data_file):
        (tmp_path / "em.json").write_text(json.dumps({"max_iters": 0}))
        assert run(capsys, "train", GEN, data_file, "--config", tmp_path / "em.json", "-o", tmp_path / "t.json")[0] == 2

    def test_bad_data_exit_two(self, tmp_path, capsys):
        (tmp_path / "d.jsonl").write_text('{"slices": [{"u": 0, "x": 1}, {"u": 0, "x": 9}]}\n')
        code, _, err = run(capsys, "train", GEN, tmp_path / "d.jsonl", "-o", tmp_path / "t.json")
        assert code == 2
        assert "SchemaViolation" in err


class TestQuery:
    def q(self, capsys, query, *extra, model=GEN, length=3):
        code, out, err = run(capsys, "query", model, json.dumps(query) if not isinstance(query, str) else query,
                             "--length", length, *extra)
        return code, (json.loads(out) if code == 0 else err)

    def test_empty_condition_is_marginal(self, capsys):
        _, cond = self.q(capsys, {"type": "conditional", "evidence": {"x_2": 1}})
        _, marg = self.q(capsys, {"type": "marginal", "evidence": {"x_2": 1}})
        np.testing.assert_allclose(cond["log_probability"], marg["log_probability"], atol=1e-12)

    def test_conditional_matches_enumeration(self, capsys):
        gen = IohmmSpec.load(GEN)
        table = enumerate_joint(gen, 2)
        num = sum(p for (us, zs, xs), p in table.items() if xs[1] == 3 and us[0] == 1 and xs[0] == 0)
        den = sum(p for (us, zs, xs), p in table.items() if us[0] == 1 and xs[0] == 0)
        _, res = self.q(capsys, {"type": "conditional", "evidence": {"x_2": 3}, "given": {"u_1": 1, "x_1": 0}},
                        length=2)
        np.testing.assert_allclose(res["probability"], num / den, rtol=1e-10)

    def test_posterior_sums_to_one(self, capsys):
        _, res = self.q(capsys, {"type": "posterior", "target": "z_3", "given": {"u_1": 0, "x_1": 3, "x_2": 1}})
        assert res["type"] == "posterior"
        np.testing.assert_allclose(sum(res["distribution"]), 1.0, atol=1e-12)

    def test_map(self, capsys):
        code, res = self.q(capsys, {"type": "map", "target": "u_2", "given": {"u_1": 0, "x_1": 0}})
        assert code == 0 and res["value"] in (0, 1)

    def test_joint_requires_full_assignment(self, capsys):
        code, err = self.q(capsys, {"type": "joint", "evidence": {"u_1": 0}})
        assert code == 2

    def test_malformed_json_reports_position(self, capsys):
        code, err = self.q(capsys, '{"type": "map", target}')
        assert code == 2
        assert "column 17" in err

    @pytest.mark.parametrize("query", [
        {"type": "nope"}, {"type": "map"}, {"type": "marginal", "evidence": {"x_1": "a"}},
        {"type": "marginal", "evidence": {"q_1": 0}}, ["type"],
    ])
    def test_bad_queries_exit_two(self, capsys, query):
        assert self.q(capsys, query)[0] == 2

    def test_query_from_file(self, tmp_path, capsys):
        (tmp_path / "q.json").write_text(json.dumps({"type": "marginal", "evidence": {}}))
        code, res = self.q(capsys, "@" + str(tmp_path / "q.json"))
        assert res["probability"] == pytest.approx(1.0)

    def test_sequence_model_needs_length(self, capsys):
        code, _, err = run(capsys, "query", GEN, '{"type": "marginal"}')
        assert code == 2


def test_explain_report(tmp_path, capsys, data_file):
    code, out, _ = run(capsys, "explain", GEN, data_file)
    assert code == 0
    report = json.loads(out)
    for dist in report["preceding_state_posterior"].values():
        np.testing.assert_allclose(sum(dist), 1.0, atol=1e-9)
    assert sorted(report["by_step"]) == ["2", "3", "4", "5"]
    gen = IohmmSpec.load(GEN)
    np.testing.assert_allclose(np.array([[row["x"] for row in z] for z in report["emission"]]), gen.emission,
                               rtol=1e-9)


def test_sample_stdout_deterministic(capsys):
    a = run(capsys, "--seed", 1, "sample", GEN, "-n", 3, "--length", 4)[1]
    b = run(capsys, "--seed", 1, "sample", GEN, "-n", 3, "--length", 4)[1]
    assert a == b
    assert set(json.loads(a.splitlines()[0])) == {"inputs", "observations", "states"}


def test_experiment_command(tmp_path, capsys):
    cfg = {"generator": GEN, "n_train": 50, "n_test": 20, "seq_length": 4, "restarts": 1, "em": {"max_iters": 3}}
    (tmp_path / "e.json").write_text(json.dumps(cfg))
    code, out, _ = run(capsys, "experiment", tmp_path / "e.json", "--repeats", 2)
    assert code == 0
    report = json.loads(out)
    assert len(report["runs"]) == 2
    assert {"generator_log_likelihood", "model_log_likelihood", "relative_gap"} <= set(report["runs"][0])
    assert run(capsys, "experiment", tmp_path / "e.json", "--repeats", 2)[1] == out


def test_validate_dataset(capsys, data_file):
    code, out, _ = run(capsys, "validate", data_file)
    assert code == 0
    assert json.loads(out)["sequences"] == 60
