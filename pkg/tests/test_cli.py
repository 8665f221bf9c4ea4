import json
import subprocess
import sys

import pytest

from helpers import tiny_config, tiny_set_flags
from seea import config as C
from seea import env as E
from seea import evolve as V
from seea import mgrm as R
from seea.cli import main
from seea.policy import AgentState


@pytest.fixture
def checkpoint(tmp_path):
    config = tiny_config(iterations=1)
    path = tmp_path / "ck.json"
    V.checkpoint_save(V.initial_state(config, V.Models(config)), config, path)
    return path


def _labeled(checkpoint, path, n=6):
    """A labeled set whose labels are the checkpoint model's own greedy calls."""
    config = V.checkpoint_config(checkpoint)
    state = V.checkpoint_load(checkpoint, config)
    rm = V.Models(config).rm
    lines = []
    for seed in range(n):
        world, obs = E.reset(seed, config.env)
        agent = AgentState(obs)
        for action in E.oracle_plan(world)[: seed % 3]:
            world, o, _, _ = E.step(world, action)
            agent = agent.append(action, o)
        lines.append(json.dumps(R.labeled_to_json(agent, rm.predict(state.rm, agent, 0.0)[0])))
    path.write_text("\n".join(lines) + "\n")
    return path


def test_usage_errors_exit_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == 2
    assert main(["train", "--config", str(tmp_path / "missing.ini")]) == 2
    assert main(["validate-config", "--set", "optim.lr0"]) == 2
    assert main(["validate-config", "--set", "optim.lr0=-1"]) == 2


def test_config_error_names_the_line(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[optim]\nlr0 = abc\n")
    assert main(["validate-config", "--config", str(path)]) == 2
    assert f"{path}:2: cannot parse 'abc' as float" in capsys.readouterr().err


def test_runtime_failure_exits_1(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["train", *tiny_set_flags(), "--iterations", "1", "--out", str(blocker / "run")]) == 1


def test_train_one_iteration_is_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        code = main(["train", *tiny_set_flags(), "--iterations", "1", "--seed", "3", "--out", str(tmp_path / name)])
        assert code == 0
    rows = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert rows[0] == ",".join(V.METRIC_FIELDS) and len(rows) == 2
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    resolved = json.loads((tmp_path / "a" / "resolved-config.json").read_text())
    assert resolved["config"]["seed"] == 3 and resolved["config"]["optim"]["batch_size"] == 4
    assert "config_hash" in capsys.readouterr().err


def test_train_resume(tmp_path):
    flags = [*tiny_set_flags(), "--iterations", "2"]
    assert main(["train", *flags, "--out", str(tmp_path / "full")]) == 0
    part = tmp_path / "part"
    assert main(["train", *flags, "--out", str(part)]) == 0
    # drop the last iteration, then resume from the first checkpoint
    rows = (part / "metrics.csv").read_text().splitlines()
    (part / "metrics.csv").write_text("\n".join(rows[:2]) + "\n")
    ck = part / "checkpoints" / "iter_0000.json"
    assert main(["train", *flags, "--out", str(part), "--resume", str(ck)]) == 0
    assert (part / "metrics.csv").read_bytes() == (tmp_path / "full" / "metrics.csv").read_bytes()


def test_resume_with_other_config_exits_2(tmp_path, checkpoint):
    assert main(["train", *tiny_set_flags(), "--seed", "5", "--out", str(tmp_path / "r"), "--resume", str(checkpoint)]) == 2


def test_eval_oracle_fixture(tmp_path, checkpoint, capsys):
    data = json.loads(checkpoint.read_text())
    data["chooser"] = "oracle"
    checkpoint.write_text(json.dumps(data))
    out = tmp_path / "eval.csv"
    assert main(["eval", "--checkpoint", str(checkpoint), "--episodes", "20", "--out", str(out)]) == 0
    assert "success_rate 1.0000" in capsys.readouterr().out
    header, row = out.read_text().splitlines()
    assert header == "episodes,success_rate,avg_steps" and row.startswith("20,1.0000,")


def test_eval_policy_checkpoint(tmp_path, checkpoint):
    out = tmp_path / "eval.csv"
    assert main(["eval", "--checkpoint", str(checkpoint), "--episodes", "5", "--out", str(out)]) == 0
    episodes, rate, steps = out.read_text().splitlines()[1].split(",")
    assert episodes == "5" and 0.0 <= float(rate) <= 1.0 and 1.0 <= float(steps) <= 8.0


def test_eval_rejects_zero_episodes(tmp_path, checkpoint):
    assert main(["eval", "--checkpoint", str(checkpoint), "--episodes", "0", "--out", str(tmp_path / "e.csv")]) == 2


def test_eval_bad_checkpoint(tmp_path):
    bad = tmp_path / "ck.json"
    bad.write_text("{}")
    assert main(["eval", "--checkpoint", str(bad), "--out", str(tmp_path / "e.csv")]) == 2


def test_rm_eval_all_correct(tmp_path, checkpoint, capsys):
    labeled = _labeled(checkpoint, tmp_path / "set.jsonl")
    out = tmp_path / "acc.csv"
    assert main(["rm-eval", "--checkpoint", str(checkpoint), "--labeled-set", str(labeled), "--out", str(out)]) == 0
    assert out.read_text().splitlines()[-1] == "Overall,6,6,100.00"
    assert "Overall" in capsys.readouterr().out


def test_rm_eval_empty_set(tmp_path, checkpoint):
    empty = tmp_path / "set.jsonl"
    empty.write_text("\n")
    assert main(["rm-eval", "--checkpoint", str(checkpoint), "--labeled-set", str(empty)]) == 2


def test_rm_eval_malformed_line(tmp_path, checkpoint, capsys):
    labeled = _labeled(checkpoint, tmp_path / "set.jsonl", n=3)
    with open(labeled, "a") as f:
        f.write('{"state": 1}\n')
    assert main(["rm-eval", "--checkpoint", str(checkpoint), "--labeled-set", str(labeled)]) == 2
    assert f"{labeled}:4:" in capsys.readouterr().err


def _tree(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_inspect_tree(tmp_path, capsys):
    out = tmp_path / "tree.jsonl"
    flags = ["--set", "search.iterations=12", "--set", "search.G=3", "--seed", "4", "--out", str(out)]
    assert main(["inspect-tree", *flags]) == 0
    nodes = _tree(out)
    assert 1 < len(nodes) <= 1 + 12 * 3
    assert nodes[0]["parent"] is None and nodes[0]["depth"] == 0
    for node in nodes:
        for e in node["edges"]:
            assert e["N"] == 0 or abs(e["Q"] * e["N"] - e["R_sum"]) < 1e-9
    printed = capsys.readouterr().out
    assert f"{len(nodes)} nodes" in printed
    again = tmp_path / "again.jsonl"
    assert main(["inspect-tree", *flags[:-1], str(again)]) == 0
    assert again.read_bytes() == out.read_bytes()


def test_inspect_tree_from_checkpoint(tmp_path, checkpoint):
    out = tmp_path / "tree.jsonl"
    assert main(["inspect-tree", "--checkpoint", str(checkpoint), "--set", "search.iterations=5", "--out", str(out)]) == 0
    assert len(_tree(out)) > 1


def test_validate_config_print_defaults(capsys):
    assert main(["validate-config", "--print-defaults"]) == 0
    text = capsys.readouterr().out
    assert C.parse_text(text) == V.RunConfig()
    assert f"# config_hash {V.RunConfig().hash()}" in text


def test_validate_config_with_environment(monkeypatch, capsys):
    monkeypatch.setenv("SEEA_SEARCH__G", "6")
    assert main(["validate-config", "--preset", "fast"]) == 0
    config = C.parse_text(capsys.readouterr().out)
    assert config.search.G == 6 and config.optim.steps_per_iter == 40


def test_module_entry_point():
    done = subprocess.run([sys.executable, "-m", "seea", "validate-config", "--set", "nope"], capture_output=True, text=True)
    assert done.returncode == 2 and "SECTION.KEY=VALUE" in done.stderr
