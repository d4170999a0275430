import os
import subprocess
import sys
import time
from dataclasses import fields

import numpy as np
import pytest

from moose import cliio as C
from moose import envsuite as E
from moose import evalrobust as R
from moose.errors import ContractError, DivergenceError
from moose.policy import DeterministicPolicy

QUICK = ["--model-epochs", "2", "--model-hidden", "8", "--members", "2", "--vae-epochs", "2",
         "--vae-hidden", "8", "--policy-steps", "3", "--policy-hidden", "8", "--horizon", "3", "--n-starts", "5"]


def run(*args, env=None, cwd=None):
    full_env = dict(os.environ)
    full_env.pop(C.OUTPUT_ROOT_ENV, None)
    full_env.update(env or {})
    return subprocess.run([sys.executable, "-m", "moose", *args], capture_output=True, text=True,
                          env=full_env, cwd=cwd)


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv(C.OUTPUT_ROOT_ENV, str(tmp_path))
    return tmp_path


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "d.txt"
    assert C.main(["gen-data", "--epsilon", "0.4", "--steps", "1000", "--seed", "1", "--out", str(path)]) == 0
    return path


# -- configuration -------------------------------------------------------------------

def test_every_field_documented():
    for f in fields(C.RunConfig):
        assert f.metadata["doc"]
    assert C.RunConfig().validate()


def test_config_round_trip():
    cfg = C.RunConfig(epsilon=0.2, seeds=(3, 4, 9), epsilons=(0.0, 0.2), model_hidden=(32, 16),
                      reward_head=True, lam=0.05, algorithms=("moose", "bc"), out="x/y")
    text = cfg.to_text()
    again = C.RunConfig.from_text(text)
    assert again == cfg
    assert again.to_text() == text


def test_config_rejects_unknown_key():
    with pytest.raises(ContractError, match="unknown key"):
        C.RunConfig.from_text("epsilon = 0.2\nlearning_rate = 3\n")


def test_config_rejects_bad_value():
    with pytest.raises(ContractError):
        C.RunConfig.from_text("steps = many\n")


def test_flags_override_config_file(tmp_path):
    (tmp_path / "c.txt").write_text("epsilon = 0.6\ntier = bad\nsteps = 300\n")
    args = C.build_parser().parse_args(["gen-data", "--config", str(tmp_path / "c.txt"), "--epsilon", "0.2"])
    cfg = C.config_from_args(args)
    assert (cfg.epsilon, cfg.tier, cfg.steps) == (0.2, "bad", 300)


def test_unknown_config_key_exits_two(tmp_path):
    (tmp_path / "c.txt").write_text("colour = blue\n")
    assert C.main(["gen-data", "--config", str(tmp_path / "c.txt"), "--out", str(tmp_path / "d")]) == 2


# -- gen-data ------------------------------------------------------------------------

def test_gen_data_line_count_and_determinism(tmp_path):
    r1 = run("gen-data", "--tier", "mediocre", "--epsilon", "0.4", "--steps", "2000", "--seed", "7",
             "--out", str(tmp_path / "a.txt"))
    assert r1.returncode == 0, r1.stderr
    assert "mean reward" in r1.stdout and "range" in r1.stdout
    lines = (tmp_path / "a.txt").read_text().splitlines()
    assert len(lines) == 2001 and lines[0].startswith("#")
    run("gen-data", "--tier", "mediocre", "--epsilon", "0.4", "--steps", "2000", "--seed", "7",
        "--out", str(tmp_path / "b.txt"))
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_gen_data_missing_out_writes_nothing(tmp_path):
    r = run("gen-data", "--steps", "200", cwd=tmp_path)
    assert r.returncode == 2
    assert list(tmp_path.iterdir()) == []


@pytest.mark.parametrize("flags", [["--epsilon", "1.5"], ["--tier", "awful"], ["--steps", "150"],
                                   ["--epsilon", "abc"]])
def test_gen_data_usage_errors(tmp_path, flags):
    assert run("gen-data", *flags, "--out", str(tmp_path / "d.txt")).returncode == 2
    assert not (tmp_path / "d.txt").exists()


def test_argparse_usage_error_exit_code():
    assert run("train", "--no-such-flag").returncode == 2
    assert run().returncode == 2


def test_output_root_env_redirects_outputs_only(tmp_path):
    out_root = tmp_path / "outputs"
    work = tmp_path / "work"
    work.mkdir()
    env = {C.OUTPUT_ROOT_ENV: str(out_root)}
    assert run("gen-data", "--steps", "200", "--out", "d.txt", env=env, cwd=work).returncode == 0
    assert (out_root / "d.txt").exists() and not (work / "d.txt").exists()
    (work / "local.txt").write_bytes((out_root / "d.txt").read_bytes())
    r = run("train", "--algorithm", "bc", "--clone-epochs", "1", "--dataset", "local.txt", "--out", "run",
            env=env, cwd=work)
    assert r.returncode == 0, r.stderr
    assert (out_root / "run" / "policy.ckpt").exists()


# -- train ---------------------------------------------------------------------------

def read_header(path):
    return path.read_text().splitlines()[:2]


def test_unpenalized_flag_in_diagnostics(root, small_data):
    assert C.main(["train", "--dataset", str(small_data), "--out", "abl", "--lambda", "1.0", *QUICK]) == 0
    comment, header = read_header(root / "abl" / "diagnostics.csv")
    assert "unpenalized" in comment and header == "step,E[R],E[P],loss"
    assert C.main(["train", "--dataset", str(small_data), "--out", "moose", *QUICK]) == 0
    assert "unpenalized" not in read_header(root / "moose" / "diagnostics.csv")[0]
    rows = (root / "moose" / "diagnostics.csv").read_text().splitlines()[2:]
    assert [int(r.split(",")[0]) for r in rows] == [1, 2, 3]
    for name in ("ensemble.ckpt", "vae.ckpt", "policy.ckpt", "config.txt"):
        assert (root / "moose" / name).exists()


def test_zero_policy_steps_emits_initial_policy(root, small_data):
    flags = [f for f in QUICK]
    flags[flags.index("--policy-steps") + 1] = "0"
    assert C.main(["train", "--dataset", str(small_data), "--out", "zero", *flags]) == 0
    saved = DeterministicPolicy.load(root / "zero" / "policy.ckpt")
    cfg = C.RunConfig.from_text((root / "zero" / "config.txt").read_text())
    data = E.Dataset.load(small_data)
    from moose.dynmodel import DynamicsEnsemble
    from moose.policyopt import init_policy
    init = init_policy(data, DynamicsEnsemble.load(root / "zero" / "ensemble.ckpt"), cfg.moose_config())
    for a, b in zip(saved.parameters(), init.parameters()):
        assert np.array_equal(a.data, b.data)
    assert len((root / "zero" / "diagnostics.csv").read_text().splitlines()) == 2


def test_reused_checkpoints_must_match_dataset(root, small_data, tmp_path):
    assert C.main(["train", "--dataset", str(small_data), "--out", "first", *QUICK]) == 0
    other = tmp_path / "other.txt"
    assert C.main(["gen-data", "--steps", "1000", "--seed", "5", "--out", str(other)]) == 0
    code = C.main(["train", "--dataset", str(other), "--out", "second", "--ensemble",
                   str(root / "first" / "ensemble.ckpt"), *QUICK])
    assert code == 2
    code = C.main(["train", "--dataset", str(small_data), "--out", "third", "--ensemble",
                   str(root / "first" / "ensemble.ckpt"), "--vae", str(root / "first" / "vae.ckpt"), *QUICK])
    assert code == 0


def test_divergence_exits_one_with_diagnostics(root, small_data, monkeypatch, capsys):
    def diverge(*a, **k):
        exc = DivergenceError("rollout produced a non-finite state at step 2 in model 1")
        exc.diagnostics = [(1, 0.5, 0.25, 0.2425)]
        raise exc
    monkeypatch.setattr(C, "train_policy", diverge)
    assert C.main(["train", "--dataset", str(small_data), "--out", "div", *QUICK]) == 1
    assert "diagnostics" in capsys.readouterr().err
    assert (root / "div" / "diagnostics.csv").read_text().splitlines()[2].startswith("1,0.5,")


def test_missing_dataset_exits_two(root):
    assert C.main(["train", "--dataset", "nowhere.txt", "--out", "x"]) == 2


# -- eval ----------------------------------------------------------------------------

def test_eval_appends_identical_rows(root, small_data):
    assert C.main(["train", "--algorithm", "bc", "--clone-epochs", "2", "--dataset", str(small_data),
                   "--out", "bc"]) == 0
    for _ in range(2):
        assert C.main(["eval", "--policy", str(root / "bc" / "policy.ckpt"), "--seed", "3",
                       "--curve", "c.csv"]) == 0
    lines = (root / "c.csv").read_text().splitlines()
    assert lines[0] == "seed,iteration,true_return"
    assert len(lines) == 3 and lines[1] == lines[2]


def test_eval_missing_checkpoint_exits_two(root):
    assert run("eval", "--policy", str(root / "missing.ckpt")).returncode == 2


def test_eval_refuses_other_format_version(root, small_data):
    assert C.main(["train", "--algorithm", "bc", "--clone-epochs", "1", "--dataset", str(small_data),
                   "--out", "bc"]) == 0
    blob = (root / "bc" / "policy.ckpt").read_bytes()
    (root / "old.ckpt").write_bytes(blob.replace(b"MOOSE-CKPT 1", b"MOOSE-CKPT 0", 1))
    assert C.main(["eval", "--policy", str(root / "old.ckpt")]) == 2


def test_eval_gap(root, small_data, capsys):
    assert C.main(["train", "--dataset", str(small_data), "--out", "m", *QUICK]) == 0
    assert C.main(["eval", "--policy", str(root / "m" / "policy.ckpt"), "--gap", "--ensemble",
                   str(root / "m" / "ensemble.ckpt"), "--eval-len", "10"]) == 0
    assert "gap" in capsys.readouterr().out


def test_behavior_clone_of_clean_data_matches_behavior(root, capsys):
    assert C.main(["gen-data", "--epsilon", "0", "--steps", "20000", "--out", "clean.txt"]) == 0
    assert C.main(["train", "--algorithm", "bc", "--dataset", str(root / "clean.txt"), "--out", "bc"]) == 0
    capsys.readouterr()
    assert C.main(["eval", "--policy", str(root / "bc" / "policy.ckpt")]) == 0
    cloned = float(capsys.readouterr().out.split()[2])
    env = E.make_env("pointmass")
    behavior = R.evaluate_policy(env, E.behavior_policy(env, "mediocre"), 10, 100, 0)
    assert abs(cloned - behavior) <= 0.1 * abs(behavior)


# -- report --------------------------------------------------------------------------

def write_curve(path, seeds, values):
    R.write_curve_csv(path, [(s, i + 1, v) for s in seeds for i, v in enumerate(values)])


def test_constant_curves_have_zero_band(root):
    write_curve(root / "in" / "mediocre_eps0.2_moose.csv", [0, 1], [-50.0] * 20)
    perf = C.collect_curves(root / "in")
    x, mean, std = C.curve_bands(perf)[("mediocre", 0.2, "moose")]
    assert np.all(std == 0.0) and np.all(mean == -50.0)
    assert C.main(["report", "--curves", str(root / "in"), "--out", "rep"]) == 0
    svg = (root / "rep" / "curves.svg").read_text()
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg


def test_report_empty_directory(root, caplog):
    (root / "empty").mkdir()
    with caplog.at_level("WARNING"):
        assert C.main(["report", "--curves", str(root / "empty"), "--out", "rep"]) == 0
    assert "no curve files" in caplog.text
    assert (root / "rep" / "summary.csv").read_text().splitlines() == [",".join(R.SUMMARY_HEADER)]


def test_report_skips_inconsistent_file(root, caplog):
    write_curve(root / "in" / "mediocre_eps0.2_bc.csv", [0, 1], np.linspace(-90, -70, 20))
    R.write_curve_csv(root / "in" / "mediocre_eps0.4_bc.csv",
                      [(0, i, -70.0) for i in range(1, 21)] + [(1, i, -71.0) for i in range(1, 15)])
    with caplog.at_level("WARNING"):
        assert C.main(["report", "--curves", str(root / "in"), "--out", "rep"]) == 0
    assert "mediocre_eps0.4_bc.csv" in caplog.text
    summary = R.read_summary_csv(root / "rep" / "summary.csv")
    assert list(summary) == [("mediocre", 0.2, "bc")]


def test_report_reproduces_grid_summary(root):
    code = C.main(["grid", "--out", "g", "--tiers", "mediocre", "--epsilons", "0.2,0.4",
                   "--algorithms", "moose,bc", "--seeds", "0,1,2", "--steps", "1000", "--clone-epochs", "10",
                   "--policy-steps", "10", "--eval-traj", "2", "--eval-len", "20", *QUICK[:10], "--horizon", "3",
                   "--n-starts", "5"])
    assert code == 0
    assert (root / "g" / "curves.svg").exists()
    grid_table = (root / "g" / "summary.csv").read_bytes()
    assert C.main(["report", "--curves", str(root / "g" / "curves"), "--out", "rep", "--no-chart"]) == 0
    assert (root / "rep" / "summary.csv").read_bytes() == grid_table
    assert len(grid_table.decode().splitlines()) == 5


# -- verify and timing ---------------------------------------------------------------

def test_verify_passes():
    r = run("verify")
    assert r.returncode == 0
    assert r.stdout.count("PASS") == 3


@pytest.mark.slow
def test_full_default_run_under_ten_minutes(root):
    assert C.main(["gen-data", "--steps", "20000", "--out", "full.txt"]) == 0
    t0 = time.perf_counter()
    assert C.main(["train", "--dataset", str(root / "full.txt"), "--out", "full"]) == 0
    assert time.perf_counter() - t0 < 600
    assert len((root / "full" / "diagnostics.csv").read_text().splitlines()) == 1002
