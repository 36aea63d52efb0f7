import csv
import json

import numpy as np
import pytest

from contraction_ppo import cli
from contraction_ppo.config import OUTPUT_ENV, load_config, load_config_text
from contraction_ppo.errors import ConfigError
from contraction_ppo.metric import constant_metric_field
from contraction_ppo.trainer import save_models

TINY = """\
system:
  name: pendulum
train:
  iterations: {iters}
  n_envs: 4
  horizon: 8
  epochs: 1
  minibatches: 2
  policy_hidden: [8]
  value_hidden: [8]
  metric_hidden: [8]
  metric_budgets: [2.0, 2.0]
  uniform_samples: 8
certify:
  samples: 300
  iss_trajectories: 3
  iss_horizon: 0.5
perturb:
  magnitudes: [0.0, 0.5, 1.5]
  trajectories: 3
  horizon: 0.5
  csv_trajectories: 2
ablate:
  eval_episodes: 2
  eval_samples: 50
  magnitudes: [0.0, 1.0]
output_dir: {out}
"""

# closed loop A - B [kp kd] = -I
LINEAR = """\
system:
  name: linear
  params:
    A: [[-1.0, 0.0], [2.0, -0.5]]
    B: [[0.0], [1.0]]
    q_idx: [0]
    qd_idx: [1]
    disturbance_bound: 1.0
train:
  alpha: 1.0
  epsilon: 0.5
  kp: 2.0
  kd: 0.5
  policy_hidden: [4]
  value_hidden: [4]
  metric: identity
certify:
  samples: 200
  iss_trajectories: 3
  iss_horizon: 2.0
perturb:
  magnitudes: [0.0, 0.2, 0.4, 0.8]
  trajectories: 4
  horizon: 3.0
output_dir: {out}
"""


def write_cfg(tmp_path, template, name="cfg.yaml", **kw):
    kw.setdefault("out", str(tmp_path / "out"))
    p = tmp_path / name
    p.write_text(template.format(**kw))
    return p


def linear_checkpoint(tmp_path):
    cfg = load_config(write_cfg(tmp_path, LINEAR), env={})
    from contraction_ppo.trainer import build_models
    system, stack, _ = build_models(cfg.train)
    stack.policy_net.weights[-1][:] = 0.0
    stack.policy_net.biases[-1][:] = 0.0
    stack.policy_net.touch()
    field_ = constant_metric_field(np.eye(2))
    path = tmp_path / "linear.crl"
    save_models(path, cfg.train, stack, field_)
    return path, tmp_path / "cfg.yaml", cfg


def test_unknown_key_reports_line_and_path():
    with pytest.raises(ConfigError, match=r"c.yaml:4: unknown key 'train.bogus'"):
        load_config_text("system:\n  name: pendulum\ntrain:\n  bogus: 1\n", "c.yaml")


def test_schema_errors():
    with pytest.raises(ConfigError, match="system.name"):
        load_config_text("train: {}\n")
    with pytest.raises(ConfigError, match="system.name"):
        load_config_text("system:\n  params: {}\n")
    with pytest.raises(ConfigError, match="train.lr"):
        load_config_text("system: {name: pendulum}\ntrain: {lr: fast}\n")
    with pytest.raises(ConfigError, match="boolean"):
        load_config_text("system: {name: pendulum}\ntrain: {iterations: true}\n")
    with pytest.raises(ConfigError, match="duplicate"):
        load_config_text("system: {name: pendulum}\nseed: 1\nseed: 2\n")
    with pytest.raises(ConfigError, match="unknown system"):
        load_config_text("system: {name: rocket}\n")
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_config_text("system: [\n")


def test_cli_config_error_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("system:\n  name: pendulum\nwhatever: 3\n")
    assert cli.main(["train", str(p)]) == cli.EXIT_CONFIG
    assert "bad.yaml:3: unknown key 'whatever'" in capsys.readouterr().err
    assert cli.main(["train", str(tmp_path / "missing.yaml")]) == cli.EXIT_CONFIG


def test_output_dir_env_override(tmp_path):
    p = write_cfg(tmp_path, TINY, iters=0)
    assert load_config(p, env={OUTPUT_ENV: "elsewhere"}).output_dir == "elsewhere"
    assert load_config(p, env={}).output_dir == str(tmp_path / "out")


def test_train_zero_iterations_and_env(tmp_path, monkeypatch):
    p = write_cfg(tmp_path, TINY, iters=0)
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env_out"))
    assert cli.main(["train", str(p)]) == cli.EXIT_OK
    assert (tmp_path / "env_out" / cli.CHECKPOINT_NAME).exists()
    assert (tmp_path / "env_out" / "metrics.csv").exists()


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    outs = []
    for tag in ("a", "b"):
        p = write_cfg(root, TINY, name=f"{tag}.yaml", iters=2, out=str(root / tag))
        assert cli.main(["train", str(p)]) == cli.EXIT_OK
        code = cli.main(["certify", str(root / tag / cli.CHECKPOINT_NAME), str(p)])
        outs.append((root / tag, p, code))
    return outs


def test_train_and_certify_are_byte_identical(tiny_run):
    (a, _, ca), (b, _, cb) = tiny_run
    for name in (cli.CHECKPOINT_NAME, "metrics.csv", "report.json", "residuals.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert ca == cb


def test_untrained_checkpoint_is_not_certified(tiny_run):
    out, _, code = tiny_run[0]
    rep = json.loads((out / "report.json").read_text())
    assert code == cli.EXIT_UNCERTIFIED
    assert rep["verdict"] == "failed"
    assert rep["iss"] is not None and len(rep["iss"]) == 2
    rows = list(csv.reader(open(out / "metrics.csv")))
    assert len(rows) == 3


def test_certify_rejects_mismatched_system(tiny_run, tmp_path):
    out, _, _ = tiny_run[0]
    cfg = write_cfg(tmp_path, LINEAR)
    assert cli.main(["certify", str(out / cli.CHECKPOINT_NAME), str(cfg)]) == cli.EXIT_CONFIG


def test_certify_corrupt_checkpoint(tmp_path):
    p = write_cfg(tmp_path, TINY, iters=0)
    bad = tmp_path / "bad.crl"
    bad.write_bytes(b"not a checkpoint")
    assert cli.main(["certify", str(bad), str(p)]) == cli.EXIT_CONFIG


def test_linear_checkpoint_certifies(tmp_path):
    ck, cfg_path, _ = linear_checkpoint(tmp_path)
    assert cli.main(["certify", str(ck), str(cfg_path)]) == cli.EXIT_OK
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    assert rep["sampled_worst_residual"] == pytest.approx(-1.0, abs=1e-9)
    assert rep["violation_fraction"] == 0.0
    assert rep["verdict"] in ("certified", "sampled-only")
    assert all(r["clean_pass"] == r["trajectories"] == 3 for r in rep["iss"])


def test_perturb_outputs(tmp_path):
    ck, cfg_path, cfg = linear_checkpoint(tmp_path)
    assert cli.main(["perturb", str(ck), str(cfg_path)]) == cli.EXIT_OK
    out = tmp_path / "out"
    summary = json.loads((out / "perturb_summary.json").read_text())
    runs = summary["runs"]
    assert [r["magnitude"] for r in runs] == [0.0, 0.2, 0.4, 0.8]
    worst = [r["max_error"] for r in runs]
    assert all(a <= b + 1e-12 for a, b in zip(worst, worst[1:]))
    assert len(runs[0]["decay_rates"]) == 4
    files = sorted(out.glob("trajectory_m*_s*.csv"))
    assert len(files) == 16
    header = files[0].read_text().splitlines()[0]
    assert header == "t,e_norm,bound,bound_literal,x0,x1"


def test_perturb_rejects_magnitude_above_bound(tmp_path):
    ck, cfg_path, _ = linear_checkpoint(tmp_path)
    text = cfg_path.read_text().replace("[0.0, 0.2, 0.4, 0.8]", "[0.5, 1.5]")
    cfg_path.write_text(text)
    assert cli.main(["perturb", str(ck), str(cfg_path)]) == cli.EXIT_CONFIG


def test_ablation_rows_from_cached_checkpoints(tiny_run, tmp_path):
    out, p, _ = tiny_run[0]
    ck = str(out / cli.CHECKPOINT_NAME)
    cfg = load_config(p, env={OUTPUT_ENV: str(tmp_path / "abl")})
    (tmp_path / "abl.yaml").write_text(p.read_text().replace(str(out), str(tmp_path / "abl")))
    assert cli.main(["ablate", str(tmp_path / "abl.yaml"), "--learned-checkpoint", ck,
                     "--identity-checkpoint", ck]) == cli.EXIT_OK
    rows = list(csv.reader(open(tmp_path / "abl" / "ablation.csv")))
    assert rows[0] == cli.ABLATION_HEADER
    assert len(rows) - 1 == 2 * len(cfg.ablate.magnitudes)
    assert {r[0] for r in rows[1:]} == {"learned", "identity"}
