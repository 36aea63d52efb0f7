"""Command-line entry point: ``train``, ``certify``, ``perturb`` and ``ablate``.

Exit codes: 0 success, 1 config or IO error, 2 training divergence,
3 certification failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .certify import (certify, default_magnitudes, envelope_decay_rate, summarise_iss,
                      verify_iss)
from .config import load_config, train_config_with
from .dynamics import DisturbanceModel, make_system
from .errors import CheckpointError, ConfigError, DivergenceError, SingularMetricError
from .trainer import (evaluate_episodes, evaluate_violation_rate, metrics_csv,
                      restore_models, train)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_UNCERTIFIED = 0, 1, 2, 3
CHECKPOINT_NAME = "checkpoint.crl"
log = logging.getLogger("contraction_ppo")


def _out_dir(cfg):
    path = Path(cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _load_models(ckpt_path, cfg):
    data = ckpt.load(ckpt_path)
    system = make_system(cfg.system_name, **cfg.system_params)
    if data.meta.get("system") != cfg.system_name:
        raise CheckpointError(f"checkpoint was trained on {data.meta.get('system')!r}, "
                              f"config selects {cfg.system_name!r}")
    stack, field_ = restore_models(data, system)
    return system, stack, field_


def cmd_train(args):
    cfg = load_config(args.config)
    out = _out_dir(cfg)
    ck_path = out / CHECKPOINT_NAME
    log.info("training %s for %d iterations", cfg.system_name, cfg.train.iterations)
    try:
        result = train(cfg.train, checkpoint_path=ck_path)
    except DivergenceError as exc:
        log.error("%s; last good checkpoint kept at %s", exc, ck_path)
        return EXIT_DIVERGED
    _write(out / "metrics.csv", metrics_csv(result.rows))
    log.info("wrote %s and metrics.csv (skipped degenerate samples: %d)", ck_path, result.skipped)
    return EXIT_OK


def _iss_runs(system, stack, field_, cfg, band, magnitudes, n_traj, horizon, keep_states=False):
    p = cfg.perturb
    runs = []
    for mag in magnitudes:
        if mag == 0:
            dist = DisturbanceModel()
        else:
            dist = DisturbanceModel.for_system(system, p.kind, float(mag), p.direction,
                                               onset=p.onset, duration=p.duration,
                                               frequency=p.frequency)
        runs.append(verify_iss(system, stack, field_, dist, cfg.train.alpha,
                               band["m_min"], band["m_max"],
                               n_trajectories=n_traj, horizon=horizon,
                               dt=cfg.train.dt, seed=p.seed,
                               reset_fraction=cfg.train.reset_fraction,
                               keep_states=keep_states))
    return runs


def cmd_certify(args):
    cfg = load_config(args.config)
    system, stack, field_ = _load_models(args.checkpoint, cfg)
    c = cfg.certify
    try:
        report = certify(system, stack, field_, cfg.train.alpha, cfg.train.epsilon, c.samples,
                         c.seed, c.safety_factor)
    except SingularMetricError as exc:
        log.error("%s", exc)
        return EXIT_UNCERTIFIED
    if c.iss:
        mags = [0.0, default_magnitudes(system.d_bar)[-1]]
        runs = _iss_runs(system, stack, field_, cfg, report.data["metric"], mags,
                         c.iss_trajectories, c.iss_horizon)
        report.data["iss"] = summarise_iss(runs)
    out = _out_dir(cfg)
    _write(out / "report.json", report.to_json())
    if c.residual_csv:
        _write(out / "residuals.csv", report.residual_csv(system.n))
    log.info("verdict: %s (margin %.4g, worst residual %.4g)", report.verdict,
             report.data["theorem1_margin"], report.data["sampled_worst_residual"])
    return EXIT_OK if report.verdict in ("certified", "sampled-only") else EXIT_UNCERTIFIED


def _trajectory_csv(run, k):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    n = run.x.shape[-1]
    wr.writerow(["t", "e_norm", "bound", "bound_literal"] + [f"x{i}" for i in range(n)])
    for i, t in enumerate(run.times):
        wr.writerow([repr(float(v)) for v in (t, run.errors[i, k], run.bounds[i, k],
                                              run.literal_bounds[i, k], *run.x[i, k])])
    return buf.getvalue()


def cmd_perturb(args):
    cfg = load_config(args.config)
    system, stack, field_ = _load_models(args.checkpoint, cfg)
    mags = cfg.perturb.magnitudes
    if mags is None:
        mags = default_magnitudes(system.d_bar)
    if any(m > system.d_bar for m in mags):
        raise ConfigError("perturb magnitudes must not exceed the disturbance bound")
    from .certify import analyse_samples, region_samples
    a = analyse_samples(system, stack, field_, region_samples(system, cfg.certify.samples,
                                                              cfg.certify.seed), cfg.train.alpha)
    band = {"m_min": min(field_.m_min, float(np.min(a.lam_min))),
            "m_max": max(field_.m_max, float(np.max(a.lam_max)))}
    p = cfg.perturb
    runs = _iss_runs(system, stack, field_, cfg, band, mags, p.trajectories, p.horizon,
                     keep_states=True)
    out = _out_dir(cfg)
    summary = summarise_iss(runs)
    for i, run in enumerate(runs):
        n_csv = run.errors.shape[1] if p.csv_trajectories is None else p.csv_trajectories
        for k in range(min(n_csv, run.errors.shape[1])):
            _write(out / f"trajectory_m{i}_s{k}.csv", _trajectory_csv(run, k))
        if run.magnitude == 0:
            summary[i]["decay_rates"] = [envelope_decay_rate(run.times, run.errors[:, k])
                                         for k in range(run.errors.shape[1])]
    _write(out / "perturb_summary.json",
           json.dumps({"metric_band": band, "runs": summary}, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


ABLATION_HEADER = ["setting", "magnitude", "violation_rate", "failure_rate", "mean_reward"]


def ablation_rows(system, models, cfg, magnitudes):
    rows = []
    a = cfg.ablate
    for name, (stack, field_) in models.items():
        viol = evaluate_violation_rate(field_, stack, system, cfg.train.alpha,
                                       cfg.train.epsilon, a.eval_samples, a.eval_seed)
        for mag in magnitudes:
            dist = (DisturbanceModel() if mag == 0 else
                    DisturbanceModel.for_system(system, a.kind, float(mag)))
            fail, rew = evaluate_episodes(stack, system, cfg.train.task(), a.eval_episodes,
                                          a.eval_seed, dist)
            rows.append([name, mag, viol, fail, rew])
    return rows


def cmd_ablate(args):
    cfg = load_config(args.config)
    out = _out_dir(cfg)
    models = {}
    system = None
    for name, metric in (("learned", "learned"), ("identity", "identity")):
        cached = getattr(args, f"{name}_checkpoint", None)
        if cached:
            system, stack, field_ = _load_models(cached, cfg)
        else:
            tcfg = train_config_with(cfg.train, metric=metric)
            try:
                res = train(tcfg, checkpoint_path=out / f"ablate_{name}.crl")
            except DivergenceError as exc:
                log.error("%s (%s setting)", exc, name)
                return EXIT_DIVERGED
            system, stack, field_ = res.system, res.stack, res.field
            _write(out / f"ablate_{name}_metrics.csv", metrics_csv(res.rows))
        models[name] = (stack, field_)
    mags = cfg.ablate.magnitudes
    if mags is None:
        mags = default_magnitudes(system.d_bar)
    rows = ablation_rows(system, models, cfg, mags)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(ABLATION_HEADER)
    for r in rows:
        wr.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    _write(out / "ablation.csv", buf.getvalue())
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="cppo", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="train policy and metric jointly")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("certify", help="write a certification report for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("config")
    p.set_defaults(func=cmd_certify)
    p = sub.add_parser("perturb", help="disturbed rollouts against the ISS bound")
    p.add_argument("checkpoint")
    p.add_argument("config")
    p.set_defaults(func=cmd_perturb)
    p = sub.add_parser("ablate", help="learned metric versus a fixed identity metric")
    p.add_argument("config")
    p.add_argument("--learned-checkpoint", dest="learned_checkpoint")
    p.add_argument("--identity-checkpoint", dest="identity_checkpoint")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
