"""Command-line front end.

Exit codes: 0 success, 2 invalid input or config, 3 numeric failure,
4 CHAOS-RISK audit verdict.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .evaluation import (evaluate_method, planner_csv_text, planner_success_curve, run_sweep,
                         subsample_trajectories, train_source)
from .io import atomic_write_text
from .lyapunov import (LyapunovOverflowError, SingularJacobianError, composite_spectrum, default_transient,
                       estimate_epsilon, theorem1_bound)
from .net import CheckpointError, Mlp
from .systems import TransitionDataset, generate_dataset, make_system, perturb_system
from .transfer import TransferredModel, fit_transfer

log = logging.getLogger("lyaptransfer")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_CHAOS = 0, 2, 3, 4


class _KVFormatter(logging.Formatter):
    def format(self, record):
        msg = record.getMessage().replace("\n", " ")
        return f"level={record.levelname} logger={record.name} msg={json.dumps(msg)}"


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_KVFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO if verbose else logging.WARNING)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _systems(cfg: RunConfig):
    src = make_system(cfg.system.name, cfg.system.params, cfg.system.settings)
    return src, perturb_system(src, cfg.system.perturbation, cfg.seed)


def _require(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"missing input file: {p}")
    return p


def _check_dims(data: TransitionDataset, cfg: RunConfig) -> None:
    sys_ = make_system(cfg.system.name, cfg.system.params, cfg.system.settings)
    if (data.state_dim, data.action_dim) != (sys_.state_dim, sys_.action_dim):
        raise ConfigError("system.name", f"dataset has state/action dims {(data.state_dim, data.action_dim)} "
                                         f"but {sys_.name} has {(sys_.state_dim, sys_.action_dim)}")


def _check_position_dims(cfg: RunConfig, state_dim: int) -> None:
    if not cfg.eval.position_dims or any(not 0 <= d < state_dim for d in cfg.eval.position_dims):
        raise ConfigError("eval.position_dims", f"need indices in [0, {state_dim})")


# -- commands -------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    src, tgt = _systems(cfg)
    d = cfg.data
    if args.role == "source":
        data = generate_dataset(src, cfg.policy_spec(), d.n_source_traj, d.source_traj_len, cfg.seed, d.noise_std)
    elif args.role == "target":
        data = generate_dataset(tgt, cfg.policy_spec(), d.n_target_traj, d.target_traj_len,
                                cfg.seed + 10_000, d.noise_std)
    else:
        data = generate_dataset(tgt, cfg.policy_spec(), d.n_test_traj, d.test_traj_len, cfg.seed + 10_000,
                                d.noise_std, first_traj_id=d.n_target_traj)
    data.meta["role"] = args.role
    data.save(args.out)
    log.info("wrote %d triples to %s (%d truncated trajectories)", len(data), args.out,
             len(data.meta["truncated"]))
    return EXIT_OK


def cmd_train_source(cfg: RunConfig, args) -> int:
    data = TransitionDataset.load(_require(args.data))
    _check_dims(data, cfg)
    model = train_source(cfg.experiment(), data, cfg.seed)
    model.eval()
    eps = estimate_epsilon(model, data)
    model.training_meta["train_eps"] = eps
    model.save(args.out)
    print(f"final_train_mse={model.training_meta['final_loss']!r} eps={eps!r}")
    return EXIT_OK


def cmd_transfer(cfg: RunConfig, args) -> int:
    method = cfg.method(args.method).validate()
    source = Mlp.load(_require(args.source))
    data = TransitionDataset.load(_require(args.data))
    fraction = cfg.transfer.fraction if args.fraction is None else args.fraction
    if fraction < 1.0:
        data = subsample_trajectories(data, fraction, cfg.seed)
    fitted = fit_transfer(method, source, None, data, seed=cfg.seed, source_ref=str(args.source))
    fitted.save(args.out)
    log.info("fitted %s on %d triples", method.kind, len(data))
    return EXIT_OK


def _audit_actions(truth, cfg: RunConfig, total: int):
    if not truth.action_dim:
        return None
    rng = np.random.default_rng([cfg.seed, 31])
    return cfg.policy_spec().sample(rng, total, truth.action_dim)


def cmd_audit(cfg: RunConfig, args) -> int:
    fitted = TransferredModel.load(_require(args.checkpoint))
    data = TransitionDataset.load(_require(args.data))
    src, tgt = _systems(cfg)
    if cfg.audit.proxy:
        if args.proxy_source is None:
            raise ConfigError("audit.proxy", "proxy audits need --proxy-source")
        truth = Mlp.load(_require(args.proxy_source))
        truth.eval()
    else:
        truth = src if cfg.audit.truth == "source" else tgt
    n_steps = cfg.audit.n_steps
    n_tr = default_transient(n_steps) if cfg.audit.n_transient is None else cfg.audit.n_transient
    x0 = data.x[0]
    acts = _audit_actions(truth, cfg, n_steps + n_tr)

    comp = fitted.composite
    net = fitted.model if comp is None else comp.source
    net.eval()
    # a proxy network has no box of its own; probe the configured system's
    bcfg = dataclasses.replace(cfg.bound_config(), region=(src.low, src.high))
    report = theorem1_bound(net, truth, data, x0, acts, n_steps, bcfg)
    out = {"bound": report.to_dict(), "method": fitted.kind}
    measured = report.lambda_model
    if comp is not None:
        comp.residual.eval()
        if comp.recurrent:
            traj = fitted.predict(x0[None], acts[None] if acts is not None else None, n_steps + n_tr)[0]
            out["composite_note"] = "recurrent residual: exponent measured on the source part only"
            out["composite_final_state"] = traj[-1].tolist()
        else:
            spectrum = composite_spectrum(comp.source, comp.residual, comp.gamma, x0, acts, n_steps, n_tr)
            out["composite_spectrum"] = spectrum.to_dict()
            measured = spectrum.max
    lam_true = report.lambda_true
    verdict = "CHAOS-RISK" if (measured is not None and measured > 0 and lam_true <= 0) else "OK"
    out["measured_max_exponent"] = measured if measured is None or math.isfinite(measured) else str(measured)
    out["bound_holds"] = bool(measured is not None and measured <= report.bound_value)
    out["verdict"] = verdict
    atomic_write_text(args.out, _dump(out))
    print(f"verdict={verdict} measured={measured!r} bound={report.bound_value!r} true={lam_true!r}")
    return EXIT_CHAOS if verdict == "CHAOS-RISK" else EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    fitted = TransferredModel.load(_require(args.checkpoint))
    test = TransitionDataset.load(_require(args.data))
    _check_position_dims(cfg, fitted.state_dim)
    s = evaluate_method(fitted, None, test, cfg.eval.eps_div, cfg.eval.position_dims, cfg.eval.horizon)
    atomic_write_text(args.out, _dump({"method": fitted.kind, "mean_divergence_time": s.mean_divergence_time,
                                       "mean_mse": s.mean_mse, "n_eval_traj": s.n_eval_traj,
                                       "divergence_times": s.divergence_times, "mses": s.mses}))
    print(f"mean_divergence_time={s.mean_divergence_time!r} mean_mse={s.mean_mse!r}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    methods = [cfg.method(k).validate() for k in cfg.eval.methods]
    _check_position_dims(cfg, make_system(cfg.system.name, cfg.system.params, cfg.system.settings).state_dim)
    res = run_sweep(methods, cfg.eval.fractions, cfg.eval.seeds, cfg.experiment(), cfg.eval.workers)
    atomic_write_text(args.out, res.to_csv_text())
    log.info("wrote %d sweep rows to %s", len(res.rows), args.out)
    return EXIT_OK


def cmd_plan(cfg: RunConfig, args) -> int:
    fitted = TransferredModel.load(_require(args.checkpoint))
    _, tgt = _systems(cfg)
    _check_position_dims(cfg, tgt.state_dim)
    rows = planner_success_curve(fitted, tgt, cfg.planner.distances, cfg.planner.trials, cfg.planner_config())
    atomic_write_text(args.out, planner_csv_text(rows))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train-source": cmd_train_source, "transfer": cmd_transfer,
            "audit": cmd_audit, "eval": cmd_eval, "sweep": cmd_sweep, "plan": cmd_plan}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lyaptransfer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="TOML run config (defaults used when omitted)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", required=True, help="output file")
        return sp

    sp = add("gen-data", "generate a transition dataset")
    sp.add_argument("--role", choices=("source", "target", "test"), default="source")
    sp = add("train-source", "train the source model")
    sp.add_argument("--data", required=True)
    sp = add("transfer", "fit a transfer method")
    sp.add_argument("--source", required=True, help="source checkpoint")
    sp.add_argument("--data", required=True, help="target dataset")
    sp.add_argument("--method", help="overrides transfer.method")
    sp.add_argument("--fraction", type=float, help="overrides transfer.fraction")
    sp = add("audit", "Lyapunov bound audit of a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="the data the model was trained on")
    sp.add_argument("--proxy-source", help="source checkpoint standing in for the true system")
    sp = add("eval", "open-loop evaluation on a test dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    add("sweep", "data-fraction sweep over methods and seeds")
    sp = add("plan", "planner success rate against goal distance")
    sp.add_argument("--checkpoint", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        return COMMANDS[args.command](cfg, args)
    except (LyapunovOverflowError, SingularJacobianError, FloatingPointError, OverflowError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
