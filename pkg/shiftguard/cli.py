"""
Command-Line Interface.

Subcommands that train the surrogates, run closed-loop episodes in the
adapted, unadapted and PSO modes, check a residual bound by Monte Carlo,
draw trajectory figures and print the configuration defaults.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from shiftguard import relu_net
from shiftguard.adapt import MODES, run_episode
from shiftguard.config import ExperimentConfig, default_config, load_config, to_toml
from shiftguard.deep_sdp import FixedActionOptions, bound_residual_fixed_action
from shiftguard.environments import ClosedLoopPlanner, collect_transitions, make_env, make_pi_star, sample_reference
from shiftguard.environments.acc import SIMPLIFIED_MODEL_WARNING
from shiftguard.errors import ConfigError, ShiftGuardError
from shiftguard.gaussian import Ellipsoid, sample_in_ellipsoid, sample_on_ellipsoid_boundary
from shiftguard.plotting import plot_episodes
from shiftguard.pso import calibrate_iterations
from shiftguard.relu_net import TrainReport, train_cov, train_deep, train_joint_embedded, train_mean
from shiftguard.surrogate import SurrogatePair

logger = logging.getLogger(__name__)

CONTAINMENT_TOL = 1e-6
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def _write_rows(path: Path, header: Sequence[str], rows: List[Dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile("w", newline="", dir=path.parent, delete=False, suffix=".tmp") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(header), restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    os.replace(handle.name, path)


def _config_from_args(args) -> ExperimentConfig:
    if args.config:
        config = load_config(args.config, args.experiment)
    else:
        config = default_config(args.experiment or "linear_car")
    if args.output_dir:
        config = config.model_copy(update={"output_dir": args.output_dir})
    if config.experiment == "acc":
        logger.warning(SIMPLIFIED_MODEL_WARNING)
    return config


# ---------------------------------------------------------------------------
# train-surrogate
# ---------------------------------------------------------------------------


def train_surrogates(config: ExperimentConfig) -> SurrogatePair:
    """
    Collect deployment transitions and fit every configured surrogate.

    Writes the model JSON files, dataset.csv and training_report.csv to the
    models directory.
    """
    env = make_env(config.experiment, deployment=True, seed=config.dataset.seed, path=config.path)
    pi_star = make_pi_star(env)
    data = collect_transitions(
        env,
        pi_star,
        config.dataset.count,
        np.random.default_rng(config.dataset.seed),
        episode_length=config.dataset.episode_length,
        uniform_fraction=config.dataset.uniform_fraction,
        dither=config.dataset.dither,
    )
    models_dir = config.models_dir
    data.to_csv(models_dir / "dataset.csv")

    reports: List[TrainReport] = []
    spec = config.surrogate
    embedder = None
    if spec.embedder_dims:
        n, m = env.state_dim, env.action_dim
        dims_embedder = [n, *spec.embedder_dims]
        dims_mean = [spec.embedder_dims[-1] + m, *spec.mean_hidden, n]
        embedder, mean_net, report = train_joint_embedded(data, dims_embedder, dims_mean, config.training)
    else:
        mean_net, report = train_mean(data, config.training, spec.mean_hidden)
    reports.append(report)
    cov_net, report = train_cov(data, mean_net, config.training, spec.cov_hidden, embedder)
    reports.append(report)
    deep_net = None
    if spec.deep_hidden:
        deep_net, report = train_deep(data, config.training, spec.deep_hidden)
        reports.append(report)

    surrogates = SurrogatePair(mean_net, cov_net, embedder, deep_net)
    surrogates.save_dir(models_dir)
    rows = [row for report in reports for row in report.rows()]
    _write_rows(models_dir / "training_report.csv", ["network", "epoch", "train_loss", "val_loss"], rows)
    logger.info(f"Trained surrogates written to {models_dir}")
    return surrogates


def cmd_train_surrogate(args) -> int:
    train_surrogates(_config_from_args(args))
    return 0


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _reference(config: ExperimentConfig) -> np.ndarray:
    train_env = make_env(config.experiment, deployment=False, path=config.path)
    return sample_reference(train_env, make_pi_star(train_env), config.horizon)


def _planner(config: ExperimentConfig) -> Optional[ClosedLoopPlanner]:
    if config.adapt.target != "replan":
        return None
    train_env = make_env(config.experiment, deployment=False, path=config.path)
    return ClosedLoopPlanner(train_env, make_pi_star(train_env))


def run_seed(config: ExperimentConfig, mode: str, seed: int, pso_iterations: Optional[int] = None) -> Dict:
    """
    One episode of ``mode`` on the deployment environment seeded with ``seed``.

    Writes episodes/<mode>_seed<seed>.csv and returns the summary row, with
    an ``error`` entry when the episode aborted.
    """
    surrogates = SurrogatePair.load_dir(config.models_dir)
    env = make_env(config.experiment, deployment=True, seed=seed, path=config.path)
    pso_cfg = config.pso
    if pso_iterations is not None:
        pso_cfg = pso_cfg.model_copy(update={"iterations": pso_iterations})
    log = run_episode(
        env,
        surrogates,
        make_pi_star(env),
        _reference(config),
        confidence=config.confidence,
        delta=config.delta,
        horizon=config.horizon,
        mode=mode,
        options=config.adapt_options(),
        pso_cfg=pso_cfg,
        seed=seed,
        planner=_planner(config),
    )
    log.to_csv(config.episodes_dir / f"{mode}_seed{seed}.csv")
    row = log.summary(seed)
    if log.error is not None:
        row["error"] = log.error
    return row


def _calibrated_pso_iterations(config: ExperimentConfig, budget_ms: float) -> int:
    surrogates = SurrogatePair.load_dir(config.models_dir)
    env = make_env(config.experiment, deployment=True, path=config.path)
    reference = _reference(config)
    state = reference[0]
    target = reference[min(1, len(reference) - 1)]

    def objective(action):
        return float(np.linalg.norm(target - surrogates.predict_mean(state, action)))

    return calibrate_iterations(objective, config.pso, budget_ms / 1000.0, env.lower, env.upper)


def cmd_run(args) -> int:
    config = _config_from_args(args)
    if args.seeds:
        config = config.model_copy(update={"seeds": args.seeds})
    pso_iterations = None
    if args.mode == "pso" and args.pso_budget_ms is not None:
        pso_iterations = _calibrated_pso_iterations(config, args.pso_budget_ms)

    if config.workers > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(run_seed, config, args.mode, seed, pso_iterations) for seed in config.seeds]
            rows = [future.result() for future in futures]
    else:
        rows = [run_seed(config, args.mode, seed, pso_iterations) for seed in config.seeds]

    header = ["seed", "mean_residual", "max_residual"]
    if any("min_d_rel" in row for row in rows):
        header.append("min_d_rel")
    header.append("total_solve_ms")
    failures = [row for row in rows if "error" in row]
    summary = [{k: v for k, v in row.items() if k in header} for row in rows]
    _write_rows(Path(config.output_dir) / f"summary_{args.mode}.csv", header, summary)
    for row in failures:
        logger.error(f"Seed {row['seed']} aborted: {row['error']}")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# verify-bound
# ---------------------------------------------------------------------------


class RegionDocument(BaseModel):
    center: List[float]
    shape: List[List[float]]

    model_config = ConfigDict(extra="forbid")

    def ellipsoid(self) -> Ellipsoid:
        return Ellipsoid(np.array(self.center), np.array(self.shape))


class RegionSpec(BaseModel):
    """Input regions and target of a bound check."""

    model_config = ConfigDict(extra="forbid")

    state: RegionDocument
    action: RegionDocument
    target: List[float]


def load_region_spec(path) -> RegionSpec:
    """
    Raises:
        ConfigError: If the file is missing or not a valid region document
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"region file not found: {path}")
    try:
        return RegionSpec.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValidationError) as exc:
        raise ConfigError(f"malformed region spec {path}: {exc}")


def verify_bound(net, spec: RegionSpec, samples: int, seed: int, options: Optional[FixedActionOptions] = None) -> Dict:
    """
    Certify a residual bound and count Monte-Carlo samples falling outside it.

    Half of the states and actions are drawn from the region interiors and
    half from their boundaries.
    """
    try:
        state_region, action_region = spec.state.ellipsoid(), spec.action.ellipsoid()
    except ShiftGuardError as exc:
        raise ConfigError(f"malformed region spec: {exc.detail}")
    if state_region.dim + action_region.dim != net.input_dim or len(spec.target) != net.output_dim:
        raise ConfigError(
            f"region spec ({state_region.dim} + {action_region.dim} -> {len(spec.target)}) "
            f"does not fit the network ({net.input_dim} -> {net.output_dim})"
        )
    bound = bound_residual_fixed_action(net, state_region, action_region, spec.target, options)
    rng = np.random.default_rng(seed)
    inner = samples // 2
    states = np.vstack([
        sample_in_ellipsoid(state_region, rng, inner),
        sample_on_ellipsoid_boundary(state_region, rng, samples - inner),
    ])
    actions = np.vstack([
        sample_in_ellipsoid(action_region, rng, inner),
        sample_on_ellipsoid_boundary(action_region, rng, samples - inner),
    ])
    residuals = net.predict(np.hstack([states, actions])) - np.asarray(spec.target)
    forms = bound.ellipsoid.quadratic_form(residuals)
    return {
        "samples": int(samples),
        "violations": int(np.sum(forms > 1.0 + CONTAINMENT_TOL)),
        "max_quadratic_form": float(np.max(forms)),
        "log_det_shape": bound.log_det_shape,
        "solve_ms": 1000.0 * bound.solve_time_s,
    }


def cmd_verify_bound(args) -> int:
    spec = load_region_spec(args.region)
    net = relu_net.load(args.model)
    report = verify_bound(net, spec, args.samples, args.seed, FixedActionOptions(use_interval_bounds=args.interval_bounds))
    for key, value in report.items():
        print(f"{key}: {value}")
    if report["violations"]:
        logger.error(f"{report['violations']} of {report['samples']} residuals fall outside the bound")
        return 1
    return 0


# ---------------------------------------------------------------------------
# plot / config
# ---------------------------------------------------------------------------


def cmd_plot(args) -> int:
    for path in plot_episodes(args.episodes, args.out, args.labels):
        print(path)
    return 0


def cmd_config(args) -> int:
    if not args.print_defaults:
        raise ConfigError("nothing to do, pass --print-defaults")
    sys.stdout.write(to_toml(default_config(args.experiment or "linear_car")))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shiftguard", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    def with_config(sub):
        sub.add_argument("--config", help="dotted-key TOML file")
        sub.add_argument("--experiment", choices=["dubins", "linear_car", "acc"])
        sub.add_argument("--output-dir", dest="output_dir")

    train = commands.add_parser("train-surrogate", help="collect deployment data and train surrogates")
    with_config(train)
    train.set_defaults(handler=cmd_train_surrogate)

    run = commands.add_parser("run", help="run closed-loop episodes")
    with_config(run)
    run.add_argument("--mode", choices=MODES, default="adapted")
    run.add_argument("--seeds", type=int, nargs="+")
    run.add_argument("--pso-budget-ms", dest="pso_budget_ms", type=float,
                     help="calibrate PSO iterations to this per-step wall time")
    run.set_defaults(handler=cmd_run)

    verify = commands.add_parser("verify-bound", help="certify a residual bound and check it by sampling")
    verify.add_argument("--model", required=True)
    verify.add_argument("--region", required=True)
    verify.add_argument("--samples", type=int, default=10000)
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--interval-bounds", dest="interval_bounds", action="store_true")
    verify.set_defaults(handler=cmd_verify_bound)

    plot = commands.add_parser("plot", help="draw state trajectories from episode CSVs")
    plot.add_argument("episodes", nargs="+")
    plot.add_argument("--labels", nargs="+")
    plot.add_argument("--out", required=True)
    plot.set_defaults(handler=cmd_plot)

    config = commands.add_parser("config", help="print configuration defaults")
    config.add_argument("--print-defaults", dest="print_defaults", action="store_true")
    config.add_argument("--experiment", choices=["dubins", "linear_car", "acc"])
    config.set_defaults(handler=cmd_config)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        return args.handler(args)
    except (ConfigError, ValidationError, FileNotFoundError) as exc:
        logger.error(f"Configuration error: {exc}")
        return 2
    except ShiftGuardError as exc:
        logger.error(f"{type(exc).__name__}: {exc.detail}")
        return 1
