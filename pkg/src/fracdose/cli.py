"""Command-line front end.

    fracdose simulate         roll out named policies and write trajectory CSVs
    fracdose sweep-thresholds resistant-fraction threshold grid search
    fracdose train            train a Double DQN agent
    fracdose report           collect run directories into analysis CSVs
    fracdose delta-sweep      best trained cost per action interval

Every command writes its outputs plus one ``manifest.json`` into ``--out``.
Flags override the config file: ``--mu`` sets the fractional order,
``--delta`` the action interval and ``--seed`` the training seed.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import subprocess
import sys
import time
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (
    ConstantController,
    PulsingController,
    ScheduleController,
    evaluate_policy,
    pulse_frequency,
    sweep_thresholds,
)
from .dqn import DQNConfig, DQNTrainer, GreedyController, load_network, save_checkpoint
from .env import EnvConfig, episode_cost, read_trajectory_csv, write_trajectory_csv
from .model import ModelParams

log = logging.getLogger("fracdose")

MANIFEST = "manifest.json"


class CliError(Exception):
    """User-facing failure: reported on stderr with exit status 2."""


# -- configuration -----------------------------------------------------------

def default_config() -> dict:
    text = resources.files("fracdose").joinpath("configs/default.json").read_text()
    return json.loads(text)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | None) -> dict:
    """Defaults overlaid with a config file.  A manifest is accepted too:
    its resolved config is reused, which is how runs are repeated."""
    cfg = default_config()
    if path is None:
        return cfg
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from None
    if "command" in data and "config" in data:
        data = data["config"]
    return _merge(cfg, data)


def _apply_flags(cfg: dict, args) -> dict:
    cfg = copy.deepcopy(cfg)
    mus = getattr(args, "mu", None)
    if mus:
        cfg["model"]["mu"] = mus[0]
        cfg["simulate"]["mu"] = list(mus)
    deltas = getattr(args, "delta", None)
    if deltas:
        cfg["env"]["delta"] = deltas[0]
        cfg["delta_sweep"]["deltas"] = list(deltas)
    if getattr(args, "seed", None) is not None:
        cfg["dqn"]["seed"] = args.seed
    return cfg


def model_params(cfg: dict) -> ModelParams:
    try:
        return ModelParams.from_dict(cfg["model"])
    except (ValueError, TypeError) as exc:
        raise CliError(f"bad model config: {exc}") from None


def env_config(cfg: dict, **changes) -> EnvConfig:
    try:
        env = EnvConfig.from_dict(cfg["env"], params=model_params(cfg))
        return env.replace(**changes) if changes else env
    except (ValueError, TypeError) as exc:
        raise CliError(f"bad env config: {exc}") from None


def dqn_config(cfg: dict) -> DQNConfig:
    try:
        return DQNConfig.from_dict(cfg["dqn"])
    except (ValueError, TypeError) as exc:
        raise CliError(f"bad dqn config: {exc}") from None


def _single(values, name: str):
    if values and len(values) > 1:
        raise CliError(f"this command takes a single --{name}")


# -- manifests -----------------------------------------------------------------

def code_version() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out: Path, command: str, argv: list[str], cfg: dict, started: str,
                   outputs: list[str], records: list[dict]) -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "config": cfg,
        "seed": cfg["dqn"]["seed"],
        "version": code_version(),
        "started": started,
        "finished": _now(),
        "outputs": sorted(outputs),
        "records": records,
    }
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_manifest(run_dir: Path) -> dict:
    path = run_dir / MANIFEST
    if not path.exists():
        raise CliError(f"{run_dir}: no {MANIFEST}")
    try:
        data = json.loads(path.read_text())
    except ValueError as exc:
        raise CliError(f"{path}: unreadable manifest ({exc})") from None
    for key in ("command", "config", "records"):
        if key not in data:
            raise CliError(f"{path}: manifest lacks {key!r}")
    return data


# -- policies ------------------------------------------------------------------

def make_controller(spec: str):
    """``constant:U``, ``pulsing:LO,HI``, ``dqn:CHECKPOINT`` or ``schedule:TRAJECTORY_CSV``."""
    kind, _, arg = spec.partition(":")
    try:
        if kind == "constant":
            return ConstantController(int(arg))
        if kind == "pulsing":
            lo, hi = (float(v) for v in arg.split(","))
            return PulsingController(lo, hi)
        if kind == "dqn":
            return GreedyController(load_network(arg))
        if kind == "schedule":
            return ScheduleController(read_trajectory_csv(arg).controls.astype(int))
    except (ValueError, OSError) as exc:
        raise CliError(f"bad policy spec {spec!r}: {exc}") from None
    raise CliError(f"unknown policy {spec!r}; use constant:U, pulsing:LO,HI, dqn:PATH or schedule:PATH")


def _slug(spec: str) -> str:
    kind, _, arg = spec.partition(":")
    if kind in ("dqn", "schedule"):
        arg = Path(arg).stem
    return (kind + "_" + arg.replace(",", "-")).strip("_")


def rollout_record(ev, policy: str, env: EnvConfig, path: str) -> dict:
    return {
        "policy": policy,
        "mu": env.mu,
        "delta": env.delta,
        "cost": ev.cost,
        "steps": ev.steps,
        "reason": ev.reason,
        "mean_phi": ev.mean_phi,
        "toggles": ev.toggles,
        "trajectory": path,
    }


# -- commands ------------------------------------------------------------------

def cmd_simulate(args, cfg: dict, out: Path) -> tuple[list[str], list[dict]]:
    policies = args.policy or cfg["simulate"]["policies"]
    mus = cfg["simulate"]["mu"] if args.mu else cfg["simulate"].get("mu") or [cfg["model"]["mu"]]
    _single(args.delta, "delta")
    controllers = {spec: make_controller(spec) for spec in policies}
    outputs, records = [], []
    for mu in mus:
        env = env_config(cfg, mu=float(mu))
        for spec, ctrl in controllers.items():
            ev = evaluate_policy(ctrl, env)
            name = f"traj_{_slug(spec)}_mu{float(mu):g}.csv"
            write_trajectory_csv(ev.trajectory, out / name)
            outputs.append(name)
            records.append(rollout_record(ev, spec, env, name))
            log.info("%s mu=%g cost=%.6f steps=%d", spec, mu, ev.cost, ev.steps)
    _write_rows(out / "summary.csv", records)
    outputs.append("summary.csv")
    return outputs, records


def cmd_sweep(args, cfg: dict, out: Path) -> tuple[list[str], list[dict]]:
    _single(args.mu, "mu")
    _single(args.delta, "delta")
    sw = cfg["sweep"]
    env = env_config(cfg)
    res = sweep_thresholds(env.params, sw["grid_lo"], sw["grid_hi"], sw["step"], cfg=env,
                           workers=int(sw.get("workers", 1)))
    res.write_csv(out / "sweep.csv")
    best = {"phi_l": res.phi_low, "phi_h": res.phi_high, "cost": res.cost}
    _write_rows(out / "sweep_best.csv", [best])
    log.info("best thresholds (%.2f, %.2f) cost %.6f", res.phi_low, res.phi_high, res.cost)
    return ["sweep.csv", "sweep_best.csv"], [dict(best, mu=env.mu, delta=env.delta)]


def _train_one(env: EnvConfig, dqn: DQNConfig, out: Path, checkpoint_every=None, tag: str = ""):
    trainer = DQNTrainer(env, dqn)
    ckpt_dir = out / f"checkpoints{tag}" if checkpoint_every else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(exist_ok=True)
    t0 = time.time()

    def progress(rec):
        log.debug("episode %d step %d cost %.4f eps %.3f", rec.episode, rec.end_step, rec.cost, rec.epsilon)

    trainer.train(checkpoint_every=checkpoint_every, checkpoint_dir=ckpt_dir, progress=progress)
    log.info("trained %d steps in %.0f s", trainer.steps, time.time() - t0)
    ev = evaluate_policy(GreedyController(trainer.online), env)
    return trainer, ev


def cmd_train(args, cfg: dict, out: Path) -> tuple[list[str], list[dict]]:
    _single(args.mu, "mu")
    _single(args.delta, "delta")
    env, dqn = env_config(cfg), dqn_config(cfg)
    trainer, ev = _train_one(env, dqn, out, cfg["train"].get("checkpoint_every"))
    save_checkpoint(trainer, out / "checkpoint.npz", include_buffer=True)
    trainer.log.write_csv(out / "training_log.csv")
    write_trajectory_csv(ev.trajectory, out / "greedy.csv")
    outputs = ["checkpoint.npz", "training_log.csv", "greedy.csv"]
    outputs += [str(Path(p).relative_to(out)) for _, p in trainer.log.checkpoints]
    rec = rollout_record(ev, "dqn", env, "greedy.csv")
    rec["seed"] = dqn.seed
    log.info("greedy cost %.6f", ev.cost)
    return outputs, [rec]


def sample_hyperparameters(ranges: dict, rng: np.random.Generator) -> dict:
    """One random configuration from the search ranges (log-uniform learning rate)."""
    lo, hi = ranges["learning_rate"]
    return {
        "batch_size": int(rng.choice(ranges["batch_size"])),
        "epsilon_floor": float(rng.uniform(*ranges["epsilon_floor"])),
        "learning_rate": float(math.exp(rng.uniform(math.log(lo), math.log(hi)))),
        "target_update_interval": int(rng.choice(ranges["target_update_interval"])),
    }


def cmd_delta_sweep(args, cfg: dict, out: Path) -> tuple[list[str], list[dict]]:
    _single(args.mu, "mu")
    ds = cfg["delta_sweep"]
    deltas = [float(d) for d in ds["deltas"]]
    if not deltas or min(deltas) <= 0:
        raise CliError("delta list must be nonempty and positive")
    base = dqn_config(cfg)
    rng = np.random.Generator(np.random.PCG64(base.seed))
    runs = []
    for delta in deltas:
        horizon = max(1, int(round(ds["horizon_hours"] / delta)))
        env = env_config(cfg, delta=delta, horizon=horizon)
        for i in range(int(ds["runs"])):
            hp = sample_hyperparameters(ds, rng)
            dqn = base.replace(seed=base.seed + i, **hp)
            _, ev = _train_one(env, dqn, out)
            runs.append({"delta": delta, "run": i, "seed": dqn.seed, **hp, "cost": ev.cost,
                         "steps": ev.steps, "mean_phi": ev.mean_phi})
            log.info("delta=%g run %d cost %.6f", delta, i, ev.cost)
    best = []
    for delta in deltas:
        rows = [r for r in runs if r["delta"] == delta]
        top = min(rows, key=lambda r: (r["cost"], r["run"]))
        best.append({"delta": delta, "best_cost": top["cost"], "best_run": top["run"], "runs": len(rows)})
    _write_rows(out / "delta_runs.csv", runs)
    _write_rows(out / "delta_best.csv", best)
    return ["delta_runs.csv", "delta_best.csv"], best


def _cost_from_csv(path: Path) -> float:
    return episode_cost(read_trajectory_csv(path))


def cmd_report(args, cfg: dict, out: Path) -> tuple[list[str], list[dict]]:
    if not args.runs:
        raise CliError("report needs at least one run directory")
    window = int(cfg["report"]["window"])
    costs, freq, delta_rows = [], [], []
    for run in args.runs:
        run_dir = Path(run)
        man = read_manifest(run_dir)
        if man["command"] == "delta-sweep":
            for r in man["records"]:
                delta_rows.append({"run": str(run_dir), **r})
            continue
        if man["command"] not in ("simulate", "train"):
            continue
        for r in man["records"]:
            path = run_dir / r["trajectory"]
            if not path.exists():
                raise CliError(f"{run_dir}: missing trajectory {r['trajectory']}")
            traj = read_trajectory_csv(path)
            recomputed = episode_cost(traj)
            if abs(recomputed - r["cost"]) > 1e-9:
                raise CliError(f"{path}: manifest cost {r['cost']} != trajectory cost {recomputed}")
            costs.append({"run": str(run_dir), "policy": r["policy"], "mu": r["mu"],
                          "delta": r["delta"], "cost": recomputed, "mean_phi": r["mean_phi"],
                          "trajectory": str(path)})
            mids, f = pulse_frequency(traj.controls, r["delta"], window)
            for t, v in zip(mids, f):
                freq.append({"run": str(run_dir), "policy": r["policy"], "mu": r["mu"],
                             "t_mid": float(t), "toggles_per_hour": float(v)})
    outputs = []
    if costs:
        _write_rows(out / "cost_by_policy.csv", [{k: v for k, v in c.items() if k != "mean_phi"}
                                                 for c in costs])
        _write_rows(out / "pulse_frequency.csv", freq)
        phi_rows = [{"run": c["run"], "policy": c["policy"], "mu": c["mu"],
                     "mean_phi_whole_episode": c["mean_phi"]} for c in costs]
        _write_rows(out / "mean_phi.csv", phi_rows)
        outputs += ["cost_by_policy.csv", "pulse_frequency.csv", "mean_phi.csv"]
    if delta_rows:
        _write_rows(out / "delta_best.csv", delta_rows)
        outputs.append("delta_best.csv")
    notes = [
        "# report",
        "",
        f"pulse frequency: action toggles per hour in sliding windows of {window} steps, "
        "reported at the window midpoint",
        "mean_phi: whole-episode time average of R/(S+R) over the grid states",
        "costs are recomputed from the trajectory CSVs as log N(T)/N(0)",
    ]
    (out / "report.md").write_text("\n".join(notes) + "\n")
    outputs.append("report.md")
    return outputs, costs + delta_rows


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


COMMANDS = {
    "simulate": cmd_simulate,
    "sweep-thresholds": cmd_sweep,
    "train": cmd_train,
    "report": cmd_report,
    "delta-sweep": cmd_delta_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config (or a manifest to re-run)")
    common.add_argument("--seed", type=int, help="training seed")
    common.add_argument("--out", metavar="DIR", required=True, help="output directory")
    common.add_argument("--mu", type=float, action="append", help="fractional order (repeatable for simulate)")
    common.add_argument("--delta", type=float, action="append",
                        help="action interval in hours (repeatable for delta-sweep)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="fracdose", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", parents=[common], help="roll out policies")
    p.add_argument("--policy", action="append",
                   help="constant:U | pulsing:LO,HI | dqn:CHECKPOINT | schedule:TRAJECTORY_CSV")
    sub.add_parser("sweep-thresholds", parents=[common], help="threshold grid search")
    sub.add_parser("train", parents=[common], help="train a Double DQN agent")
    p = sub.add_parser("report", parents=[common], help="analysis CSVs from run directories")
    p.add_argument("runs", nargs="*", metavar="RUN_DIR")
    sub.add_parser("delta-sweep", parents=[common], help="best cost per action interval")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    started = _now()
    try:
        cfg = _apply_flags(load_config(args.config), args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if (out / MANIFEST).exists():
            (out / MANIFEST).unlink()
        outputs, records = COMMANDS[args.command](args, cfg, out)
        write_manifest(out, args.command, argv, cfg, started, outputs, records)
    except CliError as exc:
        print(f"fracdose {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure becomes a nonzero exit
        log.debug("traceback", exc_info=True)
        print(f"fracdose {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0
