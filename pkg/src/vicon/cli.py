"""Command-line entry points: ``vicon gen-data|train|rollout|eval|plot``.

Every subcommand reads an optional JSON config file whose keys mirror its
flags; flags given on the command line win.  The resolved config is
written as ``config.json`` into the output directory, and that file can be
fed back with ``--config`` to repeat the run.  Outputs are staged in a
sibling directory and only moved into place when the command succeeds.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .checkpoint import load_model
from .dataio import load_trajectory, make_family, save_trajectory
from .metrics import MetricsReport, evaluate_rollout
from .model import ModelConfig, ViconModel
from .patching import U_X, U_Y
from .rollout import apply_drops, check_plan, execute, make_plan, save_plan
from .train import TrainConfig, load_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
REQUIRED = object()


class ConfigError(ValueError):
    """Raised with every problem found in a resolved config."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(problems))


@dataclass(frozen=True)
class Opt:
    type: type
    default: Any = REQUIRED
    help: str = ""
    choices: tuple | None = None
    check: Callable[[Any], str | None] | None = None


def positive(x):
    return None if x > 0 else "must be > 0"


def non_negative(x):
    return None if x >= 0 else "must be >= 0"


_MODEL = ModelConfig()
_TRAIN = TrainConfig()

SCHEMAS: dict[str, dict[str, Opt]] = {
    "gen-data": {
        "out": Opt(str, help="output directory"),
        "n_heat": Opt(int, 64, "number of heat trajectories", check=non_negative),
        "n_advection": Opt(int, 64, "number of advection trajectories", check=non_negative),
        "nx": Opt(int, 16, check=positive),
        "ny": Opt(int, 16, check=positive),
        "nt": Opt(int, 21, "frames per trajectory", check=positive),
        "seed": Opt(int, 0),
    },
    "train": {
        "data": Opt(str, help="directory written by gen-data"),
        "out": Opt(str, help="output directory"),
        "resume": Opt(str, "", "checkpoint to continue from"),
        "steps": Opt(int, 0, "updates to run (0 = up to total_steps)", check=non_negative),
        **{k: Opt(type(getattr(_MODEL, k)), getattr(_MODEL, k))
           for k in ("d", "n_layers", "n_heads", "d_ffn", "I", "I_min", "Rx", "Ry", "dropout",
                     "final_norm")},
        **{k: Opt(type(getattr(_TRAIN, k)), getattr(_TRAIN, k))
           for k in ("peak_lr", "final_lr", "warmup_steps", "total_steps", "weight_decay",
                     "clip_norm", "batch_size", "seed", "s_max", "prompts_per_traj",
                     "log_every")},
    },
    "rollout": {
        "checkpoint": Opt(str, help="model checkpoint"),
        "trajectory": Opt(str, help="trajectory manifest or directory"),
        "out": Opt(str, help="output directory"),
        "strategy": Opt(str, "single", choices=("single", "flexible")),
        "s_max": Opt(int, 1, "largest stride for the flexible strategy", check=positive),
        "drops": Opt(str, "none", "none | half-rate | random-K | drop:i,j,..."),
        "I0": Opt(int, 10, "number of given initial frames", check=positive),
        "D": Opt(int, 0, "examples per step (0 = model context - 1)", check=non_negative),
        "T": Opt(int, 0, "predict frames up to T-1 (0 = trajectory length)",
                 check=non_negative),
        "seed": Opt(int, 0, "seed for random drops"),
    },
    "eval": {
        "predictions": Opt(str, help="rollout output directory"),
        "trajectory": Opt(str, help="ground-truth trajectory"),
        "out": Opt(str, help="output directory"),
        "start": Opt(int, 10, "first predicted frame index", check=non_negative),
        "tke": Opt(bool, False, "also report TKE error"),
    },
    "plot": {
        "reports": Opt(list, help="one or more metrics.json files"),
        "out": Opt(str, help="output directory"),
        "metric": Opt(str, "rel_l2", choices=("rel_l2", "abs_l2")),
    },
}


# ----------------------------------------------------------------- config

def resolve_config(command: str, file_values: dict, flag_values: dict) -> dict:
    """Merge defaults, file and flags; raise ConfigError listing all problems."""
    schema = SCHEMAS[command]
    problems = []
    file_values = dict(file_values)
    if file_values.pop("command", command) != command:
        problems.append(f"config file is for another command, not {command!r}")
    for key in file_values:
        if key not in schema:
            problems.append(f"unknown key {key!r}")
    merged = {k: opt.default for k, opt in schema.items()}
    merged.update({k: v for k, v in file_values.items() if k in schema})
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    for key, opt in schema.items():
        val = merged[key]
        if val is REQUIRED:
            problems.append(f"{key}: required")
            continue
        if opt.type is float and isinstance(val, int) and not isinstance(val, bool):
            val = merged[key] = float(val)
        if opt.type is list and isinstance(val, str):
            val = merged[key] = [val]
        if not isinstance(val, opt.type) or (opt.type is int and isinstance(val, bool)):
            problems.append(f"{key}: expected {opt.type.__name__}, got {val!r}")
            continue
        if opt.choices and val not in opt.choices:
            problems.append(f"{key}: {val!r} not in {list(opt.choices)}")
        if opt.check and (msg := opt.check(val)):
            problems.append(f"{key}: {msg}")
    if not problems:
        problems += _cross_checks(command, merged)
    if problems:
        raise ConfigError(problems)
    return merged


def _cross_checks(command: str, cfg: dict) -> list[str]:
    if command == "train":
        out = []
        out += _config_errors(ModelConfig, {k: cfg[k] for k in SCHEMAS["train"]
                                            if k in ModelConfig.__dataclass_fields__})
        tc = {k: cfg[k] for k in SCHEMAS["train"] if k in TrainConfig.__dataclass_fields__}
        tc["I_min"] = cfg["I_min"]
        out += _config_errors(TrainConfig, tc)
        return out
    if command == "rollout":
        try:
            apply_drops(cfg["drops"], cfg["I0"])
        except ValueError as exc:
            return [f"drops: {exc}"]
    return []


def _config_errors(cls, values: dict) -> list[str]:
    try:
        cls(**values)
    except (ValueError, TypeError) as exc:
        msg = str(exc)
        return [m.strip() for m in msg.split(":", 1)[-1].split(";")]
    return []


# ----------------------------------------------------------- output staging

class Staging:
    """Write into a sibling temp dir; move into ``out`` only on success."""

    def __init__(self, out: str):
        self.out = Path(out)
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(prefix=self.out.name + ".partial-", dir=self.out.parent))

    def commit(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        for item in self.dir.iterdir():
            target = self.out / item.name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
            item.rename(target)
        self.dir.rmdir()

    def abort(self) -> None:
        shutil.rmtree(self.dir, ignore_errors=True)


def _write_config(path: Path, command: str, cfg: dict) -> None:
    path.write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg: dict, out: Path) -> None:
    entries = []
    for kind, n, offset in (("heat", cfg["n_heat"], 0), ("advection", cfg["n_advection"], 1)):
        for i, traj in enumerate(make_family(kind, n, cfg["seed"] * 2 + offset,
                                             cfg["nx"], cfg["ny"], cfg["nt"])):
            rel = f"{kind}_{i:04d}.json"
            save_trajectory(traj, out / rel)
            entries.append({"path": rel, "pde_tag": kind, "pde_params": traj.pde_params,
                            "seed": traj.seed})
    counts = {"heat": cfg["n_heat"], "advection": cfg["n_advection"]}
    (out / "manifest.json").write_text(json.dumps({"counts": counts, "trajectories": entries},
                                                  indent=2) + "\n")


def _read_dataset(data: str):
    root = Path(data)
    listing = json.loads((root / "manifest.json").read_text())
    return [load_trajectory(root / e["path"]) for e in listing["trajectories"]]


def cmd_train(cfg: dict, out: Path) -> None:
    trajs = _read_dataset(cfg["data"])
    if not trajs:
        raise RuntimeError(f"{cfg['data']}: dataset is empty")
    nx, ny = trajs[0].grid
    model_keys = ModelConfig.__dataclass_fields__
    model_cfg = ModelConfig(nx=nx, ny=ny, **{k: cfg[k] for k in SCHEMAS["train"]
                                             if k in model_keys})
    train_cfg = TrainConfig(I_min=cfg["I_min"], **{k: cfg[k] for k in SCHEMAS["train"]
                                                   if k in TrainConfig.__dataclass_fields__
                                                   and k != "I_min"})
    state = None
    if cfg["resume"]:
        state, ck_model, ck_train = load_checkpoint(cfg["resume"])
        if ck_model != model_cfg or ck_train != train_cfg:
            raise RuntimeError(f"{cfg['resume']}: checkpoint configuration differs from "
                               f"the requested run")
        log_src = Path(cfg["resume"]).with_name("train_log.jsonl")
        if log_src.exists():
            shutil.copy(log_src, out / "train_log.jsonl")
    train(trajs, model_cfg, train_cfg, n_steps=cfg["steps"] or None, state=state,
          log_path=out / "train_log.jsonl", checkpoint_path=out / "checkpoint.ckpt")


def cmd_rollout(cfg: dict, out: Path) -> None:
    model_cfg, params = load_model(cfg["checkpoint"])
    model = ViconModel(model_cfg, params)
    traj = load_trajectory(cfg["trajectory"])
    if traj.grid != (model_cfg.nx, model_cfg.ny):
        raise RuntimeError(f"trajectory grid {traj.grid} does not match the model's "
                           f"{(model_cfg.nx, model_cfg.ny)}")
    if traj.nt < cfg["I0"]:
        raise RuntimeError(f"trajectory has {traj.nt} frames, fewer than I0={cfg['I0']}")
    fa = apply_drops(cfg["drops"], cfg["I0"], np.random.default_rng(cfg["seed"]))
    D = cfg["D"] or model_cfg.I - 1
    T = cfg["T"] or traj.nt
    plan = make_plan(cfg["strategy"], D, T, fa, cfg["s_max"])
    problems = check_plan(plan)
    if problems:
        raise RuntimeError("planner produced an invalid plan: " + "; ".join(problems))
    result = execute(plan, {i: traj.frames[i] for i in fa}, model, traj.channel_mask)
    save_plan(plan, out / "plan.txt", comment=f"{cfg['strategy']} D={D} T={T} drops={cfg['drops']}")
    idx = sorted(result.predictions)
    frames = (np.stack([result.predictions[t] for t in idx]) if idx
              else np.zeros((0,) + traj.frames.shape[1:], np.float32))
    np.savez(out / "predictions.npz", indices=np.array(idx, dtype=np.int64),
             frames=frames.astype(np.float32), available=np.array(fa, dtype=np.int64),
             gaps=np.array(sorted(result.gaps), dtype=np.int64))


def load_predictions(path) -> dict[int, np.ndarray]:
    path = Path(path)
    if path.is_dir():
        path = path / "predictions.npz"
    with np.load(path) as z:
        return {int(t): z["frames"][k] for k, t in enumerate(z["indices"])}


def cmd_eval(cfg: dict, out: Path) -> None:
    preds = load_predictions(cfg["predictions"])
    traj = load_trajectory(cfg["trajectory"])
    bad = [t for t in preds if t >= traj.nt]
    if bad:
        raise RuntimeError(f"predicted frames {bad} lie beyond the trajectory ({traj.nt} frames)")
    mask = traj.channel_mask
    tke = cfg["tke"] and bool(mask[U_X] and mask[U_Y])
    report = evaluate_rollout(preds, traj.frames, cfg["start"], mask, tke,
                              {"trajectory": cfg["trajectory"], "predictions": cfg["predictions"]})
    report.save(out / "metrics.json")


def cmd_plot(cfg: dict, out: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for path in cfg["reports"]:
        rep = MetricsReport.load(path)
        steps = [s["step"] for s in rep.per_step]
        ax.plot(steps, [s[cfg["metric"]] for s in rep.per_step], marker="o",
                label=Path(path).parent.name or path)
    ax.set_xlabel("rollout step")
    ax.set_ylabel(cfg["metric"])
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / f"{cfg['metric']}_curve.png", dpi=120)
    plt.close(fig)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "rollout": cmd_rollout,
            "eval": cmd_eval, "plot": cmd_plot}


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vicon", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file; flags override its values")
        for key, opt in schema.items():
            flag = "--" + key.replace("_", "-")
            kw = {"dest": key, "default": None, "help": opt.help or None}
            if opt.type is bool:
                p.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
            elif opt.type is list:
                p.add_argument(flag, nargs="+", **kw)
            else:
                p.add_argument(flag, type=opt.type, **kw)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports bad flags with code 2 already
        return int(exc.code or 0)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        file_values = {}
        if args.config:
            try:
                file_values = json.loads(Path(args.config).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError([f"cannot read config {args.config}: {exc}"]) from exc
            if not isinstance(file_values, dict):
                raise ConfigError([f"{args.config}: top level must be an object"])
        cfg = resolve_config(args.command, file_values, flags)
    except ConfigError as exc:
        print(f"vicon {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    stage = Staging(cfg["out"])
    try:
        _write_config(stage.dir / "config.json", args.command, cfg)
        COMMANDS[args.command](cfg, stage.dir)
        stage.commit()
    except Exception as exc:  # noqa: BLE001 - reported and mapped to exit 3
        stage.abort()
        print(f"vicon {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
