"""Command-line entry point: ``hhi-idd <command> ...``.

Every command accepts ``--config FILE``, a plain ``key=value`` file whose
keys are the command's long option names (dashes or underscores); flags
given on the command line win. Logs go to stderr, data only to files.
Exit codes: 0 success, 1 runtime failure, 2 bad input.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError

log = logging.getLogger("hhi_idd")

PREDICTION_INFO = "prediction.json"


# --- run configuration ---------------------------------------------------------

@dataclass
class RunConfig:
    """Flat ``key=value`` settings of one command invocation."""

    command: str
    values: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"command={self.command}"]
        lines += [f"{k}={_fmt_value(v)}" for k, v in sorted(self.values.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, where: str = "<config>") -> "RunConfig":
        values = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{where}:{n}: expected key=value, got {raw!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            if not k:
                raise ConfigError(f"{where}:{n}: empty key")
            values[k.replace("-", "_")] = v
        command = values.pop("command", "")
        return cls(command, values)


def _fmt_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _ratios(s: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"split ratios must be three comma-separated numbers, got {s!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"split ratios must be three comma-separated numbers, got {s!r}")
    return parts


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, argv, args):
    """Re-parse with defaults taken from ``args.config``; explicit flags still win."""
    cfg = RunConfig.from_text(Path(args.config).read_text(encoding="utf-8"), args.config)
    if cfg.command and cfg.command != args.command:
        raise ConfigError(f"{args.config} is for command {cfg.command!r}, not {args.command!r}")
    actions = {a.dest: a for a in sub._actions if a.option_strings}
    defaults = {}
    for key, raw in cfg.values.items():
        act = actions.get(key)
        if act is None or key in ("config", "help"):
            raise ConfigError(f"{args.config}: unknown setting {key!r} for {args.command}")
        if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = _parse_bool(raw)
        elif act.type is not None:
            try:
                defaults[key] = act.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"{args.config}: bad value for {key}: {exc}") from None
        else:
            defaults[key] = raw
        if act.choices is not None and defaults[key] not in act.choices:
            raise ConfigError(f"{args.config}: {key} must be one of {sorted(act.choices)}")
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _log_config(args) -> None:
    values = {k: v for k, v in vars(args).items() if k not in ("command", "func")}
    text = RunConfig(args.command, values).to_text()
    for line in text.splitlines():
        log.info("config %s", line)


# --- commands --------------------------------------------------------------------

def cmd_inspect(args) -> int:
    from .bvh import read_bvh, source_fps

    h, m = read_bvh(args.file)
    try:
        fps = source_fps(m.frame_time)
    except InputError:
        fps = round(1.0 / m.frame_time, 3)
    if args.json:
        summary = {
            "joints": len(h), "frames": m.num_frames, "fps": fps, "frame_time": m.frame_time,
            "channels": h.num_channels, "end_sites": len(h.end_sites),
            "tree": [{"name": j.name, "parent": j.parent, "channels": len(j.channels),
                      "rotation_order": j.rotation_order} for j in h.joints],
        }
        print(json.dumps(summary, indent=2))
        return 0
    print(f"joints: {len(h)}, frames: {m.num_frames}, fps: {fps}")
    depth = {}
    for i, j in enumerate(h.joints):
        depth[i] = 0 if j.parent < 0 else depth[j.parent] + 1
        print(f"{'  ' * depth[i]}{j.name} ({len(j.channels)} channels, {j.rotation_order})")
    print(f"channels: {h.num_channels}, end sites: {len(h.end_sites)}")
    return 0


def cmd_synth(args) -> int:
    from .dataset import synth_coupled, write_raw_dir

    pairs = synth_coupled(args.seed, args.clips, args.len, args.joints, args.delay, args.noise)
    write_raw_dir(pairs, args.out_dir)
    log.info("wrote %d synthetic takes to %s", len(pairs), args.out_dir)
    return 0


def cmd_prepare(args) -> int:
    from .dataset import load_raw_dir, split_by_participant, windows_from_pair, write_prepared

    pairs = load_raw_dir(args.raw_dir, args.fps, args.unit_scale)
    if not pairs:
        raise InputError(f"no paired takes found in {args.raw_dir}")

    def windows(pair_list, stride):
        out = []
        short = 0
        for p in pair_list:
            ws = windows_from_pair(p, args.obs, args.fut, stride, args.delay, args.delayed_agent)
            short += not ws
            out += ws
        if short:
            log.info("%d take(s) shorter than the window span were dropped", short)
        return out

    if args.no_split:
        ws = windows(pairs, args.stride)
        write_prepared(args.out_dir, ws)
        log.info("prepared %d windows from %d takes", len(ws), len(pairs))
        return 0

    # assign takes by participant pair, then window each part with its own stride
    probe = [windows_from_pair(p, args.obs, args.fut, args.obs + args.fut, 0)[:1] for p in pairs]
    stub = [w for ws in probe for w in ws]
    split = split_by_participant(stub, args.split, args.seed)
    names = {}
    for part in ("train", "val", "test"):
        for pid in split.pair_ids(part):
            names[pid] = part
    out, labels = [], []
    for part, stride in (("train", args.stride), ("val", args.eval_stride), ("test", args.eval_stride)):
        ws = windows([p for p in pairs if names.get(p.pair_id) == part], stride or (args.obs + args.fut))
        out += ws
        labels += [part] * len(ws)
        log.info("%s: %d windows", part, len(ws))
    write_prepared(args.out_dir, out, labels)
    return 0


def _train_config(args):
    from .idd.diffusion import TrainConfig

    ablate = ""
    if args.ablate_partner:
        ablate = "cg" if args.focus_agent == "cr" else "cr"
    return TrainConfig(
        epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
        T=args.steps, beta_start=args.beta_start, beta_end=args.beta_end,
        channels=args.channels, heads=args.heads, ffn=args.ffn, blocks=args.blocks, step_emb=args.step_emb,
        representation=args.representation, ablate=ablate, standardize=args.standardize,
    )


def cmd_train(args) -> int:
    from .dataset import load_prepared
    from .idd.diffusion import train

    windows = load_prepared(args.dataset, args.split)
    cfg = _train_config(args)
    ck = train(cfg, windows, args.ckpt, resume=args.resume)
    log.info("final loss %.6f after %d epochs", ck.meta["loss_curve"][-1], ck.meta["epochs_done"])
    return 0


def _write_predictions(out_dir, windows, preds, info: dict) -> None:
    from dataclasses import replace

    from .dataset import read_manifest, write_prepared

    out = [replace(w, fut_cg=preds["cg"][i], fut_cr=preds["cr"][i], angles=None) for i, w in enumerate(windows)]
    write_prepared(out_dir, out)
    Path(out_dir, PREDICTION_INFO).write_text(json.dumps(info, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    log.info("wrote %d predicted windows to %s", len(out), out_dir)


def cmd_predict(args) -> int:
    from .dataset import load_prepared
    from .idd import checkpoint as ckpt_io
    from .idd.diffusion import IDDPredictor

    ck = ckpt_io.load(args.ckpt)
    windows = load_prepared(args.windows, args.split)
    if not windows:
        raise InputError(f"no windows in {args.windows} (split {args.split!r})")
    preds = IDDPredictor(ck, args.seed, args.num_samples, args.batch_size)(windows)
    info = {"source": "idd", "representation": ck.config.representation, "seed": args.seed,
            "num_samples": args.num_samples, "split": args.split, "ablate": ck.config.ablate}
    _write_predictions(args.out, windows, preds, info)
    return 0


def cmd_baseline(args) -> int:
    from .baselines import predict_windows
    from .dataset import load_prepared

    windows = load_prepared(args.windows, args.split)
    if not windows:
        raise InputError(f"no windows in {args.windows} (split {args.split!r})")
    _write_predictions(args.out, windows, predict_windows(args.name, windows),
                       {"source": args.name, "representation": "position", "split": args.split})
    return 0


def _window_key(w):
    m = w.meta
    return (m.clip_id, m.start, m.delay, m.delayed_agent)


def cmd_eval(args) -> int:
    from .dataset import AGENTS, load_prepared
    from .evaluation import delayed_eval, evaluate, link_length_csv, link_length_report, metrics_csv

    pred = load_prepared(args.pred)
    info_path = Path(args.pred, PREDICTION_INFO)
    info = json.loads(info_path.read_text(encoding="utf-8")) if info_path.exists() else {}
    split = args.split or info.get("split")
    gt = load_prepared(args.gt, split)
    if [_window_key(w) for w in pred] != [_window_key(w) for w in gt]:
        raise InputError(f"{args.pred} and {args.gt} do not hold the same windows in the same order")
    preds = {a: np.stack([w.fut(a) for w in pred]) for a in AGENTS}
    delayed = any(w.meta.delay for w in gt)
    reports = (delayed_eval if delayed else evaluate)(preds, gt, args.fps)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(metrics_csv(reports, args.fps), encoding="utf-8")
    for a in AGENTS:
        r = reports[a]
        log.info("%s: %s  average %.2f mm", a, "  ".join(f"{ms}ms {v:.2f}" for ms, v in r.horizons.items()), r.average)

    links = args.link_report
    if links is None and info.get("representation") == "angle":
        links = str(report_path.with_name(report_path.stem + "_links.csv"))
    if links:
        parents = _shared_parents(gt, args.gt)
        stacked = np.concatenate([preds[a] for a in AGENTS])
        ref = np.concatenate([np.stack([w.obs(a)[-1] for w in gt]) for a in AGENTS])
        rep = link_length_report(stacked, parents, ref)
        Path(links).write_text(link_length_csv(rep), encoding="utf-8")
        log.info("link length change: mean abs %.6f mm, std %.6f mm -> %s", rep.mean_abs_change, rep.std_change, links)
    return 0


def _shared_parents(windows, where):
    skel = Path(where, "skeletons.json")
    if skel.exists():
        data = json.loads(skel.read_text(encoding="utf-8"))
        tops = {tuple(s[a]["parents"]) for s in data.values() for a in ("cg", "cr")}
        if len(tops) != 1:
            raise InputError("link-length report needs one skeleton topology across all windows")
        return np.array(tops.pop())
    raise InputError(f"link-length report needs {skel} (prepare the dataset from BVH takes)")


# --- parser ------------------------------------------------------------------------

def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="hhi-idd", description="Two-agent motion prediction toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    subs = parser.add_subparsers(dest="command", required=True)
    cmds = {}

    def add(name, func, help):
        p = subs.add_parser(name, help=help)
        p.add_argument("--config", help="key=value file with defaults for this command")
        p.set_defaults(func=func)
        cmds[name] = p
        return p

    p = add("inspect", cmd_inspect, "summarize a BVH file")
    p.add_argument("file")
    p.add_argument("--json", action="store_true", help="machine-readable output")

    p = add("synth", cmd_synth, "generate the synthetic coupled corpus as paired BVH takes")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clips", type=int, default=16)
    p.add_argument("--len", type=int, default=240, help="frames per take")
    p.add_argument("--joints", type=int, default=5)
    p.add_argument("--delay", type=int, default=6, help="follower response delay in frames")
    p.add_argument("--noise", type=float, default=0.5, help="follower drive noise std")

    p = add("prepare", cmd_prepare, "BVH takes -> windows + manifest")
    p.add_argument("raw_dir")
    p.add_argument("out_dir")
    p.add_argument("--obs", type=int, default=24)
    p.add_argument("--fut", type=int, default=24)
    p.add_argument("--fps", type=int, default=24)
    p.add_argument("--stride", type=int, default=1, help="window stride for training takes")
    p.add_argument("--eval-stride", type=int, default=0, help="stride for val/test takes (default obs+fut)")
    p.add_argument("--delay", type=int, default=0, help="shift one agent's observation ahead by this many frames")
    p.add_argument("--delayed-agent", choices=("cg", "cr"), default="cg")
    p.add_argument("--unit-scale", type=float, default=1.0, help="file units -> millimetres")
    p.add_argument("--split", type=_ratios, default=(0.8, 0.1, 0.1), help="train,val,test ratios over pairs")
    p.add_argument("--no-split", action="store_true", help="window every take with --stride, no split labels")
    p.add_argument("--seed", type=int, default=0)

    p = add("train", cmd_train, "fit a denoiser")
    p.add_argument("dataset")
    p.add_argument("ckpt")
    p.add_argument("--split", default="train")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--representation", choices=("position", "angle"), default="position")
    p.add_argument("--ablate-partner", action="store_true", help="zero the partner of --focus-agent in the conditioning")
    p.add_argument("--focus-agent", choices=("cg", "cr"), default="cr")
    p.add_argument("--steps", type=int, default=50, help="diffusion steps T")
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.02)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn", type=int, default=64)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--step-emb", type=int, default=128)
    p.add_argument("--standardize", action="store_true", help="diffuse per-feature standardized data")
    p.add_argument("--resume", action="store_true", help="continue an unfinished checkpoint at <ckpt>")

    p = add("predict", cmd_predict, "sample futures with a trained checkpoint")
    p.add_argument("ckpt")
    p.add_argument("windows")
    p.add_argument("out")
    p.add_argument("--split", default="test")
    p.add_argument("--num-samples", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=64)

    p = add("baseline", cmd_baseline, "closed-form predictions")
    p.add_argument("name", choices=("zero-vel", "constant-vel"))
    p.add_argument("windows")
    p.add_argument("out")
    p.add_argument("--split", default="test")

    p = add("eval", cmd_eval, "MPJPE report of predictions against ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--report", default="metrics.csv")
    p.add_argument("--split", default=None, help="ground-truth split (default: the one predicted)")
    p.add_argument("--fps", type=int, default=24)
    p.add_argument("--link-report", default=None, help="also write link-length changes here")
    return parser, cmds


def _setup_logging(verbose: bool) -> None:
    root = logging.getLogger("hhi_idd")
    # repeated in-process calls: log to the current stderr, not the first one seen
    for old in [h for h in root.handlers if getattr(h, "_hhi_cli", False)]:
        root.removeHandler(old)
    h = logging.StreamHandler(sys.stderr)
    h._hhi_cli = True
    h.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(h)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _set_threads() -> None:
    raw = os.environ.get("HHI_NUM_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"HHI_NUM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"HHI_NUM_THREADS must be >= 1, got {n}")
    import torch

    torch.set_num_threads(n)


def main(argv=None) -> int:
    parser, cmds = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        if args.config:
            args = _apply_config(parser, cmds[args.command], argv, args)
        _set_threads()
        _log_config(args)
        return args.func(args)
    except InputError as exc:
        log.error("%s", exc)
        return 2
    except (OSError, UnicodeDecodeError) as exc:
        log.error("%s", exc)
        return 2 if isinstance(exc, (FileNotFoundError, UnicodeDecodeError)) else 1
    except Exception as exc:  # noqa: BLE001 - last-resort report for the exit code contract
        log.error("%s: %s", type(exc).__name__, exc)
        log.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
