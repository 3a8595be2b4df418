"""Command-line front end: synth, train, eval, predict and cfpg-demo.

Exit codes: 0 ok, 2 usage or invalid input, 3 IO failure, 4 numeric failure,
5 corrupt checkpoint.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

from . import cfpg
from .degrade import DatasetConfig, generate_dataset, load_image, read_manifest
from .encoder import Checkpoint
from .errors import InvalidCheckpointError, NonFiniteLossError
from .infer import RegressionConfig, evaluate, predict
from .train import ABLATIONS, TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4, 5

log = logging.getLogger("ordegrade")

_SECTIONS = ("train", "regression", "encoder", "dataset")


class UsageError(ValueError):
    pass


@dataclass
class CliConfig:
    """Merged configuration from a JSON file with sections train / regression /
    encoder / dataset; each section is validated by its owning dataclass."""

    train: dict = field(default_factory=dict)
    regression: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "CliConfig":
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file {path} not found")
        try:
            obj = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise UsageError("config root must be an object")
        unknown = set(obj) - set(_SECTIONS)
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")
        return cls(**{k: dict(obj.get(k) or {}) for k in _SECTIONS})

    def train_config(self, **overrides) -> TrainConfig:
        merged = {**self.train, **self.encoder, **{k: v for k, v in overrides.items() if v is not None}}
        _check_keys(TrainConfig, merged, "train/encoder")
        return TrainConfig(**merged)

    def regression_config(self, **overrides) -> RegressionConfig:
        merged = {**self.regression, **{k: v for k, v in overrides.items() if v is not None}}
        _check_keys(RegressionConfig, merged, "regression")
        return RegressionConfig(**merged)

    def dataset_config(self, **overrides) -> DatasetConfig:
        merged = {**self.dataset, **{k: v for k, v in overrides.items() if v is not None}}
        _check_keys(DatasetConfig, merged, "dataset")
        return DatasetConfig(**merged)


def _check_keys(cls, values: dict, section: str) -> None:
    unknown = set(values) - {f.name for f in fields(cls)}
    if unknown:
        raise UsageError(f"unknown keys in {section} config: {sorted(unknown)}")


def _parse_k(text: str):
    if text == "all":
        return "all"
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("k must be an integer or 'all'") from None


# ----------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = CliConfig.load(args.config) if args.config else CliConfig()
    dcfg = cfg.dataset_config(count=args.count, seed=args.seed, mixture_ratio=args.mixture, patch_size=args.patch)
    manifest = generate_dataset(args.input, args.out, dcfg)
    print(len(manifest.records))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = CliConfig.load(args.config)
    overrides = {"epochs": args.epochs, "seed": args.seed}
    if args.ablation:
        overrides["use_level"], overrides["use_scl"] = ABLATIONS[args.ablation]
    tcfg = cfg.train_config(**overrides)
    manifest = read_manifest(args.data)
    out = Path(args.out)
    loss_log = Path(args.log) if args.log else out.with_suffix(".loss.csv")
    ckpt, history = train(tcfg, manifest, log_path=loss_log)
    ckpt.save(out)
    if history:
        log.info("final epoch loss %.6f", history[-1].total)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = CliConfig.load(args.config) if args.config else CliConfig()
    rcfg = cfg.regression_config(k=args.k, conf_threshold=args.threshold)
    ckpt = Checkpoint.load(args.ckpt)
    manifest = read_manifest(args.data)
    report = evaluate(ckpt, manifest, rcfg)
    report.save(args.report, args.csv)
    if args.json:
        print(json.dumps(report.to_json(), sort_keys=True))
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = CliConfig.load(args.config) if args.config else CliConfig()
    rcfg = cfg.regression_config(k=args.k, conf_threshold=args.threshold)
    ckpt = Checkpoint.load(args.ckpt)
    pred = predict(ckpt, load_image(args.image), rcfg)
    if args.json:
        print(json.dumps(pred.to_json(), sort_keys=True))
    else:
        for t, p in pred.types.items():
            level = f" level={p.level_raw:.4g}" if p.present else ""
            print(f"{t.value}: present={p.present} conf={p.conf:.3f}{level}", file=sys.stderr)
    return EXIT_OK


def cmd_cfpg_demo(args) -> int:
    spec = cfpg.ToyDiffusionSpec(steps=args.steps, seed=args.seed)
    params = cfpg.CfpgParams(eta_par=args.eta_par, eta_perp=args.eta_perp, w=args.scale)
    trajectories = {args.mode: cfpg.sample(spec, params, args.mode)}
    if args.compare:
        other = "linear_cfg" if args.mode == "cfpg" else "cfpg"
        trajectories[other] = cfpg.sample(spec, params, other)
    if args.out:
        cfpg.write_trajectories(args.out, trajectories)
    if args.compare:
        a, b = trajectories["cfpg"], trajectories["linear_cfg"]
        dev = float(abs(a - b).max())
        print(json.dumps({"max_deviation": dev}) if args.json else f"max_deviation {dev:.6e}")
    elif args.json:
        final = trajectories[args.mode][-1]
        print(json.dumps({"final": [float(final[0]), float(final[1])], "mode": args.mode}))
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ordegrade", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="cut and degrade patches, write PNGs and a manifest")
    s.add_argument("--input", required=True, help="directory of clean images")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--count", required=True, type=int, help="number of records")
    s.add_argument("--seed", required=True, type=int, help="dataset seed")
    s.add_argument("--mixture", type=float, help="fraction of records with 2+ degradations (default 0.5)")
    s.add_argument("--patch", type=int, help="patch side in pixels (default 224)")
    s.add_argument("--config", help="JSON config; its dataset section supplies defaults")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train an encoder and bin shifts from a manifest")
    s.add_argument("--config", required=True, help="JSON config with train/encoder sections")
    s.add_argument("--data", required=True, help="training manifest.jsonl")
    s.add_argument("--out", required=True, help="checkpoint path (JSON)")
    s.add_argument("--ablation", choices=sorted(ABLATIONS), help="loss set: A conf, B +level, C +scl, D all")
    s.add_argument("--epochs", type=int, help="override the epoch count")
    s.add_argument("--seed", type=int, help="override the training seed")
    s.add_argument("--log", help="loss CSV path (default: <out>.loss.csv)")
    s.set_defaults(func=cmd_train)

    for name, func, hlp in (("eval", cmd_eval, "score a checkpoint on a manifest"), ("predict", cmd_predict, "predict degradations of one image")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--ckpt", required=True, help="checkpoint path")
        if name == "eval":
            s.add_argument("--data", required=True, help="manifest.jsonl to score")
            s.add_argument("--report", required=True, help="metrics JSON output path")
            s.add_argument("--csv", help="optional metrics CSV output path")
        else:
            s.add_argument("--image", required=True, help="image to analyse")
        s.add_argument("--json", action="store_true", help="print machine-readable JSON on stdout")
        s.add_argument("--k", type=_parse_k, help="top-k bins for level regression, or 'all'")
        s.add_argument("--threshold", type=float, help="confidence threshold for presence")
        s.add_argument("--config", help="JSON config; its regression section supplies defaults")
        s.set_defaults(func=func)

    s = sub.add_parser("cfpg-demo", help="toy diffusion sampling with projection guidance")
    s.add_argument("--eta-par", type=float, default=1.0, help="weight of the parallel deviation")
    s.add_argument("--eta-perp", type=float, default=0.6, help="weight of the orthogonal deviation")
    s.add_argument("--scale", type=float, default=5.5, help="guidance scale w")
    s.add_argument("--steps", type=int, default=50, help="sampling steps")
    s.add_argument("--seed", type=int, default=0, help="sampling seed")
    s.add_argument("--mode", choices=("cfpg", "linear_cfg"), default="cfpg", help="guidance rule")
    s.add_argument("--out", help="trajectory CSV path (step, x, y, mode)")
    s.add_argument("--compare", action="store_true", help="also run the other mode and report the max deviation")
    s.add_argument("--json", action="store_true", help="print machine-readable JSON on stdout")
    s.set_defaults(func=cmd_cfpg_demo)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except InvalidCheckpointError as exc:
        print(f"error: invalid checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NonFiniteLossError as exc:
        print(f"error: {exc} (batch {exc.batch_id})", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
