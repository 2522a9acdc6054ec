"""Command-line entry point.

Subcommands::

    fstcn gen-data              write the seeded synthetic dataset
    fstcn verify-factorization  direct 3D vs factorized convolution trials
    fstcn train                 train the combined, SCL-only and TCL-only nets
    fstcn eval                  fused test accuracy for every trained variant
    fstcn fuse                  re-fuse dumped scores without the network
    fstcn saliency              export gradient saliency maps as PGM images

Exit codes: 0 success, 1 validation failure (bad arguments, bad config,
missing inputs, failed check), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import fusion
from .clips import sample_clip_pair, evenly_spaced_starts
from .factorized import equivalence_trials
from .network import Network, load_checkpoint, save_checkpoint, saliency
from .runconfig import VARIANTS, RunConfig, set_path
from .synthetic import generate_synthetic
from .trainer import TrainingDiverged, pretrain_auxiliary, train
from .video_io import load_dataset

logger = logging.getLogger("fstcn")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
EQUIVALENCE_TOL = 1e-10


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _json_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(args) -> RunConfig:
    """Config file, then ``--set`` entries, then dedicated flags."""
    raw: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: a run configuration must be a JSON object")
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        set_path(raw, key, _json_value(value))
    for flag in ("seed", "data", "out", "pretrain_epochs"):
        value = getattr(args, flag, None)
        if value is not None:
            raw[flag] = value
    if getattr(args, "variants", None):
        raw["variants"] = args.variants
    if getattr(args, "epochs", None) is not None:
        raw.setdefault("train", {})["epochs"] = args.epochs
    return RunConfig.from_dict(raw)


def _require_dir(path, what: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _checkpoint_path(out, variant: str) -> Path:
    return Path(out) / "checkpoints" / f"{variant}.ckpt"


def _load_variant(out, variant: str) -> Network:
    path = _checkpoint_path(out, variant)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    net, _ = load_checkpoint(path)
    return net


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = build_config(args)
    root = generate_synthetic(cfg.synthetic_config(), cfg.data)
    cfg.echo(root)
    ds = load_dataset(root)
    _emit({"command": "gen-data", "root": str(root), "classes": ds.classes,
           "train": len(ds.train), "test": len(ds.test)})
    return EXIT_OK


def cmd_verify_factorization(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    extents = tuple(args.max_volume) + tuple(args.max_kernel)
    if any(e < 1 for e in extents):
        raise UsageError("extents must be >= 1")
    records = list(equivalence_trials(args.trials, tuple(args.max_volume), tuple(args.max_kernel), args.seed))
    worst = max(r.max_abs_error for r in records)
    for r in records:
        _emit(r.to_dict())
    ok = worst <= EQUIVALENCE_TOL
    _emit({"summary": True, "trials": len(records), "max_abs_error": worst,
           "tolerance": EQUIVALENCE_TOL, "passed": ok})
    return EXIT_OK if ok else EXIT_INVALID


def cmd_train(args) -> int:
    cfg = build_config(args)
    ds = load_dataset(_require_dir(cfg.data, "dataset directory"))
    out = Path(cfg.out)
    spec, tcfg = cfg.clip_spec(), cfg.train_config()
    channels = ds.train[0].shape[3]
    nets = {v: cfg.network_config(ds.num_classes, channels, v) for v in cfg.variants}
    cfg.echo(out, {"network_resolved": {v: n.to_dict() for v, n in nets.items()},
                   "classes": ds.classes})
    summary = {}
    for variant, ncfg in nets.items():
        net = Network(ncfg, seed=cfg.seeds()["init"])
        if cfg.pretrain_epochs:
            pretrain_auxiliary(net, ds, tcfg, spec, cfg.pretrain_epochs)
        net, log = train(net, ds, tcfg, spec, out / f"metrics_{variant}.ndjson",
                         out / "checkpoints" / variant)
        path = _checkpoint_path(out, variant)
        save_checkpoint(net, path, {"variant": variant, "classes": ds.classes,
                                    "epochs": tcfg.epochs, "seed": cfg.seed})
        last = log.records[-1]
        summary[variant] = {"checkpoint": str(path), "final_test_accuracy": last["accuracy"]}
        logger.info("trained %s -> %s", variant, path)
    _emit({"command": "train", "variants": summary})
    return EXIT_OK


def evaluate_variant(net: Network, ds, cfg: RunConfig) -> list:
    """``(name, label, scores (M, C, N))`` for every test sequence."""
    spec, crops = cfg.clip_spec(), cfg.crop_set()
    return [(seq.name, seq.label, fusion.crop_scores(net, seq, spec, crops)) for seq in ds.test]


def fusion_report(entries, num_classes: int) -> dict:
    return {s: fusion.accuracy_report(entries, num_classes, s) for s in fusion.SCHEMES}


def cmd_eval(args) -> int:
    cfg = build_config(args)
    ds = load_dataset(_require_dir(cfg.data, "dataset directory"))
    if not ds.test:
        raise ValueError(f"{cfg.data}: the dataset has no test sequences")
    out = Path(cfg.out)
    nets = {v: _load_variant(out, v) for v in cfg.variants}
    report = {"command": "eval", "classes": ds.classes, "variants": {}}
    for variant, net in nets.items():
        entries = evaluate_variant(net, ds, cfg)
        fusion.dump_scores(out / f"scores_{variant}.ndjson", entries)
        report["variants"][variant] = fusion_report(entries, ds.num_classes)
    (out / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit(report)
    _print_table(report)
    return EXIT_OK


def cmd_fuse(args) -> int:
    report = {"command": "fuse", "files": {}}
    for name in args.scores:
        path = Path(name)
        if not path.exists():
            raise FileNotFoundError(f"score file not found: {path}")
        entries = fusion.load_scores(path)
        if not entries:
            raise ValueError(f"{path}: no score records")
        n = args.num_classes or entries[0][2].shape[-1]
        report["files"][str(path)] = fusion_report(entries, n)
    _emit(report)
    return EXIT_OK


def write_pgm(path, image: np.ndarray) -> None:
    """Binary 8-bit PGM; ``image`` is ``(x, y)`` and is scaled to its maximum."""
    img = np.asarray(image, dtype=np.float64).T  # rows are y
    peak = img.max()
    scaled = np.zeros(img.shape, dtype=np.uint8) if peak <= 0 else np.round(255 * img / peak).astype(np.uint8)
    h, w = scaled.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(scaled.tobytes())


def cmd_saliency(args) -> int:
    cfg = build_config(args)
    ds = load_dataset(_require_dir(cfg.data, "dataset directory"))
    variant = args.variant
    net = _load_variant(cfg.out, variant)
    spec = cfg.clip_spec()
    by_name = {s.name: s for s in ds.test + ds.train}
    targets = args.sequence or [s.name for s in ds.test[:1]]
    dest = Path(args.dest or Path(cfg.out) / "saliency")
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    for name in targets:
        if name not in by_name:
            raise FileNotFoundError(f"sequence not found in dataset: {name}")
        seq = by_name[name]
        m_x, m_y, m_t = seq.shape[:3]
        start = evenly_spaced_starts(m_t, spec, 1)[0]
        pair = sample_clip_pair(seq, spec, start, ((m_x - spec.l_x) // 2, (m_y - spec.l_y) // 2))
        classes = args.class_index if args.class_index is not None else [seq.label]
        for c in classes:
            maps = saliency(net, pair, c)
            # appearance and motion side by side, each reduced over time by max
            tile = np.concatenate([maps.appearance.max(axis=-1), maps.motion.max(axis=-1)], axis=0)
            path = dest / f"{name.replace('/', '_').removesuffix('.seq')}_class{c}.pgm"
            write_pgm(path, tile)
            written.append(str(path))
    _emit({"command": "saliency", "variant": variant, "files": written})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry, e.g. train.lr=0.02 (VALUE parsed as JSON)")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fstcn", description="Factorized spatio-temporal action recognition")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the seeded synthetic dataset")
    _add_run_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("verify-factorization", help="compare direct 3D and factorized convolution")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--max-volume", type=int, nargs=3, default=(16, 16, 8), metavar=("X", "Y", "T"))
    p.add_argument("--max-kernel", type=int, nargs=3, default=(5, 5, 5), metavar=("X", "Y", "T"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify_factorization)

    p = sub.add_parser("train", help="train every configured variant")
    _add_run_flags(p)
    p.add_argument("--variants", nargs="+", choices=VARIANTS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="fused test accuracy for trained variants")
    _add_run_flags(p)
    p.add_argument("--variants", nargs="+", choices=VARIANTS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse", help="re-fuse dumped score files")
    p.add_argument("scores", nargs="+", help="score files written by eval")
    p.add_argument("--num-classes", type=int)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("saliency", help="export saliency maps as PGM images")
    _add_run_flags(p)
    p.add_argument("--variant", choices=VARIANTS, default="both")
    p.add_argument("--sequence", action="append", help="dataset-relative sequence path (repeatable)")
    p.add_argument("--class-index", type=int, action="append", help="class to explain (default: label)")
    p.add_argument("--dest", help="image directory (default: OUT/saliency)")
    p.set_defaults(func=cmd_saliency)
    return parser


def _print_table(report: dict) -> None:
    classes = report["classes"]
    for variant, schemes in report["variants"].items():
        for scheme, r in schemes.items():
            cells = " ".join(f"{c}={a:.3f}" if a is not None else f"{c}=n/a"
                             for c, a in zip(classes, r["per_class"]))
            print(f"# {variant:4s} {scheme:7s} mean={r['mean_class']:.3f} {cells}", file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - report, don't dump a traceback
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
