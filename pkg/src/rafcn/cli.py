"""``rafcn`` command line: generate | train | eval | predict | gradcheck | ablate.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure (non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checks import format_results, run_suite
from .config import RunConfig
from .data import SPLITS, Dataset, generate, load_dataset, read_ppm, save_dataset, write_pgm, write_ppm
from .errors import ConfigError, DataError, DimensionError, NumericalError
from .metrics import format_table, report_json
from .network import load_checkpoint, predict
from .tensor import Tensor
from .train import Trainer, ablate, score

log = logging.getLogger("rafcn")

# legend colours for the six land-cover classes, in class order
LEGEND = (
    ("impervious_surfaces", (255, 255, 255)),
    ("building", (0, 0, 255)),
    ("low_vegetation", (0, 255, 255)),
    ("tree", (0, 255, 0)),
    ("car", (255, 255, 0)),
    ("clutter", (255, 0, 0)),
)


def palette(num_classes: int) -> np.ndarray:
    """``num_classes x 3`` uint8 colours: the legend first, then distinct extras."""
    if not 1 <= num_classes <= 255:
        raise ConfigError(f"palette supports 1..255 classes, got {num_classes}")
    colors = [c for _, c in LEGEND[:num_classes]]
    seen = set(colors) | {(0, 0, 0)}
    k = 0
    while len(colors) < num_classes:
        k += 1
        c = ((k * 97) % 256, (k * 57 + 64) % 256, (k * 151 + 128) % 256)
        if c not in seen:
            seen.add(c)
            colors.append(c)
    return np.array(colors, dtype=np.uint8)


def colorize(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """``H x W`` labels to an ``H x W x 3`` uint8 image."""
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError(f"labels outside [0, {num_classes})")
    return palette(num_classes)[labels]


def decolorize(rgb: np.ndarray, num_classes: int) -> np.ndarray:
    """Inverse of :func:`colorize`; unknown colours are a data error."""
    pal = palette(num_classes).astype(np.int64)
    key = lambda a: (a[..., 0] << 16) | (a[..., 1] << 8) | a[..., 2]
    lookup = {int(v): k for k, v in enumerate(key(pal))}
    flat = key(rgb.astype(np.int64)).ravel()
    try:
        return np.array([lookup[int(v)] for v in flat], dtype=np.int64).reshape(rgb.shape[:2])
    except KeyError as exc:
        raise DataError(f"colour {int(exc.args[0]):06x} is not in the palette") from None


# -- helpers ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = str(args.out)
    return cfg.replace(**changes) if changes else cfg


def _dataset(cfg: RunConfig, splits=SPLITS) -> Dataset:
    """The on-disk dataset when present (it must match the config), else a fresh in-memory one."""
    root = cfg.dataset_dir
    if (root / "meta.json").exists():
        ds = load_dataset(root, splits)
        if ds.config.to_dict() != cfg.data.to_dict():
            raise ConfigError(f"dataset in {root} was generated with a different data config")
        return ds
    log.info("no dataset in %s; generating it in memory", root)
    return generate(cfg.data)


def _checkpoint_config(args, header: dict) -> RunConfig:
    if args.config:
        cfg = _config(args)
    elif "run" in header:
        cfg = RunConfig.from_dict(header["run"])
    else:
        raise ConfigError("checkpoint carries no run config; pass --config")
    return cfg


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# -- commands -----------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _config(args)
    root = Path(args.out) if args.out is not None else cfg.dataset_dir
    ds = generate(cfg.data)
    save_dataset(ds, root)
    print(f"wrote {len(ds.train)}/{len(ds.val)}/{len(ds.test)} train/val/test tiles to {root}")
    return 0


def cmd_train(args) -> int:
    if args.checkpoint:
        header = load_checkpoint(args.checkpoint)[1]
        cfg = _checkpoint_config(args, header)
    else:
        cfg = _config(args)
    out = Path(cfg.output_dir)
    ds = _dataset(cfg)
    _write(out / "config.json", cfg.to_json())
    if args.checkpoint:
        trainer = Trainer.resume(args.checkpoint, ds.train, ds.val, out_dir=out)
    else:
        trainer = Trainer(cfg, ds.train, ds.val, out_dir=out)
    result = trainer.run()
    result.restore_best()
    reports = {name: score(result.net, ds.split(name)) for name in ("val", "test")}
    _write(out / "report.json", json.dumps(reports, sort_keys=True, indent=2) + "\n")
    print(format_table([(f"{cfg.network.mode.value} ({name})", rep) for name, rep in reports.items()]))
    print(f"stopped after {trainer.state.it} iterations"
          f"{' (early stop)' if result.stopped_early else ''}; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    net, header, _ = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(args, header)
    split = args.split or "test"
    ds = _dataset(cfg, splits=(split,))
    rep = score(net, ds.split(split))
    print(format_table([(f"{net.config.mode.value} ({split})", rep)], per_class=True))
    print(report_json(rep))
    if args.out is not None:
        _write(Path(args.out) / f"eval_{split}.json", report_json(rep) + "\n")
    return 0


def cmd_predict(args) -> int:
    if not args.checkpoint:
        raise ConfigError("predict needs --checkpoint")
    net, header, _ = load_checkpoint(args.checkpoint)
    k = net.config.num_classes
    out = Path(args.out) if args.out is not None else Path("predictions")
    out.mkdir(parents=True, exist_ok=True)
    if args.images:
        items = [(Path(p).stem, read_ppm(p)) for p in args.images]
    else:
        cfg = _checkpoint_config(args, header)
        split = args.split or "test"
        items = [(f"{split}_{i:05d}", s.image) for i, s in enumerate(_dataset(cfg, (split,)).split(split))]
    for stem, image in items:
        labels = predict(net, Tensor(image))
        write_pgm(out / f"{stem}_pred.pgm", labels)
        if args.color:
            write_ppm(out / f"{stem}_pred_color.ppm", colorize(labels, k).transpose(2, 0, 1) / 255.0)
    print(f"wrote {len(items)} prediction(s) to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed or 0)
    print(format_results(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 3
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    ds = _dataset(cfg)
    out = Path(cfg.output_dir)
    rows = ablate(cfg, ds.train, ds.val, ds.test, out_dir=out / "ablation")
    print(format_table([(r["model"], r["report"]) for r in rows]))
    table = [{"mode": r["mode"], "mean_f1": r["mean_f1"], "oa": r["oa"]} for r in rows]
    _write(out / "ablation.json", json.dumps(table, indent=2) + "\n")
    print(json.dumps(table))
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run config (defaults apply to missing keys)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--seed", type=int, metavar="N", help="master seed for data, init and shuffling")
    common.add_argument("--checkpoint", metavar="PATH", help="checkpoint to evaluate, predict with or resume")
    common.add_argument("--split", choices=SPLITS, help="dataset split (default: test)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="rafcn", description="Relation-augmented FCN on synthetic long-range tiles.")
    parser.add_argument("--print-default-config", action="store_true",
                        help="print the default run config as JSON and exit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="write the synthetic dataset to disk")
    sub.add_parser("train", parents=[common], help="train one network (resume with --checkpoint)")
    sub.add_parser("eval", parents=[common], help="score a checkpoint on a split")
    p = sub.add_parser("predict", parents=[common], help="write label rasters for PPM images or a split")
    p.add_argument("images", nargs="*", metavar="IMAGE.ppm")
    p.add_argument("--color", action="store_true", help="also write legend-coloured PPMs")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    sub.add_parser("ablate", parents=[common], help="train and score all five integration modes")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_default_config:
        sys.stdout.write(RunConfig().to_json())
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"rafcn: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, DimensionError, OSError) as exc:
        print(f"rafcn: data error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"rafcn: config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
