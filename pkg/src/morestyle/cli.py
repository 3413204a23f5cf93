"""Command-line entry point: generate, train, eval, preview, diversity, ablation.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 divergence.
"""
import argparse
import csv
import datetime as dt
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__, diversity, experiments
from .config import DEFAULTS, dump_config, load_config
from .errors import DivergenceError, ValidationError
from .synth_data import dataset_checksum, generate_domain, load_dataset, save_dataset
from .training import METHODS, TrainConfig, evaluate, load_checkpoint, train

log = logging.getLogger("morestyle")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2, 3
MANIFEST = "run_manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir, command, cfg, checksum, seed, outputs, started, name=MANIFEST):
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "config": cfg,
        "dataset_checksum": checksum,
        "seed": seed,
        "started": started,
        "finished": _now(),
        "outputs": sorted(str(p) for p in outputs),
    }
    path = Path(out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2))
    return path


def _checksum(dataset):
    return dataset_checksum([r for d in dataset for r in dataset[d]])


def _config(args):
    return load_config(args.config, args.set)


def _run_config(run_dir):
    """Config echo of a training run, or the defaults when it has no manifest."""
    path = Path(run_dir) / MANIFEST
    if path.exists():
        return json.loads(path.read_text())["config"]
    return load_config()


def _dataset(data_dir, cfg):
    if data_dir:
        _, dataset = load_dataset(data_dir)
        return dataset
    _, dataset = experiments.benchmark_from_config(cfg["data"])
    return dataset


def _final(run_dir):
    path = Path(run_dir) / "final.pt"
    if not path.exists():
        raise ValidationError(f"no final.pt in {run_dir}")
    return path


# --- commands ---------------------------------------------------------------------

def cmd_generate(args):
    started = _now()
    cfg = _config(args)
    domains = experiments.domains_from_config(cfg["data"])
    size = cfg["data"]["image_size"]
    records = {d.name: generate_domain(d, image_size=size) for d in domains}
    try:
        manifest = save_dataset(args.out, domains, records, size)
    except OSError as exc:
        raise ValidationError(f"cannot write dataset to {args.out}: {exc}") from exc
    write_manifest(args.out, "generate", cfg, manifest["checksum"], None, [Path(args.out) / "manifest.json"], started)
    print(f"{sum(len(v) for v in records.values())} samples in {len(domains)} domains -> {args.out}")
    print(f"checksum {manifest['checksum']}")
    return Path(args.out)


def cmd_train(args):
    started = _now()
    cfg = _config(args)
    cfg["train"]["method"] = args.method
    config = TrainConfig.from_dict(cfg["train"])
    dataset = _dataset(args.data, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")

    def progress(rec):
        if not args.quiet:
            val = f" val_dice {rec['val_dice']:.4f}" if "val_dice" in rec else ""
            print(f"epoch {rec['epoch']:3d} fsd {rec['fsd_value']:.4g} seg {rec['seg_value_orig']:.4f}"
                  f" seg_aug {rec['seg_value_aug']:.4f} adv {rec['adversarial_seg_value']:.4f}{val}", flush=True)

    outputs = [out / "config.yaml", out / "metrics.jsonl"]
    try:
        ckpt = train(config, dataset, out, progress=progress)
    except DivergenceError:
        write_manifest(out, "train", cfg, _checksum(dataset), config.seed, outputs + [out / "last_good.pt"], started)
        raise
    outputs += sorted(out.glob("*.pt"))
    write_manifest(out, "train", cfg, _checksum(dataset), config.seed, outputs, started)
    print(f"checkpoint {ckpt}")
    return out


def cmd_eval(args):
    started = _now()
    cfg = _run_config(args.run_dir)
    dataset = _dataset(args.data, cfg)
    ckpt = _final(args.run_dir)
    out = Path(args.out or Path(args.run_dir) / "eval")
    out.mkdir(parents=True, exist_ok=True)
    reports = [evaluate(ckpt, dataset, d) for d in sorted(dataset)]
    table = out / "dice.tsv"
    with table.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["domain", "class", "n", "mean", "std"])
        for rep in reports:
            for c in rep.classes:
                w.writerow([rep.domain, c, len(rep.per_image), f"{rep.mean[c]:.6f}", f"{rep.std[c]:.6f}"])
    figure = out / "dice.png"
    plot_dice(reports, figure)
    write_manifest(out, "eval", cfg, _checksum(dataset), cfg["train"]["seed"], [table, figure], started)
    print(table.read_text(), end="")
    return table


def plot_dice(reports, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    classes = reports[0].classes
    x = np.arange(len(reports))
    width = 0.8 / len(classes)
    fig, ax = plt.subplots(figsize=(1.6 * len(reports) + 2, 3.2))
    for i, c in enumerate(classes):
        ax.bar(x + i * width, [r.mean[c] for r in reports], width, yerr=[r.std[c] for r in reports], label=c)
    ax.set_xticks(x + width * (len(classes) - 1) / 2, [r.domain for r in reports])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("Dice")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _to_uint8(image):
    return (np.clip(np.asarray(image)[..., 0], 0, 1) * 255).round().astype(np.uint8)


def image_grid(images, gap=2):
    h, w = images[0].shape[:2]
    grid = np.full((h, len(images) * (w + gap) - gap), 255, np.uint8)
    for i, img in enumerate(images):
        grid[:, i * (w + gap): i * (w + gap) + w] = _to_uint8(img)
    return Image.fromarray(grid)


def cmd_preview(args):
    started = _now()
    if args.count < 0:
        raise ValidationError("count must be >= 0")
    cfg = _run_config(args.run_dir)
    dataset = _dataset(args.data, cfg)
    config, nets, _ = load_checkpoint(_final(args.run_dir))
    source = dataset[config.source_domain]
    match = [r for r in source if r.sample_id == args.image_id]
    if not match:
        raise ValidationError(f"no source image with id {args.image_id}")
    image = match[0].image.astype(np.float64)
    rng = np.random.default_rng(args.seed)
    if args.count == 0 or config.method == "baseline":
        variants = [image] * args.count
    elif config.method in ("fda", "fact"):
        pool = [r.image.astype(np.float64) for r in source if r.split == "train"]
        variants = diversity.spectral_variants(image, pool, config.method, args.count, config.aug_ratio, rng)
    else:
        variants = diversity.styled_variants(nets, image, args.count, torch.Generator().manual_seed(args.seed))
    out = Path(args.out or Path(args.run_dir) / f"preview_{args.image_id:04d}.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    image_grid([image] + list(variants)).save(out)
    write_manifest(out.parent, "preview", cfg, _checksum(dataset), args.seed, [out], started,
                   name=f"{out.stem}.manifest.json")
    print(f"{1 + len(variants)} panels -> {out}")
    return out


def cmd_diversity(args):
    started = _now()
    cfg = _run_config(args.run_dir)
    dataset = _dataset(args.data, cfg)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    dcfg = cfg.get("diversity", DEFAULTS["diversity"])
    rows = experiments.run_diversity(args.run_dir, dataset, methods, dcfg["n_images"], dcfg["n_variants"],
                                     dcfg["seed"])
    out = Path(args.out or Path(args.run_dir) / "diversity")
    out.mkdir(parents=True, exist_ok=True)
    report = out / "diversity.tsv"
    with report.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["method", "n_images", "n_variants", "dispersion", "std"])
        for r in rows:
            w.writerow([r.method, r.n_images, r.n_variants, f"{r.dispersion:.8f}", f"{r.std:.8f}"])
    write_manifest(out, "diversity", cfg, _checksum(dataset), dcfg["seed"], [report], started)
    print(report.read_text(), end="")
    return report


def cmd_ablation(args):
    started = _now()
    cfg = _config(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    summary = experiments.run_ablation(cfg, args.out, methods, seeds, progress=None if args.quiet else print)
    outputs = [Path(args.out) / "summary.json", Path(args.out) / "runs.json"]
    if args.diversity and "morestyle" in methods:
        _, dataset = experiments.benchmark_from_config(cfg["data"])
        run_dir = Path(args.out) / f"morestyle_seed{seeds[0]}"
        rows = experiments.run_diversity(run_dir, dataset, ["identity", "fda", "fact", "morestyle"],
                                         cfg["diversity"]["n_images"], cfg["diversity"]["n_variants"],
                                         cfg["diversity"]["seed"])
        path = Path(args.out) / "diversity.json"
        path.write_text(json.dumps([r.as_dict() for r in rows], indent=2))
        summary["diversity"] = [r.as_dict() for r in rows]
        (Path(args.out) / "summary.json").write_text(json.dumps(summary, indent=2))
        outputs.append(path)
    write_manifest(args.out, "ablation", cfg, summary["dataset_checksum"], seeds, outputs, started)
    for m, v in summary["methods"].items():
        print(f"{m:10s} target {v['target_mean']:.4f} +- {v['target_std']:.4f}  source val {v['source_val']:.4f}")
    for name, ok, detail in experiments.verdicts(summary):
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return summary


# --- parser -----------------------------------------------------------------------

def _add_config(p):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key by dotted path, e.g. train.epochs=5")


def build_parser():
    parser = _Parser(prog="morestyle", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("generate", help="write the synthetic benchmark")
    _add_config(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one method")
    _add_config(p)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--data", help="dataset directory (default: regenerate from the config)")
    p.add_argument("--out", required=True)
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-domain Dice table and plot")
    p.add_argument("run_dir")
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("preview", help="grid of a source image and styled variants")
    p.add_argument("run_dir")
    p.add_argument("--image-id", type=int, default=0)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_preview)

    p = sub.add_parser("diversity", help="low-frequency amplitude dispersion per augmenter")
    p.add_argument("run_dir")
    p.add_argument("--methods", default="identity,fda,fact,morestyle")
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_diversity)

    p = sub.add_parser("ablation", help="train methods x seeds and compare target Dice")
    _add_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--no-diversity", dest="diversity", action="store_false")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
    except UsageError as exc:
        print(f"morestyle: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except DivergenceError as exc:
        print(f"morestyle: diverged: {exc}", file=sys.stderr)
        if exc.config is not None:
            print(json.dumps(exc.config, indent=2, default=str), file=sys.stderr)
        return EXIT_DIVERGED
    except (ValidationError, FileNotFoundError) as exc:
        print(f"morestyle: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
