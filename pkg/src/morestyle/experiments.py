"""Seeded ablation and Fourier-baseline comparison on the synthetic benchmark."""
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import diversity
from .errors import ValidationError
from .synth_data import DomainSpec, build_benchmark, dataset_checksum, default_domains
from .training import METHODS, TrainConfig, evaluate, load_checkpoint, train

log = logging.getLogger(__name__)

ABLATION_CHAIN = ("baseline", "asa", "asa_fsd", "morestyle")
MIN_GAIN = 0.03  # full method over baseline, in Dice units


def domains_from_config(data_cfg):
    if data_cfg.get("domains"):
        return [DomainSpec.from_dict(d) for d in data_cfg["domains"]]
    return default_domains(data_cfg["n_source"], data_cfg["n_target"], data_cfg["val_fraction"])


def benchmark_from_config(data_cfg):
    domains = domains_from_config(data_cfg)
    return domains, build_benchmark(domains, data_cfg["image_size"])


def target_domains(dataset, source):
    return sorted(d for d in dataset if d != source)


def score_run(checkpoint, dataset, source):
    """Mean Dice per domain (source on its val split when there is one)."""
    out = {}
    for domain in sorted(dataset):
        split = None
        if domain == source and any(r.split == "val" for r in dataset[domain]):
            split = "val"
        rep = evaluate(checkpoint, dataset, domain, split=split)
        out[domain] = {"mean_dice": rep.mean_dice, **{f"dice_{c}": v for c, v in rep.mean.items()}}
    targets = target_domains(dataset, source)
    out["target_mean"] = float(np.mean([out[d]["mean_dice"] for d in targets]))
    return out


def run_ablation(cfg, out_dir, methods=METHODS, seeds=(0, 1, 2), progress=print):
    """Train every (method, seed) pair, reusing finished runs; returns the summary dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValidationError(f"unknown methods {sorted(unknown)}")
    _, dataset = benchmark_from_config(cfg["data"])
    checksum = dataset_checksum([r for d in dataset for r in dataset[d]])
    source = cfg["train"]["source_domain"]
    runs = {}
    results_path = out_dir / "runs.json"
    if results_path.exists():
        previous = json.loads(results_path.read_text())
        if previous.get("dataset_checksum") == checksum:
            runs = previous["runs"]
    for seed in seeds:
        for method in methods:
            key = f"{method}_seed{seed}"
            run_dir = out_dir / key
            if key in runs and (run_dir / "final.pt").exists():
                continue
            config = TrainConfig.from_dict({**cfg["train"], "method": method, "seed": seed})
            t0 = time.time()
            ckpt = train(config, dataset, run_dir)
            runs[key] = {"method": method, "seed": seed, "seconds": time.time() - t0,
                         "scores": score_run(ckpt, dataset, source)}
            results_path.write_text(json.dumps({"dataset_checksum": checksum, "runs": runs}, indent=2))
            if progress:
                progress(f"{key}: target mean Dice {runs[key]['scores']['target_mean']:.4f} "
                         f"({runs[key]['seconds']:.0f}s)")
    summary = summarize(runs, cfg, checksum)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def summarize(runs, cfg, checksum):
    by_method = {}
    for r in runs.values():
        by_method.setdefault(r["method"], []).append(r)
    methods = {}
    for m, rs in by_method.items():
        rs = sorted(rs, key=lambda r: r["seed"])
        t = [r["scores"]["target_mean"] for r in rs]
        methods[m] = {
            "seeds": [r["seed"] for r in rs],
            "target_mean_per_seed": t,
            "target_mean": float(np.mean(t)),
            "target_std": float(np.std(t)),
            "source_val": float(np.mean([r["scores"][cfg["train"]["source_domain"]]["mean_dice"] for r in rs])),
            "per_domain": {d: float(np.mean([r["scores"][d]["mean_dice"] for r in rs]))
                           for d in rs[0]["scores"] if d != "target_mean"},
            "seconds": float(sum(r["seconds"] for r in rs)),
        }
    return {"config": cfg, "dataset_checksum": checksum, "methods": methods,
            "total_seconds": float(sum(m["seconds"] for m in methods.values()))}


def verdicts(summary):
    """Pass/fail of the ablation ordering and the Fourier-baseline comparison."""
    m = {k: v["target_mean"] for k, v in summary["methods"].items()}
    out = []
    if all(k in m for k in ABLATION_CHAIN):
        b, a, af, full = (m[k] for k in ABLATION_CHAIN)
        out.append(("baseline < asa", b < a, f"{b:.4f} < {a:.4f}"))
        out.append(("asa < asa_fsd", a < af, f"{a:.4f} < {af:.4f}"))
        out.append(("asa_fsd <= morestyle", af <= full, f"{af:.4f} <= {full:.4f}"))
        out.append(("morestyle >= baseline + 0.03", full >= b + MIN_GAIN, f"{full:.4f} >= {b + MIN_GAIN:.4f}"))
    for other in ("fda", "fact"):
        if "asa_fsd" in m and other in m:
            out.append((f"asa_fsd >= {other}", m["asa_fsd"] >= m[other], f"{m['asa_fsd']:.4f} >= {m[other]:.4f}"))
    return out


def run_diversity(run_dir, dataset, methods, n_images=16, n_variants=16, seed=0):
    """Dispersion rows for ``methods``; styler methods use the decoder saved in ``run_dir``."""
    config, nets, _ = load_checkpoint(Path(run_dir) / "final.pt")
    source = [r for r in dataset[config.source_domain] if r.split == "train"] or dataset[config.source_domain]
    images = [r.image for r in source[:n_images]]
    pool = [r.image.astype(np.float64) for r in source]
    rows = []
    for method in methods:
        if method in ("asa", "asa_fsd", "morestyle") and method != config.method:
            raise ValidationError(f"run in {run_dir} was trained with {config.method!r}, not {method!r}")
        rows.append(diversity.measure(method, images, pool=pool, nets=nets, n_variants=n_variants,
                                      aug_ratio=config.aug_ratio, mask_ratio=config.mask_ratio, seed=seed))
    return rows
