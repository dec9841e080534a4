"""Command-line entry point: ``cmdiff {synth,fit-constraints,train,translate,evaluate,ablate}``.

Exit codes: 0 success, 2 usage/configuration error, 3 data error, 4 numeric failure.
"""

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .conditioning import Direction, Modality, detect_edges, replicate_gray_to_rgb
from .constraints import METRICS, ConstraintSpec, fit_constraints
from .data_io import (
    MANIFEST,
    atomic_write_text,
    generate_synthetic_pairs,
    load_image,
    load_image_u8,
    load_manifest,
    load_paired_dataset,
    load_sample,
    save_image,
)
from .denoiser import PROFILES, DenoiserConfig
from .errors import ConfigError, IngestionError, NumericError
from .metrics import (
    channel_histograms,
    evaluate_pairs,
    fid_from_features,
    histogram_distance,
    patch_features,
    read_features,
)
from .schedule import DESK_T, DiffusionSchedule, scaled_linear_schedule

log = logging.getLogger("cmdiff")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SWEEP_DEFAULTS = {
    "lambda": ["0", "10", "20", "40", "60"],
    "metric": list(METRICS),
    "edges": ["sobel", "canny", "external"],
}
CHANNEL_NAMES = ("R", "G", "B")


class UsageError(Exception):
    pass


def write_run_config(out_dir, command, args, **extra):
    cfg = {"command": command, "version": __version__}
    cfg.update({k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"})
    cfg.update(extra)
    atomic_write_text(Path(out_dir) / "run_config.json", json.dumps(cfg, indent=2, default=str))


def _prepare_out(out, force):
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"{out} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# synth / fit-constraints / train
# ---------------------------------------------------------------------------


def cmd_synth(args):
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.resolution < 8:
        raise UsageError("--resolution must be >= 8")
    out = _prepare_out(args.out, args.force)
    manifest = generate_synthetic_pairs(out, args.count, args.resolution, args.seed, with_edges=args.with_edges)
    write_run_config(out, "synth", args)
    print(f"wrote {manifest.N} pairs ({len(manifest.train)} train / {len(manifest.test)} test) to {out}")


def cmd_fit_constraints(args):
    modality = Modality.parse(args.modality)
    _, samples = load_paired_dataset(args.data, split=args.split)
    spec = fit_constraints(
        (s.image(modality) for s in samples),
        modality,
        bins=args.bins,
        lambda_ccl=args.lambda_ccl,
        lambda_scl=args.lambda_scl,
        metric=args.metric,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    spec.save(out)
    print(f"{modality.value} prior over {spec.pixel_count} pixels: mean {np.round(spec.prior_mean, 4).tolist()} "
          f"std {np.round(spec.prior_std, 4).tolist()} -> {out}")


def _train_configs(args):
    from .trainer import TrainConfig

    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    train = TrainConfig.from_dict(base.get("train", {}))
    profile = base.get("profile", args.profile)
    if profile not in PROFILES:
        raise UsageError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    model_cfg = DenoiserConfig.from_dict({**PROFILES[profile].to_dict(), **base.get("denoiser", {})})
    sched_d = base.get("schedule")
    T = args.T or (sched_d or {}).get("T") or DESK_T
    sched = DiffusionSchedule.from_dict(sched_d) if sched_d and not args.T else scaled_linear_schedule(T)
    overrides = {"total_iters": args.iters, "seed": args.seed, "lr": args.lr, "batch_size": args.batch_size,
                 "checkpoint_every": args.checkpoint_every}
    for k, v in overrides.items():
        if v is not None:
            setattr(train, k, v)
    if args.disable_tdg:
        train.disable_tdg = True
    if args.disable_cfc:
        train.disable_cfc = True
    train.validate()
    return train, model_cfg, sched


def cmd_train(args):
    from .trainer import run_training

    train, model_cfg, sched = _train_configs(args)
    manifest = load_manifest(args.data)
    if manifest.resolution != model_cfg.image_size:
        model_cfg.image_size = manifest.resolution
        model_cfg.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(it, rec):
        if it % max(1, args.log_every) == 0:
            log.info("iter %d  loss %.4f  ir->vis %.4f  vis->ir %.4f  lr %.3g",
                     it, rec["loss"], rec["loss_ir_to_vis"], rec["loss_vis_to_ir"], rec["lr"])

    state, rows = run_training(args.data, train, model_cfg, sched, out, progress=progress)
    write_run_config(out, "train", args, train=asdict(train), denoiser=state.model.cfg.to_dict(),
                     schedule=sched.to_dict())
    print(f"trained to iteration {state.iteration}; {len(rows)} epoch rows in {out / 'losses.csv'}")


# ---------------------------------------------------------------------------
# translate
# ---------------------------------------------------------------------------


def _collect_sources(src, direction, split, edge_detector, limit):
    """(ids, sources N x H x W x 3, edges N x H x W x 1) for a dataset root or an image folder."""
    src = Path(src)
    if (src / "ir").is_dir() and (src / "vis").is_dir():
        manifest = load_manifest(src)
        ids = manifest.ids if split == "all" else sorted(getattr(manifest, split))
        ids = ids[:limit] if limit else ids
        samples = [load_sample(src, i, manifest.resolution, edge_detector) for i in ids]
        return ids, np.stack([s.image(direction.source) for s in samples]), \
            np.stack([s.edges(direction.source) for s in samples])
    if not src.is_dir():
        raise IngestionError(f"input directory not found: {src}")
    mf = src / MANIFEST
    if mf.is_file():
        tag = json.loads(mf.read_text()).get("modality")
        if tag and Modality.parse(tag) is not direction.source:
            raise UsageError(f"input is tagged {tag!r} but {direction.name} needs a {direction.source.value} source")
    ids = sorted(p.stem for p in src.glob("*.png"))[: limit or None]
    if not ids:
        raise IngestionError(f"no PNG images in {src}")
    imgs = []
    for i in ids:
        img = load_image(src / f"{i}.png", gray=direction.source is Modality.IR)
        imgs.append(replicate_gray_to_rgb(img) if img.shape[-1] == 1 else img)
    if edge_detector == "external":
        raise UsageError("--edges external needs a dataset root with edges_ir/ and edges_vis/")
    return ids, np.stack(imgs), np.stack([detect_edges(x, edge_detector) for x in imgs])


def _translate_chunk(job):
    import torch

    torch.set_num_threads(1)
    from .sampler import translate
    from .trainer import load_checkpoint

    model, sched, _ = load_checkpoint(job["checkpoint"])
    spec = ConstraintSpec.from_dict(job["spec"]) if job["spec"] else None
    return translate(model, sched, job["sources"], job["direction"], spec=spec, seed=job["seed"], edges=job["edges"],
                     first_index=job["first_index"])


def run_translate(checkpoint, direction, src, out, spec=None, seed=0, edge_detector="sobel", split="test",
                  limit=None, batch=32, workers=1):
    """Library form of ``cmdiff translate``; returns the list of written ids."""
    from .trainer import read_manifest

    direction = Direction.parse(direction)
    manifest = read_manifest(checkpoint)
    ids, sources, edges = _collect_sources(src, direction, split, edge_detector, limit)
    size = manifest["denoiser"]["image_size"]
    if sources.shape[1] != size:
        raise UsageError(f"inputs are {sources.shape[1]}px but the checkpoint expects {size}px")
    # Noise streams are keyed by position in the input list, so outputs do not
    # depend on --batch or the worker count.
    jobs = []
    for start in range(0, len(ids), batch):
        sl = slice(start, start + batch)
        jobs.append({"checkpoint": str(checkpoint), "spec": spec.to_dict() if spec else None,
                     "direction": direction.id, "seed": seed, "first_index": start,
                     "sources": sources[sl], "edges": edges[sl]})
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_translate_chunk, jobs))
    else:
        results = [_translate_chunk(j) for j in jobs]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = np.concatenate(results)
    target = direction.target
    for sid, img in zip(ids, outputs):
        save_image(img[..., :1] if target is Modality.IR else img, out / f"{sid}.png")
    sidecar = {
        "checkpoint": str(checkpoint),
        "direction": direction.name,
        "seed": seed,
        "edges": edge_detector,
        "T": manifest["schedule"]["T"],
        "guided": bool(spec is not None and spec.active),
        "lambda_ccl": spec.lambda_ccl if spec else 0.0,
        "lambda_scl": spec.lambda_scl if spec else 0.0,
        "metric": spec.metric if spec else None,
        "guidance_scale": spec.guidance_scale if spec else 0.0,
        "count": len(ids),
    }
    atomic_write_text(out / "sampler.json", json.dumps(sidecar, indent=2))
    atomic_write_text(out / MANIFEST, json.dumps({"modality": target.value, "ids": ids}, indent=2))
    return ids


def _num_workers():
    try:
        return max(1, int(os.environ.get("CMDIFF_NUM_WORKERS", "1")))
    except ValueError:
        raise UsageError("CMDIFF_NUM_WORKERS must be an integer") from None


def _load_spec(args):
    if args.constraints is None:
        if (args.lambda_ccl or 0) > 0 or (args.lambda_scl or 0) > 0:
            raise UsageError("--constraints is required for nonzero --lambda-ccl/--lambda-scl")
        return None
    spec = ConstraintSpec.load(args.constraints)
    changes = {k: v for k, v in (("lambda_ccl", args.lambda_ccl), ("lambda_scl", args.lambda_scl),
                                 ("metric", args.metric), ("guidance_scale", args.guidance_scale)) if v is not None}
    return spec.with_(**changes)


def cmd_translate(args):
    direction = Direction.parse(args.direction)
    spec = _load_spec(args)
    if spec is not None and spec.modality and Modality.parse(spec.modality) is not direction.target:
        raise UsageError(f"constraints describe {spec.modality!r} but {direction.name} produces {direction.target.value}")
    ids = run_translate(args.checkpoint, direction, args.input, args.out, spec, args.seed, args.edges, args.split,
                        args.limit, args.batch, _num_workers())
    write_run_config(args.out, "translate", args)
    print(f"translated {len(ids)} images ({direction.name}) into {args.out}")


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _paired_ids(pred, truth):
    p = {x.stem for x in Path(pred).glob("*.png")}
    t = {x.stem for x in Path(truth).glob("*.png")}
    if not p:
        raise IngestionError(f"no predictions in {pred}")
    unpaired = sorted(p - t)
    if unpaired:
        raise IngestionError(f"predictions without ground truth: {', '.join(unpaired)}")
    return sorted(p)


def write_histogram_csvs(out, preds, truths, bins, prior_hist=None):
    """One CSV per channel: bin edges and pooled pred / truth (/ prior) frequencies."""
    hp = np.mean([channel_histograms(p, bins) for p in preds], axis=0)
    ht = np.mean([channel_histograms(t, bins) for t in truths], axis=0)
    paths = []
    for c in range(hp.shape[0]):
        path = Path(out) / f"hist_{CHANNEL_NAMES[c]}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin", "lo", "hi", "pred", "truth"] + (["prior"] if prior_hist is not None else []))
            for i in range(bins):
                row = [i, f"{i / bins:.6f}", f"{(i + 1) / bins:.6f}", f"{hp[c, i]:.8f}", f"{ht[c, i]:.8f}"]
                if prior_hist is not None:
                    row.append(f"{prior_hist[c][i]:.8f}")
                w.writerow(row)
        paths.append(path)
    return paths


def run_evaluate(pred, truth, out, features_a=None, features_b=None, prior=None, bins=32, window="gaussian11"):
    ids = _paired_ids(pred, truth)
    preds = [load_image_u8(Path(pred) / f"{i}.png") for i in ids]
    truths = [load_image_u8(Path(truth) / f"{i}.png") for i in ids]
    if preds[0].shape != truths[0].shape:
        raise IngestionError(f"prediction size {preds[0].shape} differs from truth {truths[0].shape}")
    prior_hist = None
    if prior is not None:
        spec = ConstraintSpec.load(prior)
        if spec.bins != bins:
            raise UsageError(f"--bins {bins} does not match the prior's {spec.bins} bins")
        prior_hist = spec.prior_hist
    report = evaluate_pairs(ids, preds, truths, window=window, bins=bins, prior_hist=prior_hist)
    if features_a and features_b:
        report.fid = fid_from_features(read_features(features_a), read_features(features_b))
    elif features_a or features_b:
        raise UsageError("--features-a and --features-b must be given together")
    else:
        report.notes.append("FID omitted: no feature files supplied")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "metrics.csv")
    write_histogram_csvs(out, preds, truths, bins, prior_hist)
    return report, preds, truths


def cmd_evaluate(args):
    report, _, _ = run_evaluate(args.pred, args.truth, args.out, args.features_a, args.features_b, args.prior,
                                args.bins, args.window)
    write_run_config(args.out, "evaluate", args)
    fid = f"  FID {report.fid:.4f}" if report.fid is not None else ""
    print(f"{report.count} pairs: PSNR {report.mean_psnr:.3f} dB  SSIM {report.mean_ssim:.4f}{fid}")


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

ABLATION_COLUMNS = ("sweep", "value", "n", "psnr_db", "ssim", "fid_patch", "hist_chi2", "mean_gap")


def run_ablation(sweep, values, base):
    """Translate + evaluate once per sweep value; returns summary rows.

    ``base`` keys: checkpoint, data, direction, out, and optionally
    constraints, seed, limit, split, edges, lambda, metric.
    """
    if sweep not in SWEEP_DEFAULTS:
        raise UsageError(f"unknown sweep {sweep!r}; expected one of {sorted(SWEEP_DEFAULTS)}")
    direction = Direction.parse(base["direction"])
    data = Path(base["data"])
    out_root = Path(base["out"])
    split = base.get("split", "test")
    spec0 = ConstraintSpec.load(base["constraints"]) if base.get("constraints") else None
    if spec0 is None:
        _, samples = load_paired_dataset(data, split="train")
        spec0 = fit_constraints((s.image(direction.target) for s in samples), direction.target)
    lam = float(base.get("lambda", 20.0))
    spec0 = spec0.with_(lambda_ccl=lam, lambda_scl=lam, metric=base.get("metric", spec0.metric))
    truth_dir = data / direction.target.value
    rows = []
    for value in values:
        spec, edges = spec0, base.get("edges", "sobel")
        if sweep == "lambda":
            spec = spec0.with_(lambda_ccl=float(value), lambda_scl=float(value))
        elif sweep == "metric":
            if value not in METRICS:
                raise UsageError(f"unknown metric {value!r}")
            spec = spec0.with_(metric=value)
        else:
            edges = value
        run_dir = out_root / f"{sweep}_{value}"
        ids = run_translate(base["checkpoint"], direction, data, run_dir / "pred", spec, int(base.get("seed", 0)),
                            edges, split, base.get("limit"), int(base.get("batch", 32)), _num_workers())
        report, preds, truths = run_evaluate(run_dir / "pred", truth_dir, run_dir / "eval", bins=spec.bins)
        feats_p = np.array([patch_features(p) for p in preds])
        feats_t = np.array([patch_features(t) for t in truths])
        y = np.array([np.asarray(p, dtype=np.float64) / 255.0 for p in preds])
        gap = np.abs(y.reshape(len(y), -1, 3).mean(axis=1) - spec0.prior_mean).mean()
        chi2 = np.mean([
            histogram_distance(h[c], spec0.prior_hist[c], "chi2", spec0.eps)
            for h in (channel_histograms(p, spec0.bins) for p in preds) for c in range(3)
        ])
        rows.append({
            "sweep": sweep,
            "value": value,
            "n": len(ids),
            "psnr_db": report.mean_psnr,
            "ssim": report.mean_ssim,
            "fid_patch": fid_from_features(feats_p, feats_t) if len(ids) >= 2 else float("nan"),
            "hist_chi2": float(chi2),
            "mean_gap": float(gap),
        })
    out_root.mkdir(parents=True, exist_ok=True)
    with open(out_root / f"ablation_{sweep}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return rows


def cmd_ablate(args):
    base = json.loads(Path(args.base_config).read_text())
    if args.out:
        base["out"] = args.out
    if "out" not in base:
        raise UsageError("base config needs an 'out' directory (or pass --out)")
    values = args.values.split(",") if args.values else SWEEP_DEFAULTS.get(args.sweep, [])
    rows = run_ablation(args.sweep, [v.strip() for v in values if v.strip()], base)
    write_run_config(base["out"], "ablate", args, base=base)
    for r in rows:
        print(f"{r['sweep']}={r['value']}: PSNR {r['psnr_db']:.3f}  SSIM {r['ssim']:.4f}  "
              f"FID(patch) {r['fid_patch']:.4f}  chi2 {r['hist_chi2']:.4f}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="cmdiff", description="Bidirectional IR/VIS translation diffusion toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic paired dataset")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--resolution", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--force", action="store_true")
    s.add_argument("--with-edges", action="store_true", help="also write Sobel edge maps as external edge files")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit-constraints", help="fit target-modality priors")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--modality", required=True)
    s.add_argument("--bins", type=int, default=32)
    s.add_argument("--split", choices=("train", "test"), default="train")
    s.add_argument("--lambda-ccl", type=float, default=20.0)
    s.add_argument("--lambda-scl", type=float, default=20.0)
    s.add_argument("--metric", choices=METRICS, default="chi2")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_fit_constraints)

    s = sub.add_parser("train", help="bidirectional diffusion training")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--config", type=Path)
    s.add_argument("--profile", default="desk", choices=sorted(PROFILES))
    s.add_argument("--iters", type=int)
    s.add_argument("--T", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--checkpoint-every", type=int)
    s.add_argument("--log-every", type=int, default=100)
    s.add_argument("--disable-tdg", action="store_true")
    s.add_argument("--disable-cfc", action="store_true")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("translate", help="constraint-guided translation")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--direction", required=True, choices=("ir2vis", "vis2ir"))
    s.add_argument("--constraints", type=Path)
    s.add_argument("--lambda-ccl", type=float)
    s.add_argument("--lambda-scl", type=float)
    s.add_argument("--metric", choices=METRICS)
    s.add_argument("--guidance-scale", type=float)
    s.add_argument("--edges", choices=("sobel", "canny", "external"), default="sobel")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", choices=("train", "test", "all"), default="test")
    s.add_argument("--limit", type=int)
    s.add_argument("--batch", type=int, default=32)
    s.add_argument("--in", dest="input", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("evaluate", help="PSNR / SSIM / FID and histogram tables")
    s.add_argument("--pred", type=Path, required=True)
    s.add_argument("--truth", type=Path, required=True)
    s.add_argument("--features-a", type=Path)
    s.add_argument("--features-b", type=Path)
    s.add_argument("--prior", type=Path, help="ConstraintSpec JSON for the prior histogram column")
    s.add_argument("--bins", type=int, default=32)
    s.add_argument("--window", choices=("gaussian11", "global"), default="gaussian11")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="sweep lambda, histogram metric or edge detector")
    s.add_argument("--sweep", required=True)
    s.add_argument("--values")
    s.add_argument("--base-config", type=Path, required=True)
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"cmdiff {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestionError, FileNotFoundError) as exc:
        print(f"cmdiff {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"cmdiff {args.command}: numeric failure: {exc} {exc.snapshot}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
