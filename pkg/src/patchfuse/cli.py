"""Command-line pipeline over one run directory of plain-file artifacts.

Stages write files, later stages read them, so any stage can be rerun or
inspected on its own::

    run/
      config.txt        fully resolved configuration of the last command
      manifest.json     dataset manifest                      (generate)
      wsis/             WSI RGB images + background masks      (generate)
      patches/          per-WSI patch manifests + retained PNG (tile)
      models/           per-fold ViT / CNN weights             (train-vit, train-cnn)
      saliency/         16-bit saliency PNG + JSON sidecar     (saliency)
      fusion/           per-WSI fusion reports, fold summary   (fuse)
      reports/          cross-validation CSV + JSON            (evaluate)
      renders/          saliency/vote overlay PNGs             (render)

Fold-wise commands (train-vit, train-cnn, saliency, fuse) resolve the same
seeded fold plan from (manifest, eval.k, seed), so stages agree on fold
membership without passing plan files around. Every command exits 0 exactly
when its artifacts were written; on failure, files the command created are
removed again (files that already existed are left with their last content)
and the exit status is nonzero, with missing upstream artifacts named in the
error. Reruns with the same config and seed write byte-identical artifacts.

``--threads`` bounds per-WSI worker threads in ``saliency`` and ``render``;
the other commands run serially. ``PATCHFUSE_LOG`` (error, info, debug)
selects the stderr log level.

Render overlays: the red channel is raised in proportion to the saliency map,
retained patches are outlined yellow when the patch classifier voted
malignant and cyan when it voted benign, and excluded patches are not drawn.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .cnn import CnnWsiClassifier, load_saliency, save_saliency
from .config import RunConfig, load_run_config, write_resolved_config
from .evaluate import (
    _derived_seed,
    _patch_arrays,
    confusion_metrics,
    cross_validate,
    make_folds,
    train_cnn,
    train_vit,
)
from .exceptions import MissingArtifactError
from .fusion import (
    FusionResult,
    PatchVerdict,
    fuse,
    fusion_report,
    majority_vote,
    patch_saliency_score,
    write_fusion_report,
)
from .image_io import save_rgb
from .synthetic import generate_dataset, load_dataset
from .tiling import (
    PATCH_SIZE,
    WsiTiler,
    patch_manifest,
    retained,
    tile,
    write_patch_manifest,
)
from .vit import VitPatchClassifier

log = logging.getLogger("patchfuse")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

MALIGNANT_OUTLINE = (1.0, 1.0, 0.0)
BENIGN_OUTLINE = (0.0, 1.0, 1.0)
OUTLINE_WIDTH = 4
SALIENCY_RED_GAIN = 0.7

_PATCH_ID = re.compile(r":r(\d+)c(\d+)$")


# ---- plumbing ------------------------------------------------------------


def _u64(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _resolve(args):
    """Config with flag overrides applied, plus out dir, seed, thread bound."""
    if args.config is not None and not os.path.exists(args.config):
        raise MissingArtifactError(args.config, hint="config file")
    cfg = load_run_config(args.config) if args.config else RunConfig.default()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = int(args.seed)
    if args.out is not None:
        overrides["out.dir"] = args.out
    if overrides:
        cfg = cfg.replace(overrides)
    threads = args.threads if args.threads else max(1, os.cpu_count() or 1)
    return cfg, cfg.get("out.dir"), cfg.get("seed"), threads


def _register(written, *paths):
    # Record prior existence so cleanup never deletes an earlier stage's file.
    for path in paths:
        written.append((path, os.path.exists(path)))


def _cleanup(written):
    for path, existed in reversed(written):
        if not existed:
            with contextlib.suppress(OSError):
                os.remove(path)


def _require(path, hint=None):
    if not os.path.exists(path):
        raise MissingArtifactError(path, hint=hint)
    return path


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"not JSON serializable: {type(value)!r}")


def _write_json(path, payload, written):
    _register(written, path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def _echo_config(out_dir, cfg, written):
    path = os.path.join(out_dir, "config.txt")
    _register(written, path)
    write_resolved_config(path, cfg)


def _load_run_dataset(out_dir):
    _require(
        os.path.join(out_dir, "manifest.json"),
        hint="run `patchfuse generate` first",
    )
    return load_dataset(out_dir)


def _plan(cfg, ds):
    return make_folds(ds.manifest, k=cfg.get("eval.k"), seed=cfg.get("seed"))


def _fold_arg(args, k):
    fold = int(args.fold)
    if not 0 <= fold < k:
        raise ValueError(f"--fold must be in [0, {k - 1}] for eval.k={k}, got {fold}")
    return fold


def _parallel_map(fn, items, threads):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---- commands ------------------------------------------------------------


def cmd_generate(args, written):
    cfg, out, seed, _ = _resolve(args)
    spec = cfg.generator_spec()
    n_benign, n_malignant = cfg.counts()
    _ensure_dir(out)
    _echo_config(out, cfg, written)
    # generate_dataset writes these paths itself; register them up front so a
    # mid-run failure still cleans up.
    _register(written, os.path.join(out, "manifest.json"))
    for index in range(n_benign + n_malignant):
        _register(
            written,
            os.path.join(out, "wsis", f"wsi-{index:03d}.png"),
            os.path.join(out, "wsis", f"wsi-{index:03d}.mask.png"),
        )
    ds = generate_dataset(n_benign, n_malignant, spec=spec, seed=seed, out_dir=out)
    log.info("generate: %d WSIs (%d benign / %d malignant) -> %s", len(ds.samples), n_benign, n_malignant, out)


def cmd_tile(args, written):
    cfg, out, _, _ = _resolve(args)
    ds = _load_run_dataset(out)
    max_fraction = cfg.get("tile.background_max_fraction")
    _echo_config(out, cfg, written)
    patches_dir = os.path.join(out, "patches")
    _ensure_dir(patches_dir)
    n_kept = 0
    for sample in ds.samples:
        records = tile(sample)
        manifest = patch_manifest(sample, records, max_fraction=max_fraction)
        path = os.path.join(patches_dir, f"{sample.id}.json")
        _register(written, path)
        write_patch_manifest(path, manifest)
        wsi_dir = os.path.join(patches_dir, sample.id)
        _ensure_dir(wsi_dir)
        for rec in retained(records, max_fraction):
            png = os.path.join(wsi_dir, f"r{rec.grid_row:02d}c{rec.grid_col:02d}.png")
            _register(written, png)
            save_rgb(png, rec.pixels)
            n_kept += 1
    log.info("tile: %d WSIs, %d retained patches -> %s", len(ds.samples), n_kept, patches_dir)


def cmd_train_vit(args, written):
    cfg, out, seed, _ = _resolve(args)
    ds = _load_run_dataset(out)
    plan = _plan(cfg, ds)
    fold = _fold_arg(args, plan.k)
    spec_fold = plan.folds[fold]
    by_id = {s.id: s for s in ds.samples}
    tiler = WsiTiler(
        downsample_to=cfg.get("vit.image_size"),
        background_max_fraction=cfg.get("tile.background_max_fraction"),
    ).fit()
    train_X, train_y, _ = _patch_arrays([by_id[i] for i in spec_fold.train_ids], tiler)
    val_X = val_y = None
    if spec_fold.val_ids:
        val_X, val_y, _ = _patch_arrays([by_id[i] for i in spec_fold.val_ids], tiler)
    model = train_vit(
        train_X,
        train_y,
        val_X,
        val_y,
        config=cfg.vit_config(),
        epochs=cfg.get("vit.epochs"),
        lr=cfg.get("vit.lr"),
        momentum=cfg.get("vit.momentum"),
        batch_size=cfg.get("vit.batch_size"),
        seed=_derived_seed(seed, fold, 0),
    )
    _ensure_dir(os.path.join(out, "models"))
    _echo_config(out, cfg, written)
    path = os.path.join(out, "models", f"vit-f{fold}.pfw")
    _register(written, path, path + ".cfg")
    model.save(path)
    _write_json(
        path + ".history.json",
        {
            "fold": fold,
            "history": model.history_,
            "best_val_accuracy": model.best_val_accuracy_,
        },
        written,
    )
    log.info("train-vit: fold %d (%d patches) -> %s", fold, len(train_y), path)


def cmd_train_cnn(args, written):
    cfg, out, seed, _ = _resolve(args)
    ds = _load_run_dataset(out)
    plan = _plan(cfg, ds)
    fold = _fold_arg(args, plan.k)
    spec_fold = plan.folds[fold]
    by_id = {s.id: s for s in ds.samples}
    train_samples = [by_id[i] for i in spec_fold.train_ids]
    val_samples = [by_id[i] for i in spec_fold.val_ids]
    model = train_cnn(
        [s.pixels for s in train_samples],
        [s.label for s in train_samples],
        [s.pixels for s in val_samples] if val_samples else None,
        [s.label for s in val_samples] if val_samples else None,
        config=cfg.cnn_config(),
        epochs=cfg.get("cnn.epochs"),
        lr=cfg.get("cnn.lr"),
        dropout=cfg.get("cnn.dropout"),
        batch_size=cfg.get("cnn.batch_size"),
        seed=_derived_seed(seed, fold, 1),
    )
    _ensure_dir(os.path.join(out, "models"))
    _echo_config(out, cfg, written)
    path = os.path.join(out, "models", f"cnn-f{fold}.pfw")
    _register(written, path, path + ".cfg")
    model.save(path)
    _write_json(
        path + ".history.json",
        {
            "fold": fold,
            "history": model.history_,
            "best_val_accuracy": model.best_val_accuracy_,
        },
        written,
    )
    log.info("train-cnn: fold %d (%d WSIs) -> %s", fold, len(train_samples), path)


def cmd_saliency(args, written):
    cfg, out, _, threads = _resolve(args)
    ds = _load_run_dataset(out)
    plan = _plan(cfg, ds)
    fold = _fold_arg(args, plan.k)
    model_path = os.path.join(out, "models", f"cnn-f{fold}.pfw")
    _require(model_path, hint=f"run `patchfuse train-cnn --fold {fold}` first")
    model = CnnWsiClassifier.load(model_path)
    by_id = {s.id: s for s in ds.samples}
    test = [by_id[i] for i in plan.folds[fold].test_ids]
    _ensure_dir(os.path.join(out, "saliency"))
    _echo_config(out, cfg, written)
    maps = _parallel_map(
        lambda sample: model.saliency_map(sample.pixels, wsi_id=sample.id),
        test,
        threads,
    )
    for smap in maps:
        prefix = os.path.join(out, "saliency", smap.wsi_id)
        _register(written, prefix + ".png", prefix + ".json")
        save_saliency(prefix, smap)
    log.info("saliency: fold %d, %d maps -> %s", fold, len(maps), os.path.join(out, "saliency"))


def cmd_fuse(args, written):
    cfg, out, _, _ = _resolve(args)
    ds = _load_run_dataset(out)
    plan = _plan(cfg, ds)
    fold = _fold_arg(args, plan.k)
    vit_path = os.path.join(out, "models", f"vit-f{fold}.pfw")
    _require(vit_path, hint=f"run `patchfuse train-vit --fold {fold}` first")
    model = VitPatchClassifier.load(vit_path)
    fusion_cfg = cfg.fusion_config()
    tiler = WsiTiler(
        downsample_to=model.config_.image_size,
        background_max_fraction=cfg.get("tile.background_max_fraction"),
    ).fit()
    by_id = {s.id: s for s in ds.samples}
    _ensure_dir(os.path.join(out, "fusion"))
    _echo_config(out, cfg, written)
    rows, fused_preds, majority_preds, labels = [], [], [], []
    for wsi_id in plan.folds[fold].test_ids:
        sample = by_id[wsi_id]
        prefix = os.path.join(out, "saliency", wsi_id)
        _require(prefix + ".png", hint=f"run `patchfuse saliency --fold {fold}` first")
        smap = load_saliency(prefix)
        records = tiler.transform([sample])[0]
        verdicts = []
        if records:
            preds = model.predict(np.stack([rec.input for rec in records]))
            verdicts = [
                PatchVerdict(
                    patch_id=rec.patch_id,
                    y_hat=int(y_hat),
                    score=patch_saliency_score(smap.values, rec.region),
                )
                for rec, y_hat in zip(records, preds)
            ]
        if verdicts:
            result = fuse(verdicts, fusion_cfg)
            majority_label = majority_vote(verdicts)
        else:
            # every patch was background-excluded: no evidence of malignancy
            result = FusionResult(label=0, s=0.0, retained_ids=[], n_verdicts=0)
            majority_label = 0
        path = os.path.join(out, "fusion", f"{wsi_id}.json")
        _register(written, path)
        write_fusion_report(path, fusion_report(wsi_id, verdicts, result, fusion_cfg))
        rows.append(
            {
                "wsi_id": wsi_id,
                "label": int(sample.label),
                "fused_label": result.label,
                "majority_label": majority_label,
                "s": result.s,
                "n_verdicts": len(verdicts),
                "n_retained": len(result.retained_ids),
            }
        )
        fused_preds.append(result.label)
        majority_preds.append(majority_label)
        labels.append(int(sample.label))
    summary = {
        "fold": fold,
        "threshold": fusion_cfg.threshold,
        "wsis": rows,
        "fused": confusion_metrics(fused_preds, labels).to_dict(),
        "majority": confusion_metrics(majority_preds, labels).to_dict(),
    }
    _write_json(os.path.join(out, "fusion", f"summary-f{fold}.json"), summary, written)
    log.info("fuse: fold %d, %d WSIs -> %s", fold, len(rows), os.path.join(out, "fusion"))


def cmd_evaluate(args, written):
    cfg, out, _, _ = _resolve(args)
    ds = _load_run_dataset(out)
    exp = cfg.experiment_config()
    _ensure_dir(os.path.join(out, "reports"))
    _echo_config(out, cfg, written)
    result = cross_validate(ds.samples, config=exp)
    csv_path = os.path.join(out, "reports", "results.csv")
    _register(written, csv_path)
    result.write_csv(csv_path)
    json_path = os.path.join(out, "reports", "report.json")
    _register(written, json_path)
    result.write_json(json_path)
    log.info(
        "evaluate: k=%d, fused accuracy %.2f, majority %.2f, patch %.2f -> %s",
        exp.k,
        result.fused.accuracy,
        result.majority.accuracy,
        result.patch.accuracy,
        csv_path,
    )


def _outline(canvas, region, color, width=OUTLINE_WIDTH):
    top, left, height, width_px = region
    bottom, right = top + height, left + width_px
    canvas[top : top + width, left:right] = color
    canvas[bottom - width : bottom, left:right] = color
    canvas[top:bottom, left : left + width] = color
    canvas[top:bottom, right - width : right] = color


def _render_overlay(sample, smap, report, patch_size=PATCH_SIZE):
    values = np.asarray(smap.values, dtype=np.float64)
    canvas = np.zeros(values.shape + (3,))
    h, w = sample.pixels.shape[:2]
    canvas[:h, :w] = sample.pixels
    canvas[..., 0] = np.clip(canvas[..., 0] + SALIENCY_RED_GAIN * values, 0.0, 1.0)
    for patch in report["patches"]:
        if not patch["retained"]:
            continue
        match = _PATCH_ID.search(patch["id"])
        if match is None:
            raise ValueError(f"patch id {patch['id']!r} carries no grid coordinates")
        grid_row, grid_col = int(match.group(1)), int(match.group(2))
        region = (grid_row * patch_size, grid_col * patch_size, patch_size, patch_size)
        color = MALIGNANT_OUTLINE if patch["y_hat"] == 1 else BENIGN_OUTLINE
        _outline(canvas, region, np.asarray(color))
    return canvas


def cmd_render(args, written):
    cfg, out, _, threads = _resolve(args)
    ds = _load_run_dataset(out)
    by_id = {s.id: s for s in ds.samples}
    ids = list(args.wsi)
    if not ids:
        ids = [
            s.id
            for s in ds.samples
            if os.path.exists(os.path.join(out, "fusion", f"{s.id}.json"))
            and os.path.exists(os.path.join(out, "saliency", f"{s.id}.png"))
        ]
    if not ids:
        raise MissingArtifactError(
            os.path.join(out, "fusion"),
            hint="no fusion reports found; run `patchfuse fuse` first",
        )
    _ensure_dir(os.path.join(out, "renders"))
    _echo_config(out, cfg, written)

    def build(wsi_id):
        if wsi_id not in by_id:
            raise ValueError(f"unknown WSI id {wsi_id!r}")
        prefix = os.path.join(out, "saliency", wsi_id)
        _require(prefix + ".png", hint=f"run `patchfuse saliency` for {wsi_id}")
        report_path = os.path.join(out, "fusion", f"{wsi_id}.json")
        _require(report_path, hint=f"run `patchfuse fuse` for {wsi_id}")
        with open(report_path, encoding="utf-8") as f:
            report = json.load(f)
        return _render_overlay(by_id[wsi_id], load_saliency(prefix), report)

    images = _parallel_map(build, ids, threads)
    for wsi_id, image in zip(ids, images):
        path = os.path.join(out, "renders", f"{wsi_id}.png")
        _register(written, path)
        save_rgb(path, image)
    log.info("render: %d overlays -> %s", len(ids), os.path.join(out, "renders"))


# ---- entry point ----------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        metavar="PATH",
        help="key=value run config; unset keys fall back to the reduced preset",
    )
    common.add_argument("--seed", type=_u64, metavar="U64", help="override the config seed")
    common.add_argument("--out", metavar="DIR", help="run directory (config key out.dir)")
    common.add_argument(
        "--threads",
        type=_positive_int,
        metavar="N",
        help="bound on worker threads (default: CPU count)",
    )
    foldable = argparse.ArgumentParser(add_help=False)
    foldable.add_argument(
        "--fold",
        type=int,
        default=0,
        metavar="K",
        help="fold index under the seeded eval.k plan (default 0)",
    )
    parser = argparse.ArgumentParser(
        prog="patchfuse",
        description="Synthetic WSI pipeline: tile, classify patches, fuse with saliency.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    sub.add_parser(
        "generate", parents=[common], help="write the synthetic dataset into the run directory"
    ).set_defaults(handler=cmd_generate)
    sub.add_parser(
        "tile", parents=[common], help="write per-WSI patch manifests and retained patch images"
    ).set_defaults(handler=cmd_tile)
    sub.add_parser(
        "train-vit", parents=[common, foldable], help="train the patch classifier for one fold"
    ).set_defaults(handler=cmd_train_vit)
    sub.add_parser(
        "train-cnn", parents=[common, foldable], help="train the WSI classifier for one fold"
    ).set_defaults(handler=cmd_train_cnn)
    sub.add_parser(
        "saliency", parents=[common, foldable], help="write saliency maps for one fold's test WSIs"
    ).set_defaults(handler=cmd_saliency)
    sub.add_parser(
        "fuse", parents=[common, foldable], help="fuse patch votes with saliency for one fold"
    ).set_defaults(handler=cmd_fuse)
    sub.add_parser(
        "evaluate", parents=[common], help="run the full cross-validation and write reports"
    ).set_defaults(handler=cmd_evaluate)
    render = sub.add_parser(
        "render", parents=[common], help="write saliency/vote overlay images"
    )
    render.add_argument("wsi", nargs="*", help="WSI ids (default: all with fusion reports)")
    render.set_defaults(handler=cmd_render)
    return parser


def main(argv=None):
    level = os.environ.get("PATCHFUSE_LOG", "info")
    if level not in LOG_LEVELS:
        print(
            f"patchfuse: PATCHFUSE_LOG must be one of error, info, debug; got {level!r}",
            file=sys.stderr,
        )
        return 2
    logging.basicConfig(stream=sys.stderr, format="%(message)s")
    log.setLevel(LOG_LEVELS[level])
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    written = []
    try:
        args.handler(args, written)
        return 0
    except Exception as exc:  # CLI boundary: report, clean up, nonzero exit
        _cleanup(written)
        log.debug("command failed", exc_info=True)
        print(f"patchfuse {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
