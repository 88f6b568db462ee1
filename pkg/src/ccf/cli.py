"""Command-line entry point: ``ccf <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 internal
invariant violation. Logs go to stderr; artifacts to ``--out``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import platform
import sys

import numpy as np

from . import __version__, kernels
from .bench import pyramid_benchmark, rows_to_csv
from .channels import ConcatBackend, HogLuvBackend
from .config import ConfigError, RunConfig, format_config, load_config, parse_config
from .convnet import ConvBackend, WeightFormatError, load_weights
from .detector import (
    DetectorModel,
    ModelFormatError,
    detect,
    dump_model,
    load_model,
    train_detector,
)
from .edges import (
    EdgeModelError,
    detect_edges,
    dump_edge_model,
    edge_feature_space,
    edge_nms,
    gather_edge_samples,
    load_edge_model,
    read_label_pgm,
    train_edge_forest,
)
from .forest import ForestFormatError, feature_occurrence, parse_forest
from .image import AnnotationError, ImageError, load_image, read_annotations, write_pnm
from .pyramid import PackingError, PowerLawModel, estimate_lambda, make_scale_grid
from .synthetic import DetectionScene

log = logging.getLogger("ccf")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4
IMAGE_EXTS = (".png", ".pgm", ".ppm", ".pnm", ".jpg", ".jpeg", ".bmp")


class DataError(Exception):
    pass


DATA_ERRORS = (
    DataError, ImageError, AnnotationError, WeightFormatError, ModelFormatError, ForestFormatError,
    EdgeModelError, PackingError, FileNotFoundError,
)


# ---------------------------------------------------------------------------
# helpers


def list_images(path):
    if os.path.isfile(path):
        return [path]
    if not os.path.isdir(path):
        raise DataError(f"no such image file or directory: {path}")
    files = sorted(
        os.path.join(path, f) for f in os.listdir(path) if os.path.splitext(f)[1].lower() in IMAGE_EXTS
    )
    if not files:
        raise DataError(f"no images in {path}")
    return files


def make_backend(cfg: RunConfig):
    if cfg.backend == "hogluv":
        return HogLuvBackend(cfg.shrink)
    conv = ConvBackend(load_weights(cfg.weights), cfg.pad)
    if cfg.backend == "conv":
        return conv
    return ConcatBackend(HogLuvBackend(conv.shrink), conv)


def load_lambdas(path):
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    sig = [math.inf if s is None else s for s in d["sigmas"]]
    return PowerLawModel(np.array(d["lambdas"]), np.array(sig), tuple(d.get("fit_range", (-1.0, 0.0))))


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, cfg, outputs, args=None):
    """Run record: command, config (text and hash), seed, versions and
    output checksums. Holds no timestamps, so repeated runs match."""
    manifest = {
        "command": command,
        "args": args or {},
        "config": format_config(cfg, include_workers=False),
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "versions": {
            "ccf": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
            "kernels": kernels.BACKEND,
        },
        "outputs": {os.path.basename(p): _sha256(p) for p in outputs},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _write_bytes(path, data):
    with open(path, "wb") as fh:
        fh.write(data)


def _out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg, args):
    if not cfg.annotations:
        raise ConfigError("'annotations' is required for train")
    records = read_annotations(cfg.annotations)
    if not records:
        raise DataError(f"{cfg.annotations}: no images")
    scenes = [DetectionScene(load_image(p), boxes) for p, boxes in records.items()]
    backend = make_backend(cfg)
    plm = load_lambdas(cfg.lambdas_file) if cfg.lambdas_file else None
    mining = [load_image(p) for p in list_images(cfg.mining_images)] if cfg.mining_images else None
    opts = dict(
        box_ratio=cfg.box_ratio, per_octave=cfg.per_octave, upsample=cfg.upsample, mode=cfg.pyramid_mode,
        canvas=(cfg.canvas, cfg.canvas), pad=cfg.pad, nms_overlap=cfg.nms_overlap, plm=plm,
    )
    history = train_detector(
        scenes, backend, cfg.window, cfg.n_trees, cfg.depth, cfg.frac_features, cfg.seed,
        n_neg_per_image=cfg.n_neg_per_image, rounds=cfg.rounds, n_mine=cfg.n_mine,
        mine_per_image=cfg.mine_per_image, threshold=cfg.threshold, model_opts=opts, log=log.info,
        jitter=cfg.jitter, mine_threshold=cfg.mine_threshold, mining_images=mining,
        cascade_every=cfg.cascade_every, cascade_margin=cfg.cascade_margin,
    )
    out = _out_dir(args.out)
    model_path = os.path.join(out, "model.cfd")
    _write_bytes(model_path, dump_model(history[-1].model))
    rounds_path = os.path.join(out, "rounds.csv")
    with open(rounds_path, "w", encoding="utf-8") as fh:
        fh.write("round,negatives,mined\n")
        for r in history:
            fh.write(f"{r.round},{r.n_negatives},{r.n_mined}\n")
    write_manifest(os.path.join(out, "manifest.json"), "train", cfg, [model_path, rounds_path])
    log.info("wrote %s", model_path)


def cmd_detect(cfg, args):
    model: DetectorModel = load_model(args.model)
    if args.threshold is not None:
        model.threshold = args.threshold
    if cfg.lambdas_file:
        model.plm = load_lambdas(cfg.lambdas_file)
    if "approx" in (args.mode or model.mode) and model.plm is None:
        raise ConfigError("approximate pyramids need 'lambdas_file' (or a model trained with one)")
    paths = list_images(args.images)
    lines = []
    for p in paths:
        img = load_image(p)
        try:
            dets = detect(img, model, mode=args.mode)
        except ValueError as exc:
            raise DataError(f"{p}: {exc}") from exc
        log.info("%s: %d detections", p, len(dets))
        for d in dets:
            lines.append(f"{p} {d.x:.2f} {d.y:.2f} {d.w:.2f} {d.h:.2f} {d.score:.6f}\n")
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.writelines(lines)
    write_manifest(args.out + ".manifest.json", "detect", cfg, [args.out],
                   {"model": _sha256(args.model), "mode": args.mode, "threshold": model.threshold})


def cmd_edges(cfg, args):
    forest = load_edge_model(args.model)
    img = load_image(args.image)
    try:
        E = detect_edges(img, forest, cfg.edge_stride, multiscale=args.multiscale or cfg.multiscale)
    except ValueError as exc:
        raise DataError(f"{args.image}: {exc}") from exc
    if not args.no_nms:
        E = edge_nms(E)
    write_pnm(args.out, np.clip(np.rint(E * 255), 0, 255).astype(np.uint8))
    log.info("wrote %s", args.out)


def _edge_pairs(cfg):
    if not cfg.edge_images or not cfg.edge_labels:
        raise ConfigError("'edge_images' and 'edge_labels' are required for train-edges")
    pairs = []
    for p in list_images(cfg.edge_images):
        stem = os.path.splitext(os.path.basename(p))[0]
        lab = os.path.join(cfg.edge_labels, stem + ".pgm")
        if not os.path.isfile(lab):
            raise DataError(f"no label map {lab} for {p}")
        pairs.append((load_image(p), read_label_pgm(lab)))
    return pairs


def cmd_train_edges(cfg, args):
    pairs = _edge_pairs(cfg)
    backend = HogLuvBackend(4)
    space = edge_feature_space(backend.n_maps, n_pairs=cfg.edge_pairs, pair_seed=cfg.seed)
    for img, lab in pairs:
        if lab.shape != (img.height, img.width):
            raise DataError("label map and image differ in size")
    samples = gather_edge_samples([p[0] for p in pairs], [p[1] for p in pairs], space, backend,
                                  cfg.edge_per_image, seed=cfg.seed)
    try:
        forest = train_edge_forest(samples, space, cfg.edge_trees, cfg.edge_depth, cfg.seed, backend=backend)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    out = _out_dir(args.out)
    path = os.path.join(out, "edges.cfe")
    _write_bytes(path, dump_edge_model(forest))
    write_manifest(os.path.join(out, "manifest.json"), "train-edges", cfg, [path])
    log.info("wrote %s", path)


def cmd_pyramid_bench(cfg, args):
    backend = make_backend(cfg)
    plm = load_lambdas(cfg.lambdas_file) if cfg.lambdas_file else None
    rows = pyramid_benchmark(backend, cfg.bench_size, cfg.per_octave, cfg.window, cfg.bench_repeats, cfg.seed, plm,
                             (cfg.canvas, cfg.canvas), cfg.pad)
    out = _out_dir(args.out)
    path = os.path.join(out, "pyramid_bench.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(rows_to_csv(rows))
    sys.stdout.write(rows_to_csv(rows))
    # timings vary between runs, so the manifest records no checksum for them
    write_manifest(os.path.join(out, "manifest.json"), "pyramid-bench", cfg, [])


def _read_forest(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] == b"CFD1":
        return load_model(path).forest
    return parse_forest(buf)


def cmd_importance(cfg, args):
    forest = _read_forest(args.model)
    counts, occ = feature_occurrence(forest)
    out = _out_dir(args.out)
    counts_path = os.path.join(out, "map_counts.csv")
    with open(counts_path, "w", encoding="utf-8") as fh:
        fh.write("map,count\n")
        for m, c in enumerate(counts):
            fh.write(f"{m},{c}\n")
    occ_path = os.path.join(out, "occupancy.csv")
    n_maps = len(counts)
    with open(occ_path, "w", encoding="utf-8") as fh:
        fh.write("top_percent,n_maps,share\n")
        for n, share in occ.items():
            fh.write(f"{n},{max(1, math.ceil(n / 100 * n_maps))},{share:.6f}\n")
    if counts.sum() != forest.n_internal:
        raise AssertionError("map counts do not sum to the number of internal nodes")
    write_manifest(os.path.join(out, "manifest.json"), "importance", cfg, [counts_path, occ_path],
                   {"model": _sha256(args.model)})
    for n, share in occ.items():
        sys.stdout.write(f"top {n}%: {share:.3f}\n")


def cmd_fit_lambda(cfg, args):
    src = args.images or cfg.lambda_images
    if not src:
        raise ConfigError("'lambda_images' (or --images) is required for fit-lambda")
    images = [load_image(p) for p in list_images(src)]
    backend = make_backend(cfg)
    h = min(im.height for im in images)
    w = min(im.width for im in images)
    grid = make_scale_grid((h, w), cfg.per_octave, (cfg.shrink * 4, cfg.shrink * 4), 1, backend.shrink)
    plm = estimate_lambda(images, backend, grid)
    out = _out_dir(args.out)
    path = os.path.join(out, "lambdas.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({
            "lambdas": [round(float(v), 10) for v in plm.lambdas],
            "sigmas": [None if not math.isfinite(s) else round(float(s), 10) for s in plm.sigmas],
            "fit_range": list(plm.fit_range),
            "backend": backend.describe(),
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(os.path.join(out, "manifest.json"), "fit-lambda", cfg, [path])
    log.info("lambdas: %s", np.round(plm.lambdas, 3).tolist())


COMMANDS = {
    "train": cmd_train,
    "detect": cmd_detect,
    "edges": cmd_edges,
    "train-edges": cmd_train_edges,
    "pyramid-bench": cmd_pyramid_bench,
    "importance": cmd_importance,
    "fit-lambda": cmd_fit_lambda,
}


def build_parser():
    p = argparse.ArgumentParser(prog="ccf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--kernels", choices=("auto", "cython", "python"), default="auto")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="train a detector with hard negative mining")
    s.add_argument("--out", required=True)
    s = sub.add_parser("detect", parents=[common], help="run a detector over images")
    s.add_argument("--model", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("exact", "patchwork", "approx", "approx+patchwork"))
    s.add_argument("--threshold", type=float)
    s = sub.add_parser("edges", parents=[common], help="edge map of one image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--multiscale", action="store_true")
    s.add_argument("--no-nms", action="store_true", help="write the raw edge probabilities")
    s = sub.add_parser("train-edges", parents=[common], help="train a structured edge forest")
    s.add_argument("--out", required=True)
    s = sub.add_parser("pyramid-bench", parents=[common], help="time pyramid construction modes")
    s.add_argument("--out", required=True)
    s = sub.add_parser("importance", parents=[common], help="channel-map occurrence in a forest")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s = sub.add_parser("fit-lambda", parents=[common], help="fit power-law exponents")
    s.add_argument("--images")
    s.add_argument("--out", required=True)
    return p


def _overrides(items):
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value
    return out


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.kernels != "auto":
            kernels.use(args.kernels)
        overrides = _overrides(args.set)
        cfg = load_config(args.config, overrides) if args.config else parse_config("", overrides)
        cfg.validate()
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (AssertionError, FloatingPointError) as exc:
        log.error("internal error: %s", exc)
        return EXIT_INTERNAL
    except ValueError as exc:
        # remaining ValueErrors come from option combinations the model rejects
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
