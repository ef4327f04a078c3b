"""Command-line interface: train, eval, infer, analyze, count, synth.

Only stdlib is imported at module load so ``SEMASK_THREADS`` can cap BLAS
parallelism before numpy initializes.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from pathlib import Path


def _apply_thread_cap() -> None:
    cap = os.environ.get("SEMASK_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ.setdefault(var, cap)


@contextlib.contextmanager
def output_dir(path: str):
    """Create the directory and hold a lock marker while the command runs."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".semask.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(
            f"output directory {out} is locked by another run "
            f"(remove {lock} if that run is dead)"
        ) from None
    os.close(fd)
    try:
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _parse_scales(text: str) -> tuple[float, ...]:
    try:
        scales = tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad scales list {text!r}") from None
    if not scales:
        raise argparse.ArgumentTypeError("scales list is empty")
    return scales


def _parse_pixel(text: str) -> tuple[int, int]:
    try:
        h, w = (int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"pixel must be 'h,w', got {text!r}") from None
    return h, w


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semask",
        description="Semantically masked windowed-attention segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model per config")
    p.add_argument("--config", help="JSON run config (defaults to the toy profile)")
    p.add_argument("--preset", choices=("tiny", "small", "base", "large", "toy"),
                   help="override the config's encoder preset")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="report mIoU for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset root (defaults to the config's synth corpus)")
    p.add_argument("--config", help="run config used for the dataset")
    p.add_argument("--scales", type=_parse_scales, help="comma-separated scale factors")
    p.add_argument("--flip", action="store_true", help="add mirrored inputs when multi-scale")
    p.add_argument("--single", action="store_true", help="single-scale protocol")
    p.add_argument("--out", required=True)

    p = sub.add_parser("infer", help="write predicted masks for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset root with images/")
    p.add_argument("--scales", type=_parse_scales)
    p.add_argument("--flip", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("analyze", help="emit pixel similarity heat maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="input image (PNG)")
    p.add_argument("--stage", type=int, choices=(1, 2, 3, 4), required=True)
    p.add_argument("--pixel", type=_parse_pixel, required=True, help="target pixel 'h,w'")
    p.add_argument("--which", choices=("pre", "post", "both"), default="both")
    p.add_argument("--out", required=True)

    p = sub.add_parser("count", help="parameter and MAC table")
    p.add_argument("--preset", choices=("tiny", "small", "base", "large", "toy"))
    p.add_argument("--classes", type=int, default=150)
    p.add_argument("--decoder-width", type=int, default=128)
    p.add_argument("--res", type=int, default=512, help="input extent for MAC counting")
    p.add_argument("--out", help="also write the table as CSV")

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=7)
    return parser


# ---------------------------------------------------------------------------
# command bodies (heavy imports stay inside)


def _load_run_config(path, seed_override=None):
    from semask.config import RunConfig, parse_config

    cfg = parse_config(path) if path else RunConfig()
    if seed_override is not None:
        cfg.train.seed = seed_override
    return cfg


def _dataset_from(cfg, root_override=None):
    from semask.data import load_dataset, synth_shapes

    if root_override:
        return load_dataset(root_override, cfg.num_classes)
    if cfg.data.root:
        return load_dataset(cfg.data.root, cfg.num_classes)
    s = cfg.data.synth
    return synth_shapes(s.count, s.height, s.width, cfg.num_classes, s.seed)


def cmd_train(args) -> int:
    from semask.checkpoint import save_checkpoint
    from semask.model import SegModel
    from semask.training import train_loop

    cfg = _load_run_config(args.config, args.seed)
    if args.preset:
        cfg.preset = args.preset
    dataset = _dataset_from(cfg)
    with output_dir(args.out) as out:
        (out / "config.resolved.json").write_text(cfg.to_json())
        model = SegModel(cfg.encoder_config(), cfg.decoder_width,
                         seed=cfg.train.seed, semantic=cfg.semantic)
        print(f"training {cfg.preset} ({model.num_params()} params) for "
              f"{cfg.train.total_iters} iterations on {len(dataset)} samples")

        def progress(row):
            it, lr, l1, l2, lt = row
            if it % 50 == 0 or it == cfg.train.total_iters - 1:
                print(f"  iter {it:5d}  lr {lr:.3e}  L1 {l1:.4f}  L2 {l2:.4f}  LT {lt:.4f}")

        result = train_loop(model, dataset, cfg.train,
                            log_path=out / "metrics.csv", progress=progress)
        extra = {"train_res": cfg.train.crop, "mean": list(cfg.train.mean),
                 "ignore_label": cfg.train.ignore_label}
        save_checkpoint(out / "checkpoint.smsk", model,
                        iteration=cfg.train.total_iters,
                        optimizer=result.optimizer,
                        rng_state=result.rng_state, extra_config=extra)
        print(f"wrote {out / 'checkpoint.smsk'} and {out / 'metrics.csv'}")
    return 0


def _load_model(path):
    from semask.checkpoint import build_model, load_checkpoint

    ck = load_checkpoint(path)
    return ck, build_model(ck)


def cmd_eval(args) -> int:
    import numpy as np

    from semask.evaluate import evaluate_dataset, miou, pixel_accuracy
    from semask.training import DEFAULT_SCALES

    ck, model = _load_model(args.checkpoint)
    cfg = _load_run_config(args.config)
    cfg.num_classes = model.cfg.num_classes
    dataset = _dataset_from(cfg, args.data)
    train_res = ck.config.get("train_res", cfg.train.crop)
    mean = tuple(ck.config.get("mean", cfg.train.mean))
    ignore = ck.config.get("ignore_label", cfg.train.ignore_label)

    protocols: list[tuple[str, tuple | None]] = []
    if args.single:
        protocols.append(("single", None))
    if args.scales is not None:
        protocols.append(("multiscale", args.scales))
    if not protocols:  # default report covers both protocols
        protocols = [("single", None), ("multiscale", DEFAULT_SCALES)]

    lines = [f"samples: {len(dataset)}"]
    per_class = {}
    for label, scales in protocols:
        cm = evaluate_dataset(model, dataset, train_res, ignore,
                              scales=scales, flip=args.flip, mean=mean)
        ious, mean_iou = miou(cm)
        per_class[label] = ious
        mode = "single-scale" if scales is None else \
            f"multi-scale {list(scales)}{' + flip' if args.flip else ''}"
        lines.append(f"[{label}] protocol: {mode}")
        lines.append(f"[{label}] pixel accuracy: {pixel_accuracy(cm):.4f}")
        lines.append(f"[{label}] mIoU: {mean_iou:.4f}")
        for c, iou in enumerate(ious):
            lines.append(f"[{label}]   class {c}: "
                         + ("absent" if np.isnan(iou) else f"{iou:.4f}"))
    report = "\n".join(lines) + "\n"
    with output_dir(args.out) as out:
        (out / "report.txt").write_text(report)
        for label, ious in per_class.items():
            with open(out / f"per_class_{label}.csv", "w") as fh:
                fh.write("class,iou\n")
                for c, iou in enumerate(ious):
                    fh.write(f"{c},{'' if np.isnan(iou) else f'{iou:.6f}'}\n")
    print(report, end="")
    return 0


def cmd_infer(args) -> int:
    from semask.data import colorize_mask, save_image_png, save_mask_png
    from semask.evaluate import infer_multiscale, infer_single

    ck, model = _load_model(args.checkpoint)
    train_res = ck.config.get("train_res", 64)
    mean = tuple(ck.config.get("mean", (0.5, 0.5, 0.5)))
    k = model.cfg.num_classes

    from semask.data import load_dataset

    dataset = load_dataset(args.data, k)
    with output_dir(args.out) as out:
        for i in range(len(dataset)):
            img, _ = dataset[i]
            if args.scales:
                pred = infer_multiscale(model, img, args.scales, args.flip, mean)
            else:
                pred = infer_single(model, img, train_res, mean)
            stem = Path(dataset.names[i]).stem
            save_mask_png(out / f"{stem}_pred.png", pred)
            save_image_png(out / f"{stem}_color.png", colorize_mask(pred, k))
        print(f"wrote {2 * len(dataset)} files to {out}")
    return 0


def cmd_analyze(args) -> int:
    import numpy as np
    from PIL import Image

    from semask.evaluate import similarity_map

    ck, model = _load_model(args.checkpoint)
    mean = tuple(ck.config.get("mean", (0.5, 0.5, 0.5)))
    image = np.asarray(Image.open(args.image).convert("RGB")).astype(np.float32) / 255.0
    kinds = ("pre", "post") if args.which == "both" else (args.which,)
    with output_dir(args.out) as out:
        for kind in kinds:
            sim = similarity_map(model, image, args.stage, args.pixel, kind, mean)
            gray = np.round((sim + 1.0) * 127.5).astype(np.uint8)
            stem = f"stage{args.stage}_{args.pixel[0]}_{args.pixel[1]}_{kind}"
            Image.fromarray(gray, mode="L").save(out / f"{stem}.png")
            np.savetxt(out / f"{stem}.csv", sim, delimiter=",", fmt="%.6f")
            print(f"{kind}: self-similarity {sim[args.pixel[0], args.pixel[1]]:.3f}, "
                  f"mean {sim.mean():.3f} -> {out / (stem + '.png')}")
    return 0


def cmd_count(args) -> int:
    from semask.encoder import EncoderConfig, count_flops, count_params

    presets = [args.preset] if args.preset else ["tiny", "small", "base", "large", "toy"]
    rows = []
    for name in presets:
        cfg = EncoderConfig.preset(name, args.classes)
        width = 32 if name == "toy" else args.decoder_width
        p = count_params(cfg, width)
        f = count_flops(cfg, args.res, args.res, width)
        rows.append({
            "preset": name,
            "backbone_m": p["backbone"] / 1e6,
            "semantic_m": p["semantic_layers"] / 1e6,
            "decoder_m": p["fpn_decoder"] / 1e6,
            "total_m": p["total"] / 1e6,
            "backbone_gmac": f["backbone"] / 1e9,
            "semantic_gmac": f["semantic_layers"] / 1e9,
            "semantic_share": 100.0 * f["semantic_layers"] / f["backbone"],
            "total_gflops": 2.0 * f["total"] / 1e9,
        })
    hdr = (f"{'preset':<7} {'backbone(M)':>12} {'semantic(M)':>12} {'decoder(M)':>11} "
           f"{'total(M)':>9} {'bb GMACs':>9} {'sem GMACs':>9} {'sem %':>6} {'GFLOPs':>8}")
    print(f"classes={args.classes} input={args.res}x{args.res} (GFLOPs = 2 x MACs)")
    print(hdr)
    for r in rows:
        print(f"{r['preset']:<7} {r['backbone_m']:>12.2f} {r['semantic_m']:>12.2f} "
              f"{r['decoder_m']:>11.2f} {r['total_m']:>9.2f} {r['backbone_gmac']:>9.2f} "
              f"{r['semantic_gmac']:>9.2f} {r['semantic_share']:>6.2f} "
              f"{r['total_gflops']:>8.2f}")
    if args.out:
        with output_dir(args.out) as out:
            with open(out / "counts.csv", "w") as fh:
                keys = list(rows[0])
                fh.write(",".join(keys) + "\n")
                for r in rows:
                    fh.write(",".join(str(r[k]) for k in keys) + "\n")
    return 0


def cmd_synth(args) -> int:
    from semask.data import synth_shapes, write_dataset

    ds = synth_shapes(args.count, args.height, args.width, args.classes, args.seed)
    with output_dir(args.out) as out:
        names = write_dataset(ds, out)
    print(f"wrote {len(names)} image/mask pairs to {args.out}")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "analyze": cmd_analyze,
    "count": cmd_count,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
