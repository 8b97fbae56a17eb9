"""Command-line entry point: train / generate / mix / eval over the layered
configuration. Exit codes: 0 success, 1 validation problem, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from .config import (DEFAULTS, ConfigError, discriminator_kwargs, dump_config, generator_config,
                     loss_weights, merge_config, train_config)
from .data import (IngestionError, RgbdDataset, load_dataset, load_label, load_rgb,
                   load_depth, sample_noise, save_depth, save_rgb)
from .discriminator import SegmentationDiscriminator
from .generator import RgbdGenerator
from .losses import dataset_class_weights
from .metrics import (DepthMetrics, FeatureStats, InceptionExtractor, channel_mean_extractor,
                      confusion_matrix, depth_metrics, frechet_distance, miou)
from .mixer import MODALITIES, MixSpec, mix_dataset
from .trainer import CheckpointError, Trainer, load_arrays, save_arrays


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1 (validation)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> _Parser:
    parser = _Parser(prog="scmis",
                     description="Train and run a label-conditional RGB-D image generator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser,
                            metavar="{train,generate,mix,eval}")

    p = sub.add_parser("train", help="run the adversarial training loop")
    p.add_argument("--config", help="YAML config file layered over the defaults")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides",
                   help="override one config key (repeatable)")
    p.add_argument("--dump-config", nargs="?", const="-", metavar="PATH",
                   help="write the merged config (stdout if no path) and exit")
    p.add_argument("--dump-loss-breakdown", action="store_true",
                   help="also write per-step loss components as CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate",
                       help="synthesize an RGB-D pair from a label map")
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--label", required=True, help="label-map PNG (255 = unlabeled)")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--out", required=True, help="output directory for rgb.png / depth.png")
    p.add_argument("--dump-taps", action="store_true",
                   help="also save discriminator features of the result (taps.npz)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("mix",
                       help="rewrite a dataset with classwise synthetic replacements")
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--data", required=True, help="dataset root with rgb/depth/label dirs")
    p.add_argument("--ratio", type=float, required=True, help="fraction of classes to replace")
    p.add_argument("--modality", choices=MODALITIES, required=True)
    p.add_argument("--out", required=True, help="output dataset root")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("eval", help="compute evaluation metrics")
    esub = p.add_subparsers(dest="metric", required=True, parser_class=_Parser,
                        metavar="{fid,depth,miou}")

    e = esub.add_parser("fid", help="Fréchet distance between image sets")
    e.add_argument("--real", required=True, help="directory of real PNGs")
    e.add_argument("--fake", required=True, help="directory of generated PNGs")
    e.add_argument("--weights", help="inception weights file (else $SCMIS_CACHE)")
    e.add_argument("--extractor", choices=("inception", "channel-mean"), default="inception")
    e.set_defaults(func=cmd_eval_fid)

    e = esub.add_parser("depth", help="AbsRel / RMSE / SqRel in meters")
    e.add_argument("--pred", required=True, help="directory of predicted 16-bit depth PNGs")
    e.add_argument("--gt", required=True, help="directory of ground-truth 16-bit depth PNGs")
    e.add_argument("--max-depth", type=float, default=10.0)
    e.set_defaults(func=cmd_eval_depth)

    e = esub.add_parser("miou", help="mean IoU between label sets")
    e.add_argument("--pred", required=True, help="directory of predicted label PNGs")
    e.add_argument("--gt", required=True, help="directory of ground-truth label PNGs")
    e.add_argument("--classes", type=int, required=True, help="number of classes")
    e.set_defaults(func=cmd_eval_miou)

    return parser


# ------------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = merge_config(args.config, args.overrides)
    if args.dump_config:
        text = dump_config(cfg)
        if args.dump_config == "-":
            sys.stdout.write(text)
        else:
            Path(args.dump_config).write_text(text)
        return 0
    if not cfg["data.root"]:
        raise ConfigError("missing required config key 'data.root' "
                          "(--set data.root=<dataset dir>)")

    index = load_dataset(cfg["data.root"], "train", cfg["data.num_classes"])
    dataset = RgbdDataset(index, size=cfg["data.size"], max_depth_m=cfg["data.max_depth_m"])
    gen = RgbdGenerator(generator_config(cfg))
    disc = SegmentationDiscriminator(**discriminator_kwargs(cfg))
    if cfg["disc.init"] == "pretrained":
        state = torch.load(cfg["disc.init_weights"], map_location="cpu", weights_only=True)
        disc.backbone.load_state_dict(state)

    alpha = None
    if cfg["loss.global_class_weights"]:
        alpha = dataset_class_weights((dataset[i]["label"] for i in range(len(dataset))),
                                      cfg["data.num_classes"])
    trainer = Trainer(gen, disc, train_config(cfg), weights=loss_weights(cfg),
                      ap_updates_disc=cfg["loss.ap_updates_disc"], global_alpha=alpha,
                      disc_input=cfg["disc.input"])
    if args.resume:
        meta = trainer.load_checkpoint(args.resume)
        print(f"resumed from {args.resume} at step {meta.get('step', 0)}")

    out = Path(cfg["train.out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "loss_breakdown.csv" if args.dump_loss_breakdown else None
    history = trainer.fit(dataset, log_path=out / "loss_log.jsonl", csv_path=csv_path,
                          ckpt_dir=out, config=cfg)
    trainer.save_checkpoint(out / "last.ckpt", cfg)
    if history:
        last = history[-1]
        print(f"step {last.step}: g_total {last.g_total:.4f} d_total {last.d_total:.4f}")
    print(f"checkpoint written to {out / 'last.ckpt'}")
    return 0


def _config_from_meta(meta: dict) -> dict:
    cfg = dict(DEFAULTS)
    cfg.update(meta.get("config") or {})
    return cfg


def _generator_from_checkpoint(path):
    """Rebuild the generator described by a checkpoint and give it the
    moving-average parameters (the inference-time weights)."""
    arrays, meta = load_arrays(path)
    cfg = _config_from_meta(meta)
    gen = RgbdGenerator(generator_config(cfg))
    state = {k[len("gen/"):]: torch.from_numpy(arrays[k].copy())
             for k in arrays if k.startswith("gen/")}
    if not state:
        raise CheckpointError(f"{path} holds no generator weights")
    gen.load_state_dict(state)
    with torch.no_grad():
        for name, p in gen.named_parameters():
            key = f"ema/{name}"
            if key in arrays:
                p.copy_(torch.from_numpy(arrays[key].copy()))
    gen.eval()
    return gen, cfg, arrays


def cmd_generate(args) -> int:
    gen, cfg, arrays = _generator_from_checkpoint(args.ckpt)
    h, w = gen.cfg.image_size
    label = load_label(args.label, gen.cfg.num_classes, size=(h, w))
    rng = torch.Generator().manual_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        pair = gen.generate(label, sample_noise(rng, h, w), cfg["data.max_depth_m"])
    save_rgb(out / "rgb.png", pair.rgb)
    save_depth(out / "depth.png", pair.depth)
    print(f"wrote {out / 'rgb.png'} and {out / 'depth.png'}")
    if args.dump_taps:
        disc = SegmentationDiscriminator(**discriminator_kwargs(cfg))
        state = {k[len("disc/"):]: torch.from_numpy(arrays[k].copy())
                 for k in arrays if k.startswith("disc/")}
        if state:
            disc.load_state_dict(state)
        disc.eval()
        disc_in = pair.rgb.unsqueeze(0)
        if disc.in_channels == 4:
            disc_in = torch.cat([disc_in, pair.depth.values.unsqueeze(0)], dim=1)
        with torch.no_grad():
            taps = disc(disc_in).taps
        np.savez(out / "taps.npz", **{f"tap{i}": t.numpy() for i, t in enumerate(taps)})
        print(f"wrote {out / 'taps.npz'}")
    return 0


def cmd_mix(args) -> int:
    gen, cfg, _ = _generator_from_checkpoint(args.ckpt)
    spec = MixSpec(ratio=args.ratio, modality=args.modality, seed=args.seed)
    index = load_dataset(args.data, "mix", gen.cfg.num_classes)
    manifest = mix_dataset(gen, index, spec, args.out, size=gen.cfg.image_size,
                           max_depth_m=cfg["data.max_depth_m"])
    print(f"mixed {len(manifest['samples'])} samples "
          f"({len(manifest['failures'])} failures) into {args.out}")
    return 0


def _png_pairs(dir_a, dir_b, what_a: str, what_b: str):
    a = {p.name: p for p in Path(dir_a).iterdir() if p.is_file()}
    b = {p.name: p for p in Path(dir_b).iterdir() if p.is_file()}
    names = sorted(set(a) & set(b))
    if not names:
        raise IngestionError(f"no common files between {what_a} {dir_a} and {what_b} {dir_b}")
    return [(a[n], b[n]) for n in names]


def _dir_features(directory, extractor, size=(256, 512), batch: int = 16) -> np.ndarray:
    paths = sorted(p for p in Path(directory).iterdir() if p.is_file())
    if len(paths) < 2:
        raise IngestionError(f"need at least 2 images in {directory}, found {len(paths)}")
    chunks = []
    for i in range(0, len(paths), batch):
        images = torch.stack([load_rgb(p, size) for p in paths[i:i + batch]])
        chunks.append(extractor(images))
    return np.concatenate(chunks, axis=0)


def cmd_eval_fid(args) -> int:
    if args.extractor == "channel-mean":
        extractor = channel_mean_extractor
    else:
        extractor = InceptionExtractor(args.weights)
    real = FeatureStats.from_features(_dir_features(args.real, extractor))
    fake = FeatureStats.from_features(_dir_features(args.fake, extractor))
    print(f"fid {frechet_distance(real, fake):.6f}")
    return 0


def cmd_eval_depth(args) -> int:
    pairs = _png_pairs(args.pred, args.gt, "predictions", "ground truth")
    per_image = []
    for pred_path, gt_path in pairs:
        pred = load_depth(pred_path, args.max_depth)
        gt = load_depth(gt_path, args.max_depth)
        per_image.append(depth_metrics(pred, gt))
    mean = DepthMetrics(
        abs_rel=float(np.mean([m.abs_rel for m in per_image])),
        rmse=float(np.mean([m.rmse for m in per_image])),
        sq_rel=float(np.mean([m.sq_rel for m in per_image])))
    print(f"abs_rel {mean.abs_rel:.6f} rmse {mean.rmse:.6f} sq_rel {mean.sq_rel:.6f} "
          f"({len(per_image)} images)")
    return 0


def cmd_eval_miou(args) -> int:
    pairs = _png_pairs(args.pred, args.gt, "predictions", "ground truth")
    total = np.zeros((args.classes, args.classes), dtype=np.int64)
    for pred_path, gt_path in pairs:
        pred = load_label(pred_path, args.classes)
        gt = load_label(gt_path, args.classes)
        total += confusion_matrix(gt.classes, pred.classes, args.classes)
    print(f"miou {miou(total):.6f} ({len(pairs)} images)")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else 0 if code is None else 1
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, IngestionError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
