"""Single executable for the engine: train, sr, fuse, eval, count, degrade.

Exit codes: 0 ok, 2 flag error, 3 I/O error, 4 shape/config error,
5 numeric failure.  Errors print one machine-greppable line to stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .complexity import model_cost
from .data import ImageBuffer, LINEAR_REAL, SrDataset, degrade_folder, load_png, save_png
from .errors import CfsrError, ConfigError, DataError
from .metrics import evaluate_pairs
from .model import CfsrModel, ModelConfig, fuse_store
from .tensor import Tensor
from .train import TrainConfig, train_loop
from .weights import WeightStore


def _hr_size(value: str) -> tuple[int, int]:
    try:
        w, h = value.lower().split("x")
        w, h = int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 1280x720, got {value!r}")
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {value!r}")
    return w, h


def _fractions(value: str) -> tuple[float, ...]:
    try:
        parts = tuple(float(tok) for tok in value.split(",") if tok)
    except ValueError:
        raise argparse.ArgumentTypeError(f"milestones must be comma-separated floats, got {value!r}")
    if any(not 0 < f < 1 for f in parts):
        raise argparse.ArgumentTypeError("milestone fractions must lie in (0, 1)")
    return parts


def _add_arch_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--channels", type=int, default=48, help="feature channels C")
    p.add_argument("--brb", type=int, default=2, help="number of residual blocks")
    p.add_argument("--cfl", type=int, default=6, help="ConvFormer layers per block")
    p.add_argument("--k1", type=int, default=9, help="mixer depth-wise kernel size")
    p.add_argument("--expansion", type=float, default=2.0, help="FFN expansion ratio")


def _config_from(args) -> ModelConfig:
    return ModelConfig(
        channels=args.channels,
        n_brb=args.brb,
        n_cfl_per_brb=args.cfl,
        mixer_kernel=args.k1,
        scale=args.scale,
        efn_expansion=args.expansion,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfsr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="optimize a model on a directory of HR PNGs")
    p.add_argument("--data", required=True, help="directory of HR PNG images")
    p.add_argument("--lr-data", default=None, help="optional directory of matching LR PNGs")
    p.add_argument("--out", required=True, help="output directory for checkpoints and log")
    p.add_argument("--scale", type=int, required=True, choices=(2, 3, 4))
    p.add_argument("--iters", type=int, required=True, help="total training iterations")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--patch", type=int, default=64, help="LR patch size")
    p.add_argument("--lr", type=float, default=2e-4, help="initial learning rate")
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.99)
    p.add_argument("--eps", type=float, default=1e-8)
    p.add_argument("--schedule", choices=("halve", "constant"), default="halve")
    p.add_argument("--milestones", type=_fractions, default=(0.5, 0.75, 0.9),
                   help="halving points as fractions of --iters, e.g. 0.5,0.75,0.9")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--clip-norm", type=float, default=None)
    _add_arch_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sr", help="super-resolve a PNG or a directory of PNGs")
    p.add_argument("--weights", required=True)
    p.add_argument("--scale", type=int, required=True, choices=(2, 3, 4))
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", dest="out_path", required=True)
    p.add_argument("--fused", action="store_true",
                   help="fuse branched weights in memory before inference")
    _add_arch_flags(p)
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("fuse", help="merge EDC branches of a weight file")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", dest="out_path", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="PSNR/SSIM between two PNGs or directories")
    p.add_argument("--sr", dest="sr_path", required=True, help="reconstructed image(s)")
    p.add_argument("--hr", dest="hr_path", required=True, help="ground-truth image(s)")
    p.add_argument("--border", type=int, default=None,
                   help="pixels shaved per side (default: --scale if given, else 0)")
    p.add_argument("--scale", type=int, default=None, choices=(2, 3, 4),
                   help="sets the benchmark border convention")
    p.add_argument("--csv", default=None, help="also write results as CSV to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count", help="analytic parameter/FLOP budget")
    p.add_argument("--scale", type=int, required=True, choices=(2, 3, 4))
    p.add_argument("--hr-size", type=_hr_size, default=(1280, 720),
                   help="HR size WxH the FLOPs are evaluated at (default 1280x720)")
    p.add_argument("--csv", action="store_true", help="emit CSV instead of aligned text")
    p.add_argument("--branched", action="store_true",
                   help="count the training-time branched EDC instead of the fused one")
    _add_arch_flags(p)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("degrade", help="materialize bicubic LR copies of a directory")
    p.add_argument("--scale", type=int, required=True, choices=(2, 3, 4))
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", dest="out_path", required=True)
    p.set_defaults(func=cmd_degrade)

    return parser


def cmd_train(args) -> int:
    cfg = _config_from(args)
    train_cfg = TrainConfig(
        total_iters=args.iters,
        batch_size=args.batch,
        patch_size=args.patch,
        lr_init=args.lr,
        beta1=args.beta1,
        beta2=args.beta2,
        eps=args.eps,
        schedule=args.schedule,
        milestones=args.milestones,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        clip_norm=args.clip_norm,
    )
    dataset = SrDataset.from_folder(args.data, args.scale, args.lr_data)
    model = CfsrModel(cfg, np.random.default_rng(args.seed))
    checkpoints = train_loop(model, dataset, train_cfg, args.out)
    print(f"trained {args.iters} iterations; final checkpoint {checkpoints[-1]}")
    return 0


def _upscale_image(model: CfsrModel, img: ImageBuffer) -> ImageBuffer:
    x = Tensor(img.as_real().pixels.transpose(2, 0, 1)[None])
    y = model(x).data[0].transpose(1, 2, 0)
    return ImageBuffer(np.clip(y, 0.0, 1.0).astype(np.float32), LINEAR_REAL)


def cmd_sr(args) -> int:
    store = WeightStore.load(args.weights)
    cfg = _config_from(args)
    model = CfsrModel(cfg, mode=store.mode)
    model.load_state(store)

    in_path, out_path = Path(args.in_path), Path(args.out_path)
    if in_path.is_dir():
        sources = sorted(in_path.glob("*.png"))
        if not sources:
            raise DataError(f"no PNG files in {in_path}")
        out_path.mkdir(parents=True, exist_ok=True)
        targets = [out_path / s.name for s in sources]
    else:
        sources, targets = [in_path], [out_path]

    if args.fused and model.mode == "branched":
        first = load_png(sources[0])
        branched_out = _upscale_image(model, first)
        model.fuse()
        fused_out = _upscale_image(model, first)
        residual = float(np.max(np.abs(
            branched_out.pixels.astype(np.float64) - fused_out.pixels.astype(np.float64)
        )))
        print(f"fused in memory; equivalence residual {residual:.3e}")

    for src, dst in zip(sources, targets):
        img = load_png(src)
        save_png(_upscale_image(model, img), dst)
        print(f"{src} -> {dst}")
    return 0


def cmd_fuse(args) -> int:
    store = WeightStore.load(args.in_path)
    fused = fuse_store(store)
    fused.save(args.out_path)
    print(f"params before: {store.num_scalars()}  after: {fused.num_scalars()}")
    return 0


def cmd_eval(args) -> int:
    border = args.border
    if border is None:
        border = args.scale if args.scale is not None else 0
    sr_path, hr_path = Path(args.sr_path), Path(args.hr_path)
    if sr_path.is_dir() != hr_path.is_dir():
        raise ConfigError("--sr and --hr must both be files or both be directories")
    if sr_path.is_dir():
        names = sorted(p.name for p in sr_path.glob("*.png"))
        if not names:
            raise DataError(f"no PNG files in {sr_path}")
        pairs = [(n, load_png(sr_path / n), load_png(hr_path / n)) for n in names]
    else:
        pairs = [(sr_path.name, load_png(sr_path), load_png(hr_path))]
    rows, result = evaluate_pairs(pairs, border)

    name_w = max(len("image"), max(len(r[0]) for r in rows))
    print(f"{'image':<{name_w}}  {'psnr_db':>9}  {'ssim':>7}")
    for name, psnr, ssim in rows:
        print(f"{name:<{name_w}}  {psnr:>9.4f}  {ssim:>7.4f}")
    print(f"{'mean':<{name_w}}  {result.psnr_db:>9.4f}  {result.ssim:>7.4f}")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("name,psnr_db,ssim\n")
            for name, psnr, ssim in rows:
                fh.write(f"{name},{psnr:.6f},{ssim:.6f}\n")
            fh.write(f"mean,{result.psnr_db:.6f},{result.ssim:.6f}\n")
    return 0


def cmd_count(args) -> int:
    cfg = _config_from(args)
    hr_w, hr_h = args.hr_size
    lr_h = round(hr_h / args.scale)
    lr_w = round(hr_w / args.scale)
    report = model_cost(cfg, lr_h, lr_w, mode="branched" if args.branched else "fused")
    print(report.csv() if args.csv else report.text())
    return 0


def cmd_degrade(args) -> int:
    n = degrade_folder(args.in_path, args.out_path, args.scale)
    print(f"wrote {n} LR images to {args.out_path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CfsrError as exc:
        print(f"cfsr: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
