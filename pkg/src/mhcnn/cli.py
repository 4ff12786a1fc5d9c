"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import data as D
from . import metrics as M
from . import report, runtime
from .tensor import TensorError


class _UsageError(Exception):
    def __init__(self, message, parser):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message, self)


def build_parser() -> _Parser:
    parser = _Parser(prog="mhcnn", description="multi-head convolutional image denoiser")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True, help="path to the run config JSON")

    p = sub.add_parser("denoise", help="denoise one PNM image")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--input", required=True, help="noisy PGM/PPM image")
    p.add_argument("--output", required=True, help="where to write the denoised image")
    p.add_argument("--dump-psnr", help="clean PGM/PPM to report PSNR against")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a folder of clean images")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="folder of clean .pgm/.ppm images")
    p.add_argument("--sigma", required=True, type=float)
    p.add_argument("--out", default="eval_out", help="report directory")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="run the seven-variant ablation harness")
    p.add_argument("--config", required=True)

    sub.add_parser("gradcheck", help="run the block-by-block gradient check suite")

    p = sub.add_parser("dump-features", help="write feature maps of one stage as PGM tiles")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--stage", required=True, help="head0|head1|head2|mpa_out")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-data", help="generate a procedural PNM corpus")
    p.add_argument("--count", required=True, type=int)
    p.add_argument("--size", required=True, type=int)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--channels", type=int, default=1, choices=(1, 3))

    return parser


def _cmd_train(args) -> int:
    config = runtime.load_config(args.config)
    print(f"training -> {config.output_dir}")
    print("\t".join(runtime.LOG_COLUMNS))
    result = runtime.train(config, on_log=lambda row: print(row.line()))
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"best checkpoint: {result.best_checkpoint_path}")
    if result.log_path:
        print(f"log: {result.log_path}")
    if result.figure_path:
        print(f"figure: {result.figure_path}")
    return 0


def _cmd_denoise(args) -> int:
    model, _ = runtime.load_checkpoint(args.model)
    image = D.read_pnm(Path(args.input).read_bytes())
    out = runtime.denoise_image(model, image)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    Path(args.output).write_bytes(D.write_pnm(out))
    print(f"wrote {args.output}")
    if args.dump_psnr:
        clean = D.to_float(D.read_pnm(Path(args.dump_psnr).read_bytes()))
        noisy_db = M.psnr(clean, D.to_float(image))
        denoised_db = M.psnr(clean, D.to_float(out))
        print(f"psnr noisy    {noisy_db:.2f} dB")
        print(f"psnr denoised {denoised_db:.2f} dB")
    return 0


def _cmd_eval(args) -> int:
    model, _ = runtime.load_checkpoint(args.model)
    folder = Path(args.data)
    paths = sorted(p for p in folder.iterdir() if p.suffix.lower() in (".pgm", ".ppm"))
    if not paths:
        raise D.DataError(f"no .pgm/.ppm images in {folder}")
    images = [D.read_pnm(p.read_bytes()) for p in paths]
    names = [p.stem for p in paths]
    rep, noisy_rep = runtime.evaluate(model, images, args.sigma, seed=args.seed, names=names)
    out_dir = Path(args.out)
    rows = [
        (names[i], f"{noisy_rep.psnr_db[i]:.4f}", f"{rep.psnr_db[i]:.4f}", f"{rep.ssim[i]:.4f}")
        for i in range(len(names))
    ]
    rows.append(("mean", f"{noisy_rep.mean_psnr:.4f}", f"{rep.mean_psnr:.4f}", f"{rep.mean_ssim:.4f}"))
    tsv = report.write_tsv(
        out_dir / "eval_report.tsv",
        ("image", "noisy_psnr_db", "psnr_db", "ssim"),
        rows,
        comments=(
            f"sigma={args.sigma} seed={args.seed}",
            "metrics measured on clamped float outputs before 8-bit quantization",
        ),
    )
    fig = report.save_eval_bars(names, noisy_rep.psnr_db, rep.psnr_db, out_dir / "eval_psnr.png")
    print("image\tnoisy_psnr_db\tpsnr_db\tssim")
    for row in rows:
        print("\t".join(row))
    print(f"report: {tsv}")
    print(f"figure: {fig}")
    return 0


def _cmd_ablate(args) -> int:
    config = runtime.load_config(args.config)
    print("variant\tmean_psnr_db\tmean_ssim\tparams\tseconds")

    def show(row):
        print(f"{row['label']}\t{row['psnr']:.4f}\t{row['ssim']:.4f}\t{row['params']}\t{row['seconds']:.1f}")

    rows = runtime.run_ablation(config, on_progress=show)
    tsv, fig = runtime.write_ablation_report(rows, config.output_dir)
    print(f"report: {tsv}")
    print(f"figure: {fig}")
    return 0


def _cmd_gradcheck(args) -> int:
    worst = 0.0

    def show(name, err):
        status = "PASS" if err <= runtime.GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name:12s} max_rel_err={err:.3e} {status}")

    for _, err in runtime.gradcheck_suite(on_result=show):
        worst = max(worst, err)
    print(f"worst {worst:.3e} (tolerance {runtime.GRADCHECK_TOLERANCE:.0e})")
    return 0 if worst <= runtime.GRADCHECK_TOLERANCE else 2


def _cmd_dump_features(args) -> int:
    model, _ = runtime.load_checkpoint(args.model)
    image = D.read_pnm(Path(args.input).read_bytes())
    paths = runtime.dump_features(model, image, args.stage, args.out)
    for p in paths:
        print(p)
    return 0


def _cmd_gen_data(args) -> int:
    images = D.gen_synthetic(args.count, args.size, args.seed, args.channels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = "pgm" if args.channels == 1 else "ppm"
    for i, img in enumerate(images):
        (out / f"synthetic{i:03d}.{ext}").write_bytes(D.write_pnm(img))
    print(f"wrote {len(images)} images to {out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "denoise": _cmd_denoise,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
    "dump-features": _cmd_dump_features,
    "gen-data": _cmd_gen_data,
}


def main_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        exc.parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help paths
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (
        runtime.ConfigError,
        runtime.CheckpointError,
        runtime.TrainingDivergedError,
        D.DataError,
        M.MetricError,
        TensorError,
        ValueError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(main_cli())


if __name__ == "__main__":
    main()
