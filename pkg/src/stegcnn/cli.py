"""Command-line entry point: ``stegcnn {train,embed,extract,eval,lsb-embed,lsb-extract}``.

Exit codes: 0 success, 1 usage/config, 2 data, 3 numeric failure, 4 checkpoint integrity.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .checkpoint import IntegrityError, load_checkpoint, save_checkpoint
from .data_pipeline import (
    DataError,
    ImageSample,
    StegDataset,
    denormalize,
    load_idx,
    load_image,
    load_image_dir,
    normalize,
    prepare_payload,
    resize_bilinear,
    sample_pairs,
    save_image,
    to_grayscale,
)
from .lsb_baseline import AllocationError, BitAllocation, lsb_embed, lsb_extract
from .steg_model import ConfigError, NetworkConfig, decoder_forward, encoder_forward
from .training import LossWeights, NonFiniteError, TrainingDiverged, train, write_log_csv

log = logging.getLogger("stegcnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_INTEGRITY = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _payload_mode(text: str):
    if text == "luma":
        return text
    if text in ("0", "1", "2"):
        return int(text)
    raise argparse.ArgumentTypeError("payload mode must be 'luma' or a channel index 0-2")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stegcnn", description="Hide a grayscale image inside an RGB image with a CNN.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", type=Path, help="key = value file; flags override its values")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train encoder and decoder jointly")
    common(p)
    p.add_argument("--data", type=Path, required=False, help="image directory or IDX image file")
    p.add_argument("--out", type=Path, default=Path("checkpoint.sgn"))
    p.add_argument("--log", type=Path, default=None, help="CSV log path (default: <out>.csv)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lam", type=float, default=1e-4)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--arch", choices=("paper", "desk"), default="paper")
    p.add_argument("--k", type=int, default=7, help="merge depth (odd)")
    p.add_argument("--filters", type=int, default=16, help="filters per branch layer")
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), help="resize images to H x W")
    p.add_argument("--payload-mode", type=_payload_mode, default="luma")

    p = sub.add_parser("embed", help="hide a payload image in a cover image")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=False)
    p.add_argument("--cover", type=Path, required=False)
    p.add_argument("--payload", type=Path, required=False)
    p.add_argument("--out", type=Path, required=False)
    p.add_argument("--strict", action="store_true", help="fail instead of resizing mismatched inputs")
    p.add_argument("--payload-mode", type=_payload_mode, default="luma")

    p = sub.add_parser("extract", help="recover the payload from a hybrid image")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=False)
    p.add_argument("--hybrid", type=Path, required=False)
    p.add_argument("--out", type=Path, required=False)
    p.add_argument("--truth", type=Path, help="ground-truth payload to score against")
    p.add_argument("--strict", action="store_true")
    p.add_argument("--payload-mode", type=_payload_mode, default="luma")

    p = sub.add_parser("eval", help="score a checkpoint on random cover/payload pairs")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=False)
    p.add_argument("--data", type=Path, required=False)
    p.add_argument("--n-pairs", type=int, default=50)
    p.add_argument("--out", type=Path, help="CSV path (default: stdout)")
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--baseline", choices=("lsb",), help="also report the LSB baseline")
    p.add_argument("--alloc", default="3,3,2", help="LSB bits per R,G,B channel")
    p.add_argument("--save-dir", type=Path, help="write hybrids and recovered payloads here")
    p.add_argument("--payload-mode", type=_payload_mode, default="luma")

    p = sub.add_parser("lsb-embed", help="classical LSB substitution")
    common(p)
    p.add_argument("--cover", type=Path, required=False)
    p.add_argument("--payload", type=Path, required=False)
    p.add_argument("--out", type=Path, required=False)
    p.add_argument("--alloc", default="3,3,2")
    p.add_argument("--payload-mode", type=_payload_mode, default="luma")

    p = sub.add_parser("lsb-extract", help="recover an LSB-embedded payload")
    common(p)
    p.add_argument("--stego", type=Path, required=False)
    p.add_argument("--out", type=Path, required=False)
    p.add_argument("--alloc", default="3,3,2")
    return parser


REQUIRED = {
    "train": ("data",),
    "embed": ("checkpoint", "cover", "payload", "out"),
    "extract": ("checkpoint", "hybrid", "out"),
    "eval": ("checkpoint", "data"),
    "lsb-embed": ("cover", "payload", "out"),
    "lsb-extract": ("stego", "out"),
}


def read_config_file(path: Path) -> dict[str, str]:
    values = {}
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def resolve_args(argv=None) -> argparse.Namespace:
    """Parse flags, fold in an optional config file (flags win) and check required values."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        sp = _subparser(parser, args.command)
        actions = {a.dest: a for a in sp._actions if a.dest not in ("help", "config")}
        defaults = {}
        for key, raw in read_config_file(args.config).items():
            if key not in actions:
                raise UsageError(f"unknown config key '{key}' for command '{args.command}'")
            action = actions[key]
            try:
                if action.nargs == 2:
                    value = [action.type(v) for v in raw.replace(",", " ").split()]
                elif isinstance(action, argparse._StoreTrueAction):
                    value = raw.lower() in ("1", "true", "yes", "on")
                else:
                    value = action.type(raw) if action.type else raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"bad value for config key '{key}': {raw!r}") from exc
            defaults[key] = value
        sp.set_defaults(**defaults)
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k, None) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return args


def echo_config(args: argparse.Namespace) -> None:
    for key, value in sorted(vars(args).items()):
        print(f"# {key} = {value}", file=sys.stderr)


# ---------------------------------------------------------------- data helpers

def _load_dataset_samples(path: Path, size) -> list[ImageSample]:
    if not path.exists():
        raise DataError(f"data path does not exist: {path}")
    if path.is_file():
        samples = load_idx(path)
        samples = [ImageSample(np.repeat(s.pixels, 3, axis=2), s.id) for s in samples]
        if size:
            samples = [ImageSample(resize_bilinear(s.pixels, *size), s.id) for s in samples]
        return samples
    return load_image_dir(path, tuple(size) if size else None)


def _conform(sample: ImageSample, config: NetworkConfig, strict: bool, what: str) -> ImageSample:
    dims = (config.height, config.width)
    if (sample.height, sample.width) == dims:
        return sample
    if strict:
        raise DataError(f"{what} is {sample.height}x{sample.width}, model expects {dims[0]}x{dims[1]}")
    log.warning("%s is %dx%d, resizing to model size %dx%d", what, sample.height, sample.width, *dims)
    return ImageSample(resize_bilinear(sample.pixels, *dims), sample.id)


def _fmt_quality(ref: ImageSample, out: ImageSample) -> str:
    p = metrics.psnr(ref, out)
    try:
        s = metrics.format_value(metrics.ssim(ref, out))
    except ValueError:
        s = "n/a"
    return f"psnr={metrics.format_value(p)} ssim={s}"


def _run_model(params, covers: np.ndarray, payloads: np.ndarray):
    """Encode, quantise the hybrid to 8 bits as if saved, then decode."""
    hybrid, _ = encoder_forward(params, covers, payloads)
    hybrid_u8 = np.stack([denormalize(h[None]).pixels for h in hybrid])
    quantised = np.concatenate([normalize(ImageSample(h, "")) for h in hybrid_u8])
    recovered, _ = decoder_forward(params, quantised)
    recovered_u8 = np.stack([denormalize(r[None]).pixels for r in recovered])
    return hybrid_u8, recovered_u8


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    if not args.data.exists():
        raise DataError(f"data path does not exist: {args.data}")
    samples = _load_dataset_samples(args.data, args.size)
    data = StegDataset.from_samples(samples, payload_mode=args.payload_mode)
    h, w = data.covers.shape[2:]
    if args.arch == "desk":
        config = NetworkConfig.desk(args.k, args.filters, h, w)
    else:
        config = NetworkConfig(merge_depth=args.k, branch_filters=args.filters, height=h, width=w)
    weights = LossWeights(args.alpha, args.beta, args.lam)
    log_path = args.log or args.out.with_suffix(args.out.suffix + ".csv")
    try:
        ckpt = train(config, data, weights, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                     lr=args.lr, progress=lambda r: print(
                         f"epoch {r.epoch}: loss={r.loss:.6f} enc_psnr={r.enc_psnr:.2f} dec_psnr={r.dec_psnr:.2f}"))
    except TrainingDiverged as exc:
        diag = args.out.with_suffix(args.out.suffix + ".diverged")
        save_checkpoint(exc.checkpoint, diag)
        write_log_csv(exc.checkpoint.log, log_path)
        print(f"error: {exc}; diagnostic checkpoint written to {diag}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(ckpt, args.out)
    write_log_csv(ckpt.log, log_path)
    print(f"wrote {args.out} and {log_path}")
    return EXIT_OK


def cmd_embed(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cover = _conform(load_image(args.cover, "RGB"), ckpt.config, args.strict, f"cover {args.cover}")
    raw = load_image(args.payload)
    if args.strict and raw.pixels.shape[:2] != cover.pixels.shape[:2]:
        raise DataError(f"payload {args.payload} is {raw.height}x{raw.width}, cover is {cover.height}x{cover.width}")
    payload = prepare_payload(raw, cover.height, cover.width, args.payload_mode)
    hybrid, _ = encoder_forward(ckpt.params, normalize(cover), normalize(payload))
    out = denormalize(hybrid, cover.id)
    save_image(out, args.out)
    bpp, pct = metrics.capacity(cover.pixels.shape, raw.pixels.shape)
    print(f"wrote {args.out}: {_fmt_quality(cover, out)} bpp={bpp:g} payload_pct={pct:.1f}")
    return EXIT_OK


def cmd_extract(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    hybrid = load_image(args.hybrid)
    if hybrid.channels != 3:
        raise DataError(f"hybrid {args.hybrid} has {hybrid.channels} channel(s), expected 3")
    hybrid = _conform(hybrid, ckpt.config, args.strict, f"hybrid {args.hybrid}")
    recovered, _ = decoder_forward(ckpt.params, normalize(hybrid))
    out = denormalize(recovered, hybrid.id)
    save_image(out, args.out)
    print(f"wrote {args.out}")
    if args.truth is not None:
        truth = prepare_payload(load_image(args.truth), out.height, out.width, args.payload_mode)
        print(",".join(["pair_id", "dec_psnr", "dec_ssim"]))
        p = metrics.psnr(truth, out)
        try:
            s = metrics.ssim(truth, out)
        except ValueError:
            s = float("nan")
        print(",".join([hybrid.id, metrics.format_value(p), metrics.format_value(s)]))
    return EXIT_OK


def _ssim_or_nan(a, b) -> float:
    try:
        return metrics.ssim(a, b)
    except ValueError:
        return float("nan")


def _mean_row(label: str, rows: list[list]) -> list:
    cols = list(zip(*rows))[1:]
    return [label] + [float(np.mean(c)) for c in cols]


def evaluate(ckpt, samples: list[ImageSample], n_pairs: int, seed: int, payload_mode="luma",
             baseline: BitAllocation | None = None, save_dir: Path | None = None) -> list[list]:
    """Per-pair metric rows, followed by mean rows, in the report column order."""
    if n_pairs <= 0:
        return []
    rng = np.random.default_rng(seed)
    pairs = sample_pairs(range(len(samples)), n_pairs, rng)
    covers = [samples[c] for c, _ in pairs]
    payloads = [to_grayscale(samples[p], payload_mode) for _, p in pairs]
    rows, lsb_rows = [], []
    chunk = 32
    for start in range(0, len(pairs), chunk):
        cs, ps = covers[start:start + chunk], payloads[start:start + chunk]
        c_t = np.concatenate([normalize(c) for c in cs])
        p_t = np.concatenate([normalize(p) for p in ps])
        hybrids, recovered = _run_model(ckpt.params, c_t, p_t)
        for c, p, hy, rec in zip(cs, ps, hybrids, recovered):
            pid = f"{c.id}+{p.id}"
            hy_s, rec_s = ImageSample(hy, pid), ImageSample(rec, pid)
            bpp, pct = metrics.capacity(c.pixels.shape, p.pixels.shape)
            rows.append([pid, metrics.psnr(c, hy_s), metrics.psnr(p, rec_s),
                         _ssim_or_nan(c, hy_s), _ssim_or_nan(p, rec_s), bpp, pct])
            if save_dir is not None:
                save_dir.mkdir(parents=True, exist_ok=True)
                save_image(hy_s, save_dir / f"hybrid_{len(rows):05d}.png")
                save_image(rec_s, save_dir / f"recovered_{len(rows):05d}.png")
            if baseline is not None:
                stego = lsb_embed(c, p, baseline)
                back = lsb_extract(stego, baseline)
                lsb_rows.append([f"lsb:{pid}", metrics.psnr(c, stego), metrics.psnr(p, back),
                                 _ssim_or_nan(c, stego), _ssim_or_nan(p, back), bpp, pct])
    out = rows + [_mean_row("mean", rows)]
    if lsb_rows:
        out += lsb_rows + [_mean_row("lsb:mean", lsb_rows)]
    return out


def write_report(rows: list[list], stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(metrics.REPORT_HEADER)
    for r in rows:
        writer.writerow([r[0]] + [metrics.format_value(v) for v in r[1:]])


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    size = args.size or (ckpt.config.height, ckpt.config.width)
    samples = _load_dataset_samples(args.data, size) if args.n_pairs > 0 else []
    alloc = BitAllocation.parse(args.alloc) if args.baseline == "lsb" else None
    rows = evaluate(ckpt, samples, args.n_pairs, args.seed, args.payload_mode, alloc, args.save_dir)
    if args.out is None:
        write_report(rows, sys.stdout)
    else:
        with open(args.out, "w", newline="") as f:
            write_report(rows, f)
        print(f"wrote {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_lsb_embed(args) -> int:
    alloc = BitAllocation.parse(args.alloc)
    cover = load_image(args.cover, "RGB")
    payload = prepare_payload(load_image(args.payload), cover.height, cover.width, args.payload_mode)
    stego = lsb_embed(cover, payload, alloc)
    save_image(stego, args.out)
    print(f"wrote {args.out}: {_fmt_quality(cover, stego)}")
    return EXIT_OK


def cmd_lsb_extract(args) -> int:
    alloc = BitAllocation.parse(args.alloc)
    stego = load_image(args.stego)
    if stego.channels != 3:
        raise DataError(f"stego image {args.stego} has {stego.channels} channel(s), expected 3")
    save_image(lsb_extract(stego, alloc), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "embed": cmd_embed,
    "extract": cmd_extract,
    "eval": cmd_eval,
    "lsb-embed": cmd_lsb_embed,
    "lsb-extract": cmd_lsb_extract,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args = resolve_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.INFO)
        echo_config(args)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, AllocationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
