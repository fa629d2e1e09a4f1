"""``udae`` command line: gen-data, train, restore, evaluate, bench, gradcheck."""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, degrade, engine, evaluate, image_io, metrics, model, train

log = logging.getLogger("udae")

THREADS_ENV = "UDAE_NUM_THREADS"


class CliError(Exception):
    pass


def _version_text() -> str:
    return (
        f"udae {__version__} (checkpoint format v{model.FORMAT_VERSION}, "
        f"manifest v{degrade.MANIFEST_VERSION}, numpy {np.__version__}, python {platform.python_version()})"
    )


def _add_common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON file of flag defaults (keys use underscores)")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")


def _add_arch(p: argparse.ArgumentParser, depth: int = 3, base: int = 16) -> None:
    p.add_argument("--depth", type=int, default=depth, help=f"downsampling stages (default {depth})")
    p.add_argument("--base", type=int, default=base, help=f"stage-1 feature maps (default {base})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="udae", description="Train and run an encoder-decoder that corrects colour casts in underwater images")
    parser.add_argument("--version", action="version", version=_version_text())
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    parser.add_argument("--threads", type=int, default=None, help=f"BLAS thread cap (env {THREADS_ENV})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize clean/distorted training pairs")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--clean-dir", type=Path, default=None, help="source photographs (default: procedural scenes)")
    p.add_argument("--count", type=int, default=200, help="number of pairs (default 200)")
    p.add_argument("--size", type=int, default=64, help="square output size in pixels (default 64)")
    p.add_argument("--preset", choices=degrade.PRESET_NAMES, default="mixed", help="degradation preset (default mixed)")

    p = sub.add_parser("train", help="train on a gen-data directory")
    _add_common(p)
    _add_arch(p)
    p.add_argument("--data", type=Path, required=True, help="gen-data output directory")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path to write")
    p.add_argument("--init", type=Path, default=None, help="start from this checkpoint instead of a fresh model")
    p.add_argument("--resume", type=Path, default=None, help="resume from a checkpoint written with --checkpoint-every")
    p.add_argument("--epochs", type=int, default=10, help="total epochs (default 10)")
    p.add_argument("--batch-size", type=int, default=4, help="default 4")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default 1e-3)")
    p.add_argument("--alpha", type=float, default=0.80, help="MS-SSIM weight in the loss (default 0.80)")
    p.add_argument("--checkpoint-every", type=int, default=0, help="epochs between checkpoints, 0 disables (default 0)")
    p.add_argument("--checkpoint-dir", type=Path, default=None, help="default: <out>.ckpt/")
    p.add_argument("--history", type=Path, default=None, help="loss CSV path (default: <out>.history.csv)")

    p = sub.add_parser("restore", help="restore every image in a directory")
    _add_common(p, seed=False)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--in", dest="input", type=Path, required=True, help="input image directory")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("evaluate", help="MSE / SSIM / MS-SSIM-L1 over a paired split")
    _add_common(p)
    p.add_argument("--model", type=Path, default=None, help="checkpoint; omit with --identity")
    p.add_argument("--identity", action="store_true", help="score the distorted inputs themselves (baseline)")
    p.add_argument("--data", type=Path, required=True, help="gen-data output directory")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test", help="default test")
    p.add_argument("--alpha", type=float, default=0.80, help="alpha for the MS-SSIM-L1 column (default 0.80)")
    p.add_argument("--out", type=Path, required=True, help="report prefix; writes <out>.json and <out>.csv")

    p = sub.add_parser("bench", help="forward-pass throughput")
    _add_common(p)
    _add_arch(p)
    p.add_argument("--model", type=Path, default=None, help="checkpoint (default: fresh seeded model)")
    p.add_argument("--size", type=int, default=256, help="square image size (default 256)")
    p.add_argument("--count", type=int, default=8, help="images per sweep (default 8)")
    p.add_argument("--warmup", type=int, default=2, help="untimed forwards (default 2)")
    p.add_argument("--repeat", type=int, default=5, help="timed sweeps, >= 3 (default 5)")
    p.add_argument("--hardware", default=platform.processor() or platform.machine(), help="hardware description")
    p.add_argument("--out", type=Path, default=None, help="optional JSON output path")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model and loss")
    _add_common(p)
    _add_arch(p, depth=1, base=2)
    p.add_argument("--size", type=int, default=16, help="square input size (default 16)")
    p.add_argument("--alpha", type=float, default=0.80)
    p.add_argument("--step", type=float, default=1e-5, help="central-difference step (default 1e-5)")
    p.add_argument("--max-entries", type=int, default=None, help="probe at most this many entries per parameter")
    p.add_argument("--tolerance", type=float, default=1e-3, help="exit nonzero above this (default 1e-3)")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is not None:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read --config {args.config}: {exc}")
        if not isinstance(overrides, dict):
            parser.error("--config must contain a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(overrides) - known)
        if unknown:
            parser.error(f"unknown keys in --config: {', '.join(unknown)}")
        # config replaces defaults; flags given explicitly on the command line still win
        for action in sub._actions:
            if action.dest in overrides and action.type is not None and overrides[action.dest] is not None:
                overrides[action.dest] = action.type(overrides[action.dest])
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


# -- subcommands ------------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    manifest = degrade.build_dataset(args.clean_dir, args.out, args.count, args.size, args.preset, args.seed)
    splits = {s: len(manifest.ids(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.entries)} pairs to {args.out} ({splits})")
    return 0


def _split_pairs(data: Path):
    return (degrade.load_pairs(data, "train"), degrade.load_pairs(data, "val"))


def cmd_train(args) -> int:
    cfg = train.TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        alpha=args.alpha,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
    )
    state, start = None, 0
    if args.resume is not None:
        weights, state, start = train.load_training_state(args.resume)
    elif args.init is not None:
        weights = model.load_weights(args.init)
    else:
        weights = model.build_model(model.UNetConfig(args.depth, args.base), seed=args.seed)

    history_path = args.history or args.out.with_suffix(".history.csv")
    if cfg.epochs <= start:
        model.save_weights(weights, args.out)
        train.LossHistory().write_csv(history_path)
        print(f"0 epochs to run; wrote unchanged checkpoint {args.out}")
        return 0

    train_pairs, val_pairs = _split_pairs(args.data)
    if not train_pairs:
        raise CliError(f"no training pairs in {args.data}")
    ckpt_dir = args.checkpoint_dir or args.out.with_suffix(".ckpt")
    weights, history = train.train(weights, train_pairs, cfg, val_pairs, ckpt_dir, state, start)
    model.save_weights(weights, args.out)
    history.write_csv(history_path)
    last = history.epoch_summary()[-1]
    print(f"trained to epoch {last['epoch']}: train loss {last['train_loss']:.5f}, val loss {last['val_loss']}; wrote {args.out}")
    return 0


def cmd_restore(args) -> int:
    weights = model.load_weights(args.model)
    n = evaluate.restore_batch(weights, args.input, args.out)
    print(f"{n} images processed")
    return 0


def cmd_evaluate(args) -> int:
    if args.identity == (args.model is not None):
        raise CliError("pass exactly one of --model or --identity")
    pairs = degrade.load_pairs(args.data, None if args.split == "all" else args.split)
    if not pairs:
        raise CliError(f"split {args.split!r} of {args.data} is empty")
    if args.identity:
        restorer, ckpt_id = evaluate.identity_restorer, "identity"
    else:
        restorer, ckpt_id = model.load_weights(args.model), args.model.name
    report = evaluate.evaluate(restorer, pairs, ckpt_id, args.alpha)
    jp, cp = report.write(args.out)
    agg = report.aggregate
    log.info("forward time %.5f s/image (%.1f fps)", report.seconds_per_image or 0, report.fps or 0)
    print(f"{report.count} images: MSE {agg['mse']:.5f}  SSIM {agg['ssim']:.5f}  MS-SSIM-L1 {agg['ms_ssim_l1']:.5f} -> {jp}, {cp}")
    return 0


def cmd_bench(args) -> int:
    if args.model is not None:
        weights = model.load_weights(args.model)
    else:
        weights = model.build_model(model.UNetConfig(args.depth, args.base), seed=args.seed)
    rng = np.random.default_rng(args.seed)
    images = [rng.random((1, 3, args.size, args.size), dtype=np.float32) for _ in range(args.count)]
    stats = evaluate.bench_throughput(weights, images, args.warmup, args.repeat, args.hardware)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(stats.to_dict(), indent=2) + "\n")
    print(
        f"{args.size}x{args.size}: mean {stats.mean_seconds:.5f} s/image, median {stats.median_seconds:.5f} s, "
        f"{stats.fps:.2f} fps, CV {stats.coefficient_of_variation:.3%} over {args.repeat} sweeps "
        f"({stats.timed_forwards} timed forwards) on {args.hardware}"
    )
    return 0


def gradcheck_model(depth: int, base: int, size: int, seed: int = 0, alpha: float = 0.80, h: float = 1e-5, max_entries=None):
    """Finite-difference check of every parameter of a small model under the composite loss."""
    weights = model.build_model(model.UNetConfig(depth, base), seed=seed).astype(np.float64)
    rng = np.random.default_rng(seed + 1)
    x = rng.random((1, 3, size, size))
    target = rng.random((1, 3, size, size))
    loss_cfg = metrics.LossConfig(alpha)

    def fn():
        out, tape = model.forward(weights, x, record_tape=True)
        loss, grad = metrics.composite_loss(out, target, loss_cfg)
        sig = model.kink_signature(tape) + np.packbits(out > target).tobytes()
        return loss, model.backward(weights, tape, grad), sig

    return engine.check_gradients(fn, weights.parameters(), h=h, max_entries=max_entries, rng=rng)


def cmd_gradcheck(args) -> int:
    res = gradcheck_model(args.depth, args.base, args.size, args.seed, args.alpha, args.step, args.max_entries)
    ok = res.max_relative_error < args.tolerance
    print(
        f"max relative error {res.max_relative_error:.3e} over {res.checked} entries "
        f"({res.skipped} tie-point probes skipped): {'PASS' if ok else 'FAIL'} (tolerance {args.tolerance:g})"
    )
    return 0 if ok else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "restore": cmd_restore,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    threads = args.threads or (int(os.environ[THREADS_ENV]) if os.environ.get(THREADS_ENV) else None)
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=threads):
                return COMMANDS[args.command](args)
        return COMMANDS[args.command](args)
    except (CliError, FileNotFoundError, ValueError, image_io.ImageFormatError) as exc:
        print(f"udae {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
