"""Desk-scale run: synthesize pairs, train, and compare against the distorted baseline.

    python scripts/desk_scale.py --out runs/desk --epochs 60
"""
import argparse
import json
import logging
import time
from pathlib import Path

from udae import degrade, evaluate, model, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--count", type=int, default=200)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--preset", default="mixed", choices=degrade.PRESET_NAMES)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--depth", type=int, default=3)
    ap.add_argument("--base", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--batch-size", type=int, default=4)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--eval-every", type=int, default=10, help="score the test split every N epochs")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    data = args.out / "data"
    degrade.build_dataset(None, data, args.count, args.size, args.preset, args.seed)
    tr, va, te = (degrade.load_pairs(data, s) for s in ("train", "val", "test"))
    base = evaluate.evaluate(evaluate.identity_restorer, te, "identity").aggregate
    print(f"split sizes {len(tr)}/{len(va)}/{len(te)}; distorted baseline {base}")

    weights = model.build_model(model.UNetConfig(args.depth, args.base), seed=args.seed)
    state = train.AdamState.zeros_like(weights.parameters())
    done, cpu0 = 0, time.process_time()
    history = train.LossHistory()
    curve = []
    while done < args.epochs:
        target = min(done + args.eval_every, args.epochs)
        cfg = train.TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=target, seed=args.seed)
        weights, h = train.train(weights, tr, cfg, va, optimizer_state=state, start_epoch=done)
        history.rows += h.rows
        done = target
        agg = evaluate.evaluate(weights, te).aggregate
        curve.append({"epoch": done, "cpu_min": (time.process_time() - cpu0) / 60, **agg})
        print(json.dumps(curve[-1]))

    final = curve[-1]
    summary = {
        "baseline": base,
        "restored": {k: final[k] for k in ("mse", "ssim", "ms_ssim_l1")},
        "ssim_gain": final["ssim"] - base["ssim"],
        "mse_reduction": 1 - final["mse"] / base["mse"],
        "cpu_minutes": final["cpu_min"],
        "curve": curve,
    }
    model.save_weights(weights, args.out / "model.udae")
    history.write_csv(args.out / "loss.csv")
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"SSIM +{summary['ssim_gain']:.4f}, MSE -{summary['mse_reduction']:.1%}, {final['cpu_min']:.1f} CPU-min")


if __name__ == "__main__":
    main()
