"""Overfit one pair and print 20-step block means of the loss.

    python scripts/overfit.py --steps 500 --lr 1e-3
"""
import argparse

from udae import degrade, model, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--depth", type=int, default=2)
    ap.add_argument("--base", type=int, default=8)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--preset", default="greenish", choices=degrade.PRESET_NAMES)
    ap.add_argument("--seed", type=int, default=5)
    args = ap.parse_args()

    pair = degrade.make_pair(
        degrade.procedural_scene(args.seed, args.size), degrade.sample_params(args.seed, args.preset), "overfit"
    )
    cfg = train.TrainConfig(learning_rate=args.lr, batch_size=1, epochs=args.steps)
    _, hist = train.train(model.build_model(model.UNetConfig(args.depth, args.base), seed=0), [pair], cfg, steps=args.steps)
    for i, m in enumerate(train.block_means(hist.step_losses, 20)):
        print(f"steps {20 * i + 1:4d}-{20 * (i + 1):4d}  mean loss {m:.5f}")
    print(f"final loss {hist.step_losses[-1]:.5f}")


if __name__ == "__main__":
    main()
