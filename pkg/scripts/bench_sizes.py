"""Forward-pass throughput at several input sizes, printed next to the GPU reference figures.

    python scripts/bench_sizes.py --sizes 128 256 512
"""
import argparse
import json
import platform

import numpy as np

from udae import evaluate, model


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--sizes", type=int, nargs="+", default=[128, 256, 512])
    ap.add_argument("--depth", type=int, default=3)
    ap.add_argument("--base", type=int, default=16)
    ap.add_argument("--count", type=int, default=4)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    weights = model.build_model(model.UNetConfig(args.depth, args.base), seed=0)
    rng = np.random.default_rng(0)
    hw = platform.processor() or platform.machine()
    rows = []
    for s in args.sizes:
        imgs = [rng.random((1, 3, s, s), dtype=np.float32) for _ in range(args.count)]
        st = evaluate.bench_throughput(weights, imgs, warmup_count=2, repeat=args.repeat, hardware=hw)
        rows.append({"size": s, "s_per_image": st.mean_seconds, "fps": st.fps, "cv": st.coefficient_of_variation})
        print(f"{s}x{s}: {st.mean_seconds:.4f} s/image, {st.fps:.2f} fps, CV {st.coefficient_of_variation:.1%}")
    print("GPU reference (not comparable):", json.dumps(evaluate.REFERENCE))


if __name__ == "__main__":
    main()
