"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are echoed again in the pytest terminal summary (see conftest.py).
``python tests/test_acceptance.py`` runs the suite directly without pytest.
"""
from __future__ import annotations

import json
import time

import numpy as np
import pytest

from udae import cli, degrade, engine, evaluate, metrics, model, train
from udae.engine import ConvLayer
from udae.model import UNetConfig

from oracles import conv2d_loops, maxpool_loops, ssim_windows, upconv2x2_loops

RESULTS: list[str] = []

# desk-scale recipe (criterion 6); see scripts/desk_scale.py for the standalone run
DESK = dict(count=200, size=64, preset="mixed", seed=0, depth=3, base=16, epochs=60, batch_size=4, lr=1e-3)
DESK_CPU_BUDGET_S = 30 * 60


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS.append(line)
    print(line)


class Timer:
    def __enter__(self):
        self.wall, self.cpu = time.perf_counter(), time.process_time()
        return self

    def __exit__(self, *exc):
        self.wall = time.perf_counter() - self.wall
        self.cpu = time.process_time() - self.cpu


# -- 1 -------------------------------------------------------------------------------------


def test_criterion_1_metric_identities():
    rng = np.random.default_rng(1)
    worst_mse, worst_ssim, worst_loss = 0.0, 0.0, 0.0
    with Timer() as t:
        for _ in range(20):
            x = rng.random((1, 3, 64, 64))
            worst_mse = max(worst_mse, abs(metrics.mse(x, x)))
            worst_ssim = max(worst_ssim, abs(metrics.ssim(x, x) - 1.0))
            worst_loss = max(worst_loss, abs(metrics.composite_loss(x, x)[0]))
    ok = worst_mse == 0.0 and worst_ssim <= 1e-6 and worst_loss <= 1e-6 and t.wall < 10
    report(1, ok, f"max |MSE| {worst_mse:g}, max |SSIM-1| {worst_ssim:.2e}, max |loss| {worst_loss:.2e}, {t.wall:.2f} s")
    assert ok


# -- 2 -------------------------------------------------------------------------------------


def test_criterion_2_oracles():
    rng = np.random.default_rng(2)
    with Timer() as t:
        ssim_err = 0.0
        for _ in range(50):
            a, b = rng.random((16, 16)), rng.random((16, 16))
            ssim_err = max(ssim_err, abs(metrics.ssim(a[None, None], b[None, None]) - ssim_windows(a, b)))

        prim_err = 0.0
        for stride, pad in [(1, 1), (1, 0), (2, 1)]:
            x = rng.standard_normal((2, 3, 9, 8))
            layer = ConvLayer(rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4), stride, pad)
            ref = conv2d_loops(x, layer.weights, layer.bias, stride, pad)
            prim_err = max(prim_err, np.max(np.abs(engine.conv2d_forward(x, layer) - ref)))
        x = rng.standard_normal((2, 3, 8, 6))
        pooled, _ = engine.maxpool2x2_forward(x)
        prim_err = max(prim_err, np.max(np.abs(pooled - maxpool_loops(x))))
        x = rng.standard_normal((2, 4, 5, 3))
        up = ConvLayer(rng.standard_normal((3, 4, 2, 2)), rng.standard_normal(3), 2, 0)
        ref = upconv2x2_loops(x, up.weights, up.bias)
        prim_err = max(prim_err, np.max(np.abs(engine.upconv2x2_forward(x, up) - ref)))
    ok = ssim_err <= 1e-8 and prim_err <= 1e-5 and t.wall < 30
    report(2, ok, f"SSIM vs window oracle {ssim_err:.1e}, conv/pool/upconv vs loops {prim_err:.1e}, {t.wall:.1f} s")
    assert ok


# -- 3 -------------------------------------------------------------------------------------


def _primitive_checks(rng):
    """Yield (name, forward_fn, params) for every differentiable building block."""

    def weighted(out, g):
        return float(np.sum(out * g))

    for stride, pad in [(1, 1), (2, 1)]:
        x = rng.standard_normal((2, 3, 6, 6))
        layer = ConvLayer(rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4), stride, pad)
        g = rng.standard_normal(engine.conv2d_forward(x, layer).shape)

        def fn(x=x, layer=layer, g=g):
            gx, gw, gb = engine.conv2d_backward(x, layer, g)
            return weighted(engine.conv2d_forward(x, layer), g), [gx, gw, gb]

        yield f"conv s{stride}", fn, [x, layer.weights, layer.bias]

    x = rng.standard_normal((2, 4, 3, 3))
    up = ConvLayer(rng.standard_normal((3, 4, 2, 2)), rng.standard_normal(3), 2, 0)
    g_up = rng.standard_normal((2, 3, 6, 6))

    def fn_up():
        return weighted(engine.upconv2x2_forward(x, up), g_up), list(engine.upconv2x2_backward(x, up, g_up))

    yield "upconv", fn_up, [x, up.weights, up.bias]

    xp = rng.standard_normal((2, 2, 6, 6))
    g_pool = rng.standard_normal((2, 2, 3, 3))

    def fn_pool():
        out, idx = engine.maxpool2x2_forward(xp)
        return weighted(out, g_pool), [engine.maxpool2x2_backward(idx, g_pool)], idx.tobytes()

    yield "maxpool", fn_pool, [xp]

    xr = rng.standard_normal((1, 3, 5, 5))
    g_r = rng.standard_normal(xr.shape)

    def fn_relu():
        return weighted(engine.relu(xr), g_r), [engine.relu_backward(xr, g_r)], np.packbits(xr > 0).tobytes()

    yield "relu", fn_relu, [xr]

    xs = rng.standard_normal((1, 3, 5, 5)) * 3

    def fn_sig():
        out = engine.sigmoid(xs)
        return weighted(out, g_r), [engine.sigmoid_backward(out, g_r)]

    yield "sigmoid", fn_sig, [xs]

    ca, cb = rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 3, 3, 3))
    g_c = rng.standard_normal((1, 5, 3, 3))

    def fn_cat():
        ga, gb = engine.concat_channels_backward(2, g_c)
        return weighted(engine.concat_channels(ca, cb), g_c), [ga, gb]

    yield "concat", fn_cat, [ca, cb]

    a, b = rng.random((1, 3, 16, 16)), rng.random((1, 3, 16, 16))

    def fn_ssim():
        v, g = metrics.ssim_with_grad(a, b)
        return v, [g]

    yield "ssim", fn_ssim, [a]

    ma, mb = rng.random((1, 3, 48, 48)), rng.random((1, 3, 48, 48))

    def fn_ms():
        r = metrics.ms_ssim_with_grad(ma, mb)
        return r.value, [r.grad]

    yield "ms-ssim", fn_ms, [ma]

    def fn_l1():
        v, g = metrics.l1_loss_with_grad(a, b)
        return v, [g], np.packbits(a > b).tobytes()

    yield "l1", fn_l1, [a]

    def fn_comp():
        v, g = metrics.composite_loss(ma, mb, metrics.LossConfig(0.8))
        return v, [g], np.packbits(ma > mb).tobytes()

    yield "composite", fn_comp, [ma]


def test_criterion_3_gradient_checks():
    rng = np.random.default_rng(3)
    errors = {}
    with Timer() as t:
        for name, fn, params in _primitive_checks(rng):
            errors[name] = engine.check_gradients(fn, params, h=1e-5, max_entries=150, rng=rng).max_relative_error
        full = cli.gradcheck_model(depth=1, base=2, size=16, seed=0, alpha=0.8)
        errors["udae d1/b2"] = full.max_relative_error
    worst = max(errors, key=errors.get)
    ok = all(e < 1e-3 for e in errors.values()) and full.checked > 0 and t.wall < 120
    report(
        3, ok,
        f"worst {worst} {errors[worst]:.1e}; full model {full.max_relative_error:.1e} over {full.checked} entries "
        f"({full.skipped} tie probes skipped), {t.wall:.0f} s",
    )
    assert ok, errors


# -- 4 -------------------------------------------------------------------------------------


def test_criterion_4_shapes_and_parameter_count():
    bad = []
    with Timer() as t:
        x_cache = {s: np.random.default_rng(s).random((1, 3, s, s), dtype=np.float32) for s in (32, 64, 128)}
        for depth in (1, 2, 3, 4):
            w = model.build_model(UNetConfig(depth, 4), seed=depth)
            for s, x in x_cache.items():
                if model.forward(w, x).shape != x.shape:
                    bad.append((depth, s))
    cfg = UNetConfig(1, 4)
    # 3x3 convs (cin*9*cout + cout) along 3->4->4 | 4->8->8 | up 8->4 (2x2) | 8->4->4->4 | 1x1 4->3
    closed = (3 * 9 * 4 + 4) + (4 * 9 * 4 + 4) + (4 * 9 * 8 + 8) + (8 * 9 * 8 + 8) + (8 * 4 * 4 + 4) \
        + (8 * 9 * 4 + 4) + 2 * (4 * 9 * 4 + 4) + (4 * 3 + 3)
    built = model.build_model(cfg).num_parameters()
    ok = not bad and built == closed == model.parameter_count(cfg) and t.wall < 60
    report(4, ok, f"shape mismatches {bad or 'none'}, depth-1/base-4 params {built} vs closed form {closed}, {t.wall:.1f} s")
    assert ok


# -- 5 -------------------------------------------------------------------------------------


def test_criterion_5_overfit_single_pair():
    clean = degrade.procedural_scene(5, 64)
    pair = degrade.make_pair(clean, degrade.sample_params(5, "greenish"), "overfit")
    cfg = train.TrainConfig(learning_rate=1e-3, batch_size=1, epochs=500, seed=0)
    with Timer() as t:
        _, hist = train.train(model.build_model(UNetConfig(2, 8), seed=0), [pair], cfg, steps=500)
    losses = hist.step_losses
    blocks = train.block_means(losses, 20)
    monotone = bool(np.all(np.diff(blocks) <= 0))
    final = losses[-1]
    ok = len(losses) <= 500 and final < 0.05 and monotone and t.wall < 300
    report(5, ok, f"loss {losses[0]:.4f} -> {final:.4f} in {len(losses)} steps, 20-step means non-increasing: {monotone}, {t.wall:.0f} s")
    assert ok


# -- 6 -------------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_desk_scale(tmp_path):
    d = DESK
    degrade.build_dataset(None, tmp_path, d["count"], d["size"], d["preset"], d["seed"])
    tr, va, te = (degrade.load_pairs(tmp_path, s) for s in ("train", "val", "test"))
    cfg = train.TrainConfig(learning_rate=d["lr"], batch_size=d["batch_size"], epochs=d["epochs"], seed=d["seed"])
    with Timer() as t:
        w, _ = train.train(model.build_model(UNetConfig(d["depth"], d["base"]), seed=d["seed"]), tr, cfg, va)
    base = evaluate.evaluate(evaluate.identity_restorer, te).aggregate
    rest = evaluate.evaluate(w, te).aggregate
    ssim_gain = rest["ssim"] - base["ssim"]
    mse_cut = 1.0 - rest["mse"] / base["mse"]
    ok = ssim_gain >= 0.05 and mse_cut >= 0.30 and t.cpu <= DESK_CPU_BUDGET_S
    report(
        6, ok,
        f"{len(te)} test pairs: SSIM {base['ssim']:.4f} -> {rest['ssim']:.4f} (+{ssim_gain:.4f}), "
        f"MSE {base['mse']:.5f} -> {rest['mse']:.5f} (-{mse_cut:.1%}), {t.cpu / 60:.1f} CPU-min",
    )
    assert ok


# -- 7 -------------------------------------------------------------------------------------


def test_criterion_7_bench_stability(tmp_path):
    out = tmp_path / "bench.json"
    # the bench command as shipped: fresh depth-3/base-16 model, 8 images, 2 warmups, 5 sweeps
    assert cli.main(["bench", "--size", "256", "--repeat", "5", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    cv = doc["coefficient_of_variation"]
    ok = cv < 0.15 and len(doc["run_mean_seconds"]) == 5
    ref = evaluate.REFERENCE
    report(
        7, ok,
        f"256x256 CPU {doc['mean_seconds_per_image']:.4f} s/image ({doc['fps']:.2f} fps), CV {cv:.1%} over 5 sweeps "
        f"of {doc['timed_forwards'] // 5} images; GPU reference {ref['seconds_per_image_256']} s "
        f"({ref['fps_256']} fps), not compared",
    )
    assert ok


# -- 8 -------------------------------------------------------------------------------------


def _cli_run(root):
    steps = [
        ["gen-data", "--out", root / "data", "--count", 40, "--size", 32, "--seed", 8],
        ["train", "--data", root / "data", "--out", root / "m.udae", "--depth", 2, "--base", 4,
         "--epochs", 2, "--seed", 8, "--history", root / "loss.csv"],
        ["evaluate", "--model", root / "m.udae", "--data", root / "data", "--out", root / "report"],
    ]
    for argv in steps:
        assert cli.main([str(a) for a in argv]) == 0


def test_criterion_8_reproducible_artifacts(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    _cli_run(a)
    _cli_run(b)
    files = ["data/manifest.json", "m.udae", "loss.csv", "report.json", "report.csv"]
    files += sorted(f"data/{p.name}" for p in (a / "data").glob("*.png"))
    differ = [f for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    ok = not differ and json.loads((a / "report.json").read_text())["count"] > 0
    report(8, ok, f"{len(files)} artifacts compared, differing: {differ or 'none'}")
    assert ok


if __name__ == "__main__":
    import sys
    import tempfile
    from pathlib import Path

    failures = 0
    for name, fn in sorted((k, v) for k, v in dict(globals()).items() if k.startswith("test_criterion_")):
        try:
            if "tmp_path" in fn.__code__.co_varnames[: fn.__code__.co_argcount]:
                with tempfile.TemporaryDirectory() as tmp:
                    fn(Path(tmp))
            else:
                fn()
        except AssertionError:
            failures += 1
    sys.exit(1 if failures else 0)
