"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Every kernel is run on the same inputs under both backends; the script checks
that the outputs agree before it reports timings. A full training step is
timed too, so the kernels' share of the end-to-end cost is visible.
"""
from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from anatomy_ssl.kernels import available_backends


def _cases(rng):
    image = rng.random((64, 64))
    hist = np.bincount(np.minimum((image * 256).astype(np.int64), 255).ravel(), minlength=256)
    q = np.exp(rng.standard_normal((32, 64, 64)) / 0.07 * 0.1)
    field = rng.random((64, 64))
    lesion = rng.random((18, 18))
    scores = rng.random(400)
    positive = rng.random(400) < 0.5
    return {
        "histogram256 (64x64)": (lambda m: m.histogram256(image)),
        "otsu_scan (256 bins)": (lambda m: m.otsu_scan(hist)),
        "sinkhorn_balance (32x64x64, 3 it)": (lambda m: m.sinkhorn_balance(q.copy(), 3)),
        "sinkhorn_balance joint (2048x64, 3 it)": (lambda m: m.sinkhorn_balance(q.reshape(-1, 1, 64).copy(), 3)),
        "patch_means (64x64 / 8)": (lambda m: m.patch_means(field, 8)),
        "paste_add (18x18 into 64x64)": (lambda m: m.paste_add(np.zeros((64, 64)), lesion, 10, 20)),
        "auc_rank (n=400)": (lambda m: m.auc_rank(scores, positive)),
    }


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return bool(np.allclose(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64), rtol=1e-12, atol=0))


def _time(fn, repeat: int) -> float:
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def train_step_seconds(repeat: int = 3) -> float:
    from anatomy_ssl.phantom import generate_phantom
    from anatomy_ssl.trainer import PairSampler, TrainConfig, init_state, train_step

    cfg = TrainConfig(epochs=1)
    images = np.stack([generate_phantom(i) for i in range(cfg.batch_size)])
    batch = PairSampler(images, cfg).batch(0, 0)
    state = init_state(cfg, 1)
    train_step(state, batch)
    return min(timeit.repeat(lambda: train_step(state, batch), number=1, repeat=repeat))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write results to this file")
    ap.add_argument("--skip-step", action="store_true", help="do not time a full training step")
    args = ap.parse_args(argv)

    backends = available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the numpy fallback is available", file=sys.stderr)
    rng = np.random.default_rng(0)
    results = {}
    print(f"{'kernel':40s}" + "".join(f"{name:>14s}" for name in backends) + "   speed-up")
    for label, fn in _cases(rng).items():
        outs = {name: fn(mod) for name, mod in backends.items()}
        ref = outs["python"]
        if not all(_same(ref, out) for out in outs.values()):
            print(f"{label}: backends disagree", file=sys.stderr)
            return 1
        times = {name: _time(lambda m=mod: fn(m), args.repeat) for name, mod in backends.items()}
        results[label] = times
        speed = times["python"] / times["compiled"] if "compiled" in times else float("nan")
        print(f"{label:40s}" + "".join(f"{t * 1e6:12.1f}us" for t in times.values()) + f"   {speed:7.1f}x")
    if not args.skip_step:
        step = train_step_seconds()
        results["train_step (desk config, B=32)"] = {"active": step}
        print(f"{'train_step (desk config, B=32)':40s}{step * 1e3:12.1f}ms")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
