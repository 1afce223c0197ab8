"""Compiled vs pure-numpy kernel timings.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json]

Each kernel is timed on both backends with identical inputs; outputs are
compared so a speedup never hides a wrong answer.  Ends with one training
step of a small model under each backend.
"""
import argparse
import json
import time

import numpy as np

from stairnet.tensor import backend


def cases(rng):
    n, c, h, w, k, dil = 4, 32, 48, 36, 3, 2
    hp, wp = h + 2 * dil, w + 2 * dil
    xp = rng.standard_normal((n, c, hp, wp)).astype(np.float32)
    wt = rng.standard_normal((c, c, k, k)).astype(np.float32)
    wd = rng.standard_normal((c, k, k)).astype(np.float32)
    cols = rng.standard_normal((n, c * k * k, h * w)).astype(np.float32)
    g = rng.standard_normal((n, c, h, w)).astype(np.float32)
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    return [
        ("im2col", lambda K: K.im2col(xp, k, 1, dil, h, w)),
        ("col2im", lambda K: K.col2im(cols, c, hp, wp, k, 1, dil, h, w)),
        ("conv2d_direct", lambda K: K.conv2d_direct(xp, wt, 1, dil, 1, h, w)),
        ("depthwise_forward", lambda K: K.depthwise_forward(xp, wd, 1, dil, h, w)),
        ("depthwise_backward", lambda K: K.depthwise_backward(g, xp, wd, 1, dil)),
        ("maxpool_forward", lambda K: K.maxpool_forward(x, 2, 2)),
        ("avgpool_forward", lambda K: K.avgpool_forward(x, 2, 2)),
    ]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def flat(out):
    return np.concatenate([np.ravel(o) for o in out]) if isinstance(out, tuple) else np.ravel(out)


def train_step_time(name, repeat):
    from stairnet import train
    from stairnet.config import RunConfig, TrainConfig
    from stairnet.net import ModelConfig

    backend.use(name)
    run = RunConfig(ModelConfig(stages=1, trunk_width=16, input_size=(96, 96)),
                    TrainConfig(batch_size=8, num_samples=8), "f32")
    tr = train.new_trainer(run)
    tr.train_step()  # warm-up
    t, _ = best_of(tr.train_step, repeat)
    return t


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)

    impls = backend.available()
    previous = backend.active()
    rows = []
    for name, fn in cases(np.random.default_rng(0)):
        row = {"kernel": name}
        outs = {}
        for b, K in sorted(impls.items()):
            row[b], outs[b] = best_of(lambda: fn(K), args.repeat)
        if len(outs) == 2:
            row["max_abs_diff"] = float(np.max(np.abs(flat(outs["compiled"]) - flat(outs["python"]))))
            row["speedup"] = row["python"] / row["compiled"]
        rows.append(row)
    step = {b: train_step_time(b, max(1, args.repeat // 2)) for b in sorted(impls)}
    backend.use(previous)

    if args.json:
        print(json.dumps({"kernels": rows, "train_step": step}, indent=2))
        return
    if "compiled" not in impls:
        print("compiled extension not importable; timing the python backend only")
    print(f"{'kernel':<20}" + "".join(f"{b:>12}" for b in sorted(impls)) + f"{'speedup':>10}")
    for r in rows:
        sp = f"{r['speedup']:>9.2f}x" if "speedup" in r else ""
        print(f"{r['kernel']:<20}" + "".join(f"{r[b] * 1e3:>10.2f}ms" for b in sorted(impls)) + sp)
    print(f"{'train step (96x96)':<20}" + "".join(f"{step[b] * 1e3:>10.1f}ms" for b in sorted(impls)))


if __name__ == "__main__":
    main()
