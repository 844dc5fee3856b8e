"""Time the compiled and pure-numpy convolution kernels side by side.

    python3 benchmarks/bench_kernels.py [--repeats 20]

Reports im2col, col2im and a full conv2d forward+backward at the shapes the
default network sees, plus one training step of the toy model per backend
(each backend runs in a subprocess so import-time selection is honoured).
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from deen.ndtensor import _im2col_py

try:
    from deen.ndtensor import _im2col_c
except ImportError:  # extension not built
    _im2col_c = None

# (N, C, H, W, k, stride, pad, dilation): stage shapes of the 64x32 toy model
SHAPES = [
    (48, 3, 64, 32, 3, 1, 1, 1),
    (48, 16, 32, 16, 3, 1, 1, 1),
    (48, 32, 16, 8, 3, 1, 1, 1),
    (48, 64, 8, 4, 3, 1, 3, 3),
]

STEP_SCRIPT = """
import time, numpy as np
from deen.backbone import DeenNet, ModelConfig
from deen.losses import LossWeights, total_loss
from deen.ndtensor import kernels
net = DeenNet(ModelConfig(), seed=0)
x = np.random.default_rng(0).standard_normal((24, 3, 64, 32)).astype(np.float32)
lab = np.repeat(np.arange(6), 4)
def step():
    b = net.forward(x, x, lab, lab)
    loss, _ = total_loss(b, LossWeights())
    net.zero_grad(); loss.backward()
step()
t = time.perf_counter(); [step() for _ in range({reps})]
print(kernels.BACKEND, (time.perf_counter() - t) / {reps})
"""


def out_size(n, k, s, p, d):
    return (n + 2 * p - d * (k - 1) - 1) // s + 1


def bench_kernels(mod, repeats):
    rows = []
    for n, c, h, w, k, s, p, d in SHAPES:
        oh, ow = out_size(h, k, s, p, d), out_size(w, k, s, p, d)
        x = np.random.default_rng(0).standard_normal((n, c, h, w)).astype(np.float32)
        cols = mod.im2col(x, k, k, s, p, d, oh, ow)
        t_i = min(timeit.repeat(lambda: mod.im2col(x, k, k, s, p, d, oh, ow), number=1, repeat=repeats))
        t_c = min(timeit.repeat(lambda: mod.col2im(cols, n, c, h, w, k, k, s, p, d, oh, ow), number=1, repeat=repeats))
        rows.append({"shape": f"{n}x{c}x{h}x{w} k{k} d{d}", "im2col_ms": t_i * 1e3, "col2im_ms": t_c * 1e3})
    return rows


def bench_step(backend, repeats):
    env = dict(os.environ)
    if backend == "python":
        env["DEEN_PURE_PYTHON"] = "1"
    else:
        env.pop("DEEN_PURE_PYTHON", None)
    out = subprocess.run([sys.executable, "-c", STEP_SCRIPT.format(reps=repeats)], env=env,
                         capture_output=True, text=True, check=True).stdout.split()
    return out[0], float(out[1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--step-repeats", type=int, default=3)
    ap.add_argument("--json", action="store_true", help="machine-readable output")
    args = ap.parse_args()

    backends = {"python": _im2col_py}
    if _im2col_c is not None:
        backends["cython"] = _im2col_c
    results = {name: bench_kernels(mod, args.repeats) for name, mod in backends.items()}
    steps = {}
    for name in backends:
        got, sec = bench_step(name, args.step_repeats)
        steps[name] = {"backend_loaded": got, "step_s": sec}

    if args.json:
        print(json.dumps({"kernels": results, "train_step": steps}, indent=2))
        return
    print(f"{'shape':<26}" + "".join(f"{b + ' im2col':>16}{b + ' col2im':>16}" for b in backends))
    for i, (n, c, h, w, k, s, p, d) in enumerate(SHAPES):
        line = f"{results['python'][i]['shape']:<26}"
        for b in backends:
            r = results[b][i]
            line += f"{r['im2col_ms']:>13.2f} ms{r['col2im_ms']:>13.2f} ms"
        print(line)
    for b, r in steps.items():
        print(f"toy training step ({r['backend_loaded']}): {r['step_s'] * 1e3:.0f} ms")
    if "cython" in backends:
        speed = [results["python"][i]["col2im_ms"] / results["cython"][i]["col2im_ms"] for i in range(len(SHAPES))]
        print("col2im speed-up (python / cython): " + ", ".join(f"{v:.1f}x" for v in speed))


if __name__ == "__main__":
    main()
