"""Compare the numba kernels in ``sfdaca._accel`` against their numpy fallbacks.

Each kernel is fed inputs shaped like the ones the toy detector and the
augmentation pipeline actually produce. Outputs of both paths are checked for
agreement before timing. With ``--end-to-end`` the script also times one
training step and one batched inference in two subprocesses, one of them with
``SFDACA_NO_NUMBA=1``.

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --repeat 20 --end-to-end
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from sfdaca import _accel


def _boxes(rng, n, size=128.0):
    xy = rng.uniform(0, size - 24, (n, 2))
    wh = rng.uniform(6, 24, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def cases(rng):
    # first conv layer backward of a batch of 16 128x128 RGB images, stride 2
    cols = rng.standard_normal((16, 64, 64, 3, 3, 3)).astype(np.float32)
    # raw decoded candidates before NMS: one per cell of a 16x16 grid
    nms_boxes = _boxes(rng, 256)
    nms_scores = rng.uniform(0, 1, 256)
    a, b = _boxes(rng, 40), _boxes(rng, 6)
    img = rng.uniform(0, 1, (128, 128, 3))
    kernel = np.exp(-0.5 * (np.arange(-6, 7) / 2.0) ** 2)
    kernel /= kernel.sum()
    return {
        "col2im": ((cols, 16, 128, 128, 3, 3, 2, 1), _accel.col2im_numpy, getattr(_accel, "_col2im_nb", None)),
        "nms": ((nms_boxes, nms_scores, 0.5), _accel.nms_numpy, getattr(_accel, "_nms_nb", None)),
        "iou_matrix": ((a, b), _accel.iou_matrix_numpy, getattr(_accel, "_iou_matrix_nb", None)),
        "blur_rows": ((img, kernel), _accel.blur_rows_numpy, getattr(_accel, "_blur_rows_nb", None)),
    }


def best_of(fn, args, repeat):
    fn(*args)  # warm-up, includes jit compilation or cache load
    timer = timeit.Timer(lambda: fn(*args))
    number, _ = timer.autorange()
    return min(timer.repeat(repeat=repeat, number=number)) / number


_STEP_SNIPPET = """
import json, time
import numpy as np
from sfdaca import _accel
from sfdaca.toy.detector import ToyDetector
from sfdaca.toy.world import DomainShift, SceneSpec, generate_dataset
data = generate_dataset(SceneSpec(), DomainShift(), 16, seed=0)
images = np.stack([d.image for d in data]).astype(np.float32)
targets = [d.labels for d in data]
model = ToyDetector(seed=0)
model.loss_and_grad_batch(images, targets)
model.infer_batch(images)
t = time.perf_counter()
for _ in range(5):
    model.loss_and_grad_batch(images, targets)
step = (time.perf_counter() - t) / 5
t = time.perf_counter()
for _ in range(5):
    model.infer_batch(images)
infer = (time.perf_counter() - t) / 5
print(json.dumps({"backend": _accel.BACKEND, "train_step": step, "infer_batch": infer}))
"""


def end_to_end():
    rows = []
    for disable in ("0", "1"):
        env = dict(os.environ, SFDACA_NO_NUMBA=disable)
        out = subprocess.run([sys.executable, "-c", _STEP_SNIPPET], env=env, capture_output=True, text=True,
                             check=True)
        rows.append(json.loads(out.stdout.strip().splitlines()[-1]))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--end-to-end", action="store_true", help="also time a batch-16 train step and inference")
    args = ap.parse_args(argv)

    if not _accel.HAS_NUMBA:
        print("numba unavailable (or SFDACA_NO_NUMBA set); only the numpy path can be timed")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<12}{'numpy':>12}{'numba':>12}{'speedup':>10}")
    for name, (inputs, ref, fast) in cases(rng).items():
        t_np = best_of(ref, inputs, args.repeat)
        if fast is None:
            print(f"{name:<12}{t_np * 1e3:>10.3f}ms{'-':>12}{'-':>10}")
            continue
        np.testing.assert_allclose(np.asarray(fast(*inputs)), np.asarray(ref(*inputs)), rtol=1e-5, atol=1e-6)
        t_nb = best_of(fast, inputs, args.repeat)
        print(f"{name:<12}{t_np * 1e3:>10.3f}ms{t_nb * 1e3:>10.3f}ms{t_np / t_nb:>9.1f}x")

    if args.end_to_end:
        print()
        print(f"{'backend':<12}{'train step':>14}{'inference':>14}   (batch of 16, default detector)")
        for row in end_to_end():
            print(f"{row['backend']:<12}{row['train_step'] * 1e3:>12.1f}ms{row['infer_batch'] * 1e3:>12.1f}ms")


if __name__ == "__main__":
    main()
