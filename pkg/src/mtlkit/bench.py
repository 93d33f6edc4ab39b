"""Backend benchmark: NumPy fallback vs compiled kernels.

Times the convolution and pooling calls at the shapes the default network
actually runs, plus one full training step, and reports the largest
cross-backend output difference. Run as `python -m mtlkit.bench`.
"""

import argparse
import time

import numpy as np

from . import kernels
from .autodiff import Tape, Tensor, add, backward
from .data import Batch
from .net import NetConfig, build_net, forward_multi
from .training import AdamW, TrainConfig, task_losses


def _time(f, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        f()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3  # ms


def conv_shapes(batch=32, height=64, width=64):
    """(x shape, w shape) pairs for the default trunk at the given crop."""
    widths = (16, 32, 64, 64, 128)
    shapes = []
    c_in, h, w = 1, height, width
    for c_out in widths:
        shapes.append(((batch, c_in, h, w), (c_out, c_in, 3, 3)))
        shapes.append(((batch, c_out, h, w), (c_out, c_out, 3, 3)))
        c_in, h, w = c_out, h // 2, w // 2
    return shapes


def bench_kernels(backends, batch, repeats):
    rng = np.random.default_rng(0)
    head = f"{'shape':<26}{'op':<18}" + "".join(f"{b:>14}" for b in backends)
    print(head + f"{'max|diff|':>12}")
    for x_shape, w_shape in conv_shapes(batch=batch):
        x = rng.standard_normal(x_shape)
        w = rng.standard_normal(w_shape)
        y = kernels.backend_module(backends[0]).conv2d_forward(x, w, 1, 1)
        gy = rng.standard_normal(y.shape)
        ops = {
            "conv_forward": lambda m: m.conv2d_forward(x, w, 1, 1),
            "conv_bwd_input": lambda m: m.conv2d_backward_input(gy, w, 1, 1, x_shape[2:]),
            "conv_bwd_kernels": lambda m: m.conv2d_backward_kernels(gy, x, w_shape, 1, 1),
        }
        label = "x".join(map(str, x_shape))
        for op_name, op in ops.items():
            times = []
            outs = []
            for b in backends:
                mod = kernels.backend_module(b)
                times.append(_time(lambda: op(mod), repeats))
                outs.append(op(mod))
            diff = max(float(np.abs(o - outs[0]).max()) for o in outs)
            print(f"{label:<26}{op_name:<18}"
                  + "".join(f"{t:>12.2f}ms" for t in times) + f"{diff:>12.2e}")
    x = rng.standard_normal((batch, 16, 64, 64))
    times, outs = [], []
    for b in backends:
        mod = kernels.backend_module(b)
        times.append(_time(lambda: mod.maxpool2d_forward(x, 2, 2, 2, 2), repeats))
        outs.append(mod.maxpool2d_forward(x, 2, 2, 2, 2)[0])
    diff = max(float(np.abs(o - outs[0]).max()) for o in outs)
    print(f"{f'{batch}x16x64x64':<26}{'maxpool_forward':<18}"
          + "".join(f"{t:>12.2f}ms" for t in times) + f"{diff:>12.2e}")


def bench_train_step(backends, batch, repeats):
    cfg = NetConfig(input_width=64)
    tc = TrainConfig(crop_width=64)
    rng = np.random.default_rng(1)
    fake = Batch(
        x=rng.standard_normal((batch, 1, 64, 64)),
        emotions=rng.uniform(0, 1, (batch, 10)),
        country=rng.integers(0, 4, batch),
        age=rng.uniform(20, 39, batch),
    )

    print(f"\n{'full train step':<44}" + "".join(f"{b:>14}" for b in backends))
    times = []
    for b in backends:
        with kernels.use_backend(b):
            net = build_net(cfg, seed=0)
            opt = AdamW(net.parameters(), tc.learning_rate, tc.betas,
                        tc.adam_epsilon, tc.weight_decay)

            def step():
                opt.zero_grad()
                tape = Tape()
                with tape:
                    preds = forward_multi(net, Tensor(fake.x))
                    emo, cou, age = task_losses(preds, fake, (29.5, 5.0))
                    total = add(add(emo, cou), age)
                backward(total)
                opt.step()
                # drop the graph now; per-step conv workspaces are large
                tape.release()

            step()  # warm up
            times.append(_time(step, repeats))
    print(f"{f'batch {batch}, 64x64 input':<44}"
          + "".join(f"{t:>12.0f}ms" for t in times))


def main(argv=None):
    parser = argparse.ArgumentParser(description="compare kernel backends")
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args(argv)
    backends = kernels.available_backends()
    print(f"selected backend: {kernels.BACKEND}; available: {', '.join(backends)}")
    bench_kernels(backends, args.batch, args.repeats)
    bench_train_step(backends, args.batch, args.repeats)


if __name__ == "__main__":
    main()
