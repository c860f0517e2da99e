"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel runs on shapes typical of the desk profile (d=32, 4 heads, a few
dozen rows) and of the paper profile (d=768, 12 heads). The last section
times a full training step (forward, backward, Adam) of the desk model.
"""

import argparse
import json
import os
import statistics
import tempfile
import timeit

import numpy as np

from dualstream import kernels
from dualstream.data import SynthConfig, load_dataset, synth_lines
from dualstream.model import ModelConfig, ModelParams
from dualstream.tensor import Graph, gradients_for
from dualstream.training import AdamState, TrainConfig, adam_step, example_loss, make_examples


def kernel_cases(rng, n, m, d, heads):
    q, k, v = rng.normal(size=(n, d)), rng.normal(size=(m, d)), rng.normal(size=(m, d))
    mask = np.tril(np.ones((n, m), dtype=bool), k=m - n)
    scale = 1.0 / np.sqrt(d // heads)
    x, gy = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    gain, bias = np.ones(d), np.zeros(d)
    words = [int(t) for t in rng.integers(0, 12, size=24)]
    other = [int(t) for t in rng.integers(0, 12, size=24)]

    def prepared(mod):
        out, w = mod.attention_forward(q, k, v, mask, heads, scale)
        y = mod.softmax_rows(x)
        _, xhat, inv = mod.layer_norm_forward(x, gain, bias, 1e-5)
        return {
            "softmax_rows": lambda: mod.softmax_rows(x),
            "softmax_rows_backward": lambda: mod.softmax_rows_backward(y, gy),
            "attention_forward": lambda: mod.attention_forward(q, k, v, mask, heads, scale),
            "attention_backward": lambda: mod.attention_backward(q, k, v, w, gy, heads, scale),
            "layer_norm_forward": lambda: mod.layer_norm_forward(x, gain, bias, 1e-5),
            "layer_norm_backward": lambda: mod.layer_norm_backward(gy, xhat, inv, gain),
            "gelu_forward": lambda: mod.gelu_forward(x),
            "gelu_backward": lambda: mod.gelu_backward(x, gy),
            "lcs_length": lambda: mod.lcs_length(words, other),
        }

    return prepared


def best_time(fn, repeat):
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


def train_step(backend, repeat):
    kernels.use_backend(backend)
    lines = synth_lines(7, 8, SynthConfig())
    with tempfile.NamedTemporaryFile("w", suffix=".jsonl", delete=False) as fh:
        fh.write("\n".join(lines) + "\n")
    ds = load_dataset(fh.name)
    os.unlink(fh.name)
    cfg = ModelConfig(vocab_size=len(ds.vocab), n_types=4, layers=2, d=32, heads=4, d_emb=32,
                      d_app=16, d_mot=16, d_reg=16, d_typ=8, max_caption_len=16, max_frames=16)
    params = ModelParams.initialize(cfg, 0)
    plist, names = list(params), params.names()
    batch = make_examples(ds.samples)[:8]
    state = AdamState.zeros_like(params)
    tc = TrainConfig(learning_rate=1e-3)

    def step():
        total = [np.zeros_like(p.data) for p in plist]
        for ex in batch:
            with Graph() as g:
                loss = example_loss(ex, params, cfg, 0.5, 0.5)
            for acc, gr in zip(total, gradients_for(loss, g, plist)):
                acc += gr
        adam_step(params, {k: t / len(batch) for k, t in zip(names, total)}, state, tc)

    return statistics.median(timeit.repeat(step, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args()

    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled kernels not built; only the numpy fallback will be timed")
    previous = kernels.BACKEND
    results = {}
    rng = np.random.default_rng(0)
    for label, shape in (("desk", (24, 24, 32, 4)), ("paper", (40, 40, 768, 12))):
        prepared = kernel_cases(rng, *shape)
        print(f"\n{label} shapes (n, m, d, heads) = {shape}")
        print(f"{'kernel':<24}" + "".join(f"{b:>14}" for b in backends) + "   speedup")
        for name in kernels.KERNEL_NAMES:
            row = {b: best_time(prepared(kernels.backend_module(b))[name], args.repeat) for b in backends}
            results[f"{label}/{name}"] = row
            speed = f"{row['python'] / row['compiled']:8.2f}x" if "compiled" in row else ""
            print(f"{name:<24}" + "".join(f"{row[b] * 1e6:12.1f}us" for b in backends) + f"  {speed}")

    print("\ndesk training step (8 examples, forward + backward + Adam)")
    row = {b: train_step(b, args.repeat) for b in backends}
    results["desk/train_step"] = row
    for b in backends:
        print(f"  {b:<10} {row[b] * 1e3:9.1f} ms")
    if "compiled" in row:
        print(f"  speedup    {row['python'] / row['compiled']:9.2f}x")
    kernels.use_backend(previous)

    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
