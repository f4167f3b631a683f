"""Prefill FLOPs of the analytic LLaVA-style cost model at several visual token budgets."""

import argparse

from flowcut.efficiency import flops_prefill, preset, uniform_schedule


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model-preset", default="llava15-7b")
    ap.add_argument("--text-tokens", type=int, default=40)
    ap.add_argument("--budgets", type=int, nargs="+", default=None)
    args = ap.parse_args()
    dims = preset(args.model_preset)
    full_n = dims.max_visual_tokens
    budgets = args.budgets or [full_n, 192, 128, 64]
    full = flops_prefill(dims, uniform_schedule(dims, full_n, args.text_tokens))

    print("visual_tokens,tflops,ratio")
    for n in budgets:
        f = flops_prefill(dims, uniform_schedule(dims, n, args.text_tokens))
        print(f"{n},{f / 1e12:.3f},{f / full:.4f}")


if __name__ == "__main__":
    main()
