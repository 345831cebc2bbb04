"""Diff-loss / parameter-sharing ablation on the 32x32 synthetic set.

Trains every requested variant for each seed replicate and prints the mean
final validation PSNR/SSIM per variant plus the per-replicate PSNRs.

    python3 scripts/ablation.py --replicates 5
    python3 scripts/ablation.py --variants parallel parallel_shared ssdu supervised
"""

import argparse

import numpy as np

from ssmri.experiments import run_toy, toy_data

VARIANTS = {
    "parallel": dict(mode="parallel"),
    "parallel_no_diff": dict(mode="parallel_no_diff"),
    "parallel_shared": dict(mode="parallel", share_params=True),
    "parallel_no_diff_shared": dict(mode="parallel_no_diff", share_params=True),
    "ssdu": dict(mode="ssdu"),
    "supervised": dict(mode="supervised"),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--replicates", type=int, default=5)
    ap.add_argument("--variants", nargs="+", default=["parallel", "parallel_no_diff"], choices=sorted(VARIANTS))
    ap.add_argument("--epochs", type=int, default=None)
    args = ap.parse_args()

    data = toy_data()
    extra = {} if args.epochs is None else {"max_epochs": args.epochs}
    psnrs = {v: [] for v in args.variants}
    ssims = {v: [] for v in args.variants}
    zf = None
    for rep in range(args.replicates):
        for v in args.variants:
            kw = dict(VARIANTS[v])
            run = run_toy(kw.pop("mode"), rep, data=data, **kw, **extra)
            psnrs[v].append(run.final_psnr)
            ssims[v].append(run.log[-1]["val_ssim"])
            zf = run.zero_filled_psnr
            print(f"replicate {rep} {v:<24} PSNR {run.final_psnr:.3f} dB ({run.seconds:.0f}s)", flush=True)

    print(f"\nzero-filled PSNR {zf:.3f} dB")
    print(f"{'variant':<24} {'PSNR':>8} {'SSIM':>8}  per-replicate PSNR")
    for v in args.variants:
        reps = " ".join(f"{p:.2f}" for p in psnrs[v])
        print(f"{v:<24} {np.mean(psnrs[v]):>8.3f} {np.mean(ssims[v]):>8.4f}  {reps}")


if __name__ == "__main__":
    main()
