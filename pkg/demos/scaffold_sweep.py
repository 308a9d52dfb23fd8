"""How the number of outer scaffolds changes held-out error on the benchmark subject.

    python demos/scaffold_sweep.py --levels 0,2,4 --iterations 300
"""

import argparse

from uvsplat.fitting import FitConfig, evaluate, fit_maps, prepare_maps
from uvsplat.synthetic import benchmark_subject

ap = argparse.ArgumentParser()
ap.add_argument("--levels", default="0,1,2,3,4")
ap.add_argument("--iterations", type=int, default=300)
ap.add_argument("--lr", type=float, default=0.05)
args = ap.parse_args()

subject = benchmark_subject()
held = subject.heldout_views.views
print(" S   init l1   fit l1   fit psnr")
for S in (int(s) for s in args.levels.split(",")):
    maps, _, _ = prepare_maps(subject.input_views, subject.template, 64, 0.01, S)
    before = evaluate(maps, held)
    maps, _ = fit_maps(maps, subject.input_views, FitConfig(iterations=args.iterations, lr=args.lr))
    after = evaluate(maps, held)
    print(f"{S:2d}   {before['mean_l1']:.4f}    {after['mean_l1']:.4f}   "
          f"{after['mean_psnr_db']:.2f} dB")
