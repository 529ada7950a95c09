"""p-sweep of the 2D preset: spatial vanish fraction against p (a few minutes).

    python3 demos/demo_2d_sweep.py
"""

from sparsefrac.analysis import ExperimentSpec, run_support_sweep

exp = ExperimentSpec("example_2d")
print(" p      vanish(Omega)  Phi0      steps")
for row in run_support_sweep(exp, which="p"):
    print(f"{row.value:5.2f}  {100 * row.vanish_spatial:6.1f}%       {row.phi0:8.4f}  {row.iterations}")
