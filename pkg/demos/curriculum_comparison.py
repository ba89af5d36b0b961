"""Compare curriculum orders on the toy digits at epsilon = 1 (under a minute on a laptop)."""
import sys

from feta.data_eval import load_toy_digits
from feta.pipeline import CurriculumConfig, run_curriculum

orders = sys.argv[1:] or ["none", "spatial_only", "spatial_then_frequency"]
train, test = load_toy_digits()
for order in orders:
    _, rep = run_curriculum(CurriculumConfig(order=order, seed=0), train, test)
    ev = rep.evaluation
    print(f"{order:24s} eps={rep.epsilon:.4f} sigma_d={rep.sigma_d:.3f} "
          f"accuracy={ev['accuracy']:.3f} rff_mmd={ev['rff_mmd']['pooled']:.4f}", flush=True)
