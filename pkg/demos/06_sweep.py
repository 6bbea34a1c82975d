"""A small dropout-probability sweep with a resumable runs file.

Run: python3 demos/06_sweep.py [out_dir]
"""
import sys
from pathlib import Path

from mlae.backbone import BackboneConfig
from mlae.trainer import TrainConfig, make_synthetic_task, sweep, write_sweep_csv

out = Path(sys.argv[1] if len(sys.argv) > 1 else "sweep_demo")
out.mkdir(parents=True, exist_ok=True)
backbone = BackboneConfig(L=2, d=16, heads=2, n_classes=4)
task = make_synthetic_task(n_classes=4, n_train=128, n_val=16, n_test=128, difficulty=0.5)
base = TrainConfig(epochs=20, batch_size=16, lr=1e-2)

# Interrupting and re-running picks up from sweep_p_runs.csv.
table = sweep(backbone, task, base, "p", [0.0, 0.3, 0.5, 0.9], seeds=(0, 1), runs_csv=out / "sweep_p_runs.csv")
write_sweep_csv(out / "sweep_p.csv", "p", table)
for row in table:
    print(f"p={row['p']:.1f}  mean test acc {row['mean_acc']:.3f} over {row['n_seeds']} seeds")
