"""How similar do experts become? MLAE vs p=0 experts vs vanilla LoRA.

Short runs (30 epochs, d=32) to stay quick; the acceptance test repeats this
at d=64 for 100 epochs over three seeds.

Run: python3 demos/05_expert_similarity.py [out_dir]
"""
import dataclasses
import sys
from pathlib import Path

from mlae.analysis import model_similarity, write_report
from mlae.backbone import BackboneConfig
from mlae.experts import TrainFlags
from mlae.trainer import TrainConfig, run_experiment, make_synthetic_task

out = Path(sys.argv[1] if len(sys.argv) > 1 else "similarity_demo")
backbone = BackboneConfig(L=2, d=32)
task = make_synthetic_task(n_train=128, n_val=32, n_test=128)
base = TrainConfig(epochs=30)
arms = {
    "mlae p=0.5": base,
    "experts p=0": dataclasses.replace(base, p=0.0),
    "lora": dataclasses.replace(base, flags=TrainFlags(False, False, False)),
}
for name, cfg in arms.items():
    result, acc = run_experiment(backbone, task, cfg)
    report = model_similarity(result.model)
    write_report(report, out / name.replace(" ", "_").replace("=", ""))
    print(f"{name:12s} mean|cos| {report.model_abs_mean:.4f}  signed {report.model_mean:+.4f}  test acc {acc:.3f}")
print("per-block CSVs and SVG heatmaps under", out)
