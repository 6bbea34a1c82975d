"""Train MLAE adapters on a synthetic task, save, merge and compare.

Run: python3 demos/04_train_eval_merge.py  (about half a minute)
"""
import tempfile
from pathlib import Path

import numpy as np

from mlae import checkpoint
from mlae import numerics as nx
from mlae.backbone import BackboneConfig, build_backbone, forward_logits, merge_model
from mlae.trainer import TrainConfig, build_model, evaluate, make_synthetic_task, train

backbone = BackboneConfig(L=2, d=32, heads=4)
task = make_synthetic_task(n_train=128, n_val=64, n_test=128, seed=0)
config = TrainConfig(epochs=20, lr=3e-3, p=0.5)

model, schedule = build_model(backbone, config)
print("trainable parameters:", model.trainable_parameter_count(schedule))
result = train(model, task, config, schedule)
for row in result.history[::5]:
    print(f"  epoch {row['epoch']:3d} loss {row['train_loss']:.3f} val {row['val_acc']:.3f}")

x, y = task.split("test")
acc = evaluate(model, x, y, schedule)
merged = merge_model(model, schedule)
print(f"test accuracy: adapters {100 * acc:.1f}%  merged {100 * evaluate(merged, x, y):.1f}%")

with nx.count_ops() as base_ops:
    forward_logits(build_backbone(backbone), x[:4])
with nx.count_ops() as merged_ops:
    forward_logits(merged, x[:4])
with nx.count_ops() as adapter_ops:
    forward_logits(model, x[:4])
print("matmuls: base", base_ops["matmul"], " merged", merged_ops["matmul"], " adapters", adapter_ops["matmul"])

with tempfile.TemporaryDirectory() as d:
    a = checkpoint.save(Path(d) / "adapter", model.state(), {"kind": "adapter"})
    m = checkpoint.save(Path(d) / "merged", merged.state(), {"kind": "merged"})
    print("blob bytes: adapter", a["blob_bytes"], " merged", m["blob_bytes"])
    tensors, _ = checkpoint.load(Path(d) / "merged")
    print("adapter tensors in merged checkpoint:", sum(".adapter." in k for k in tensors))
    print("frozen QKV equal after reload at 32-bit:",
          np.array_equal(tensors["blocks.0.w_qkv"], merged.blocks[0].w_qkv.data.astype(np.float32)))
