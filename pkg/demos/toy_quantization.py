"""
Post-training INT8 on a toy network
===================================

Trains A0-mini under S0 (custom L2) and S4 (plain L2, post-BN), fuses,
calibrates and compares FP32 with simulated INT8.  Small sizes keep this to
a few minutes; ``toy_study()`` with its defaults is the full protocol.
"""

import numpy as np

from repquant.blocks import NetworkSpec, build_network, default_loss_mode
from repquant.diagnostics import activation_report, cumulative_mse, weight_report
from repquant.fusion import to_deploy
from repquant.quant import calibrate
from repquant.study import TOY_OPTIM, cifar_format_split, run_setting
from repquant.training import OptimConfig, train

# easier images and a larger lr than the full protocol so a short run learns something
train_set, test_set = cifar_format_split(0, 1500, 500, noise=3.0)
optim = OptimConfig(**{**TOY_OPTIM, "epochs": 8, "lr0": 0.1})

for variant in ("S0", "S4"):
    r = run_setting(variant, 0, train_set, test_set, optim)
    print(f"{variant} ({r.loss_mode}): FP32 {r.fp32:.3f}  INT8 {r.ptq:.3f}  drop {r.ptq_drop:+.3f}")

# %%
# Where the error comes from
# --------------------------
net = build_network(NetworkSpec.a0_mini(variant="S0"), 0)
train(net, train_set, optim, default_loss_mode("S0"))
deploy = to_deploy(net)
batches = [train_set.images[i:i + 64] for i in range(0, 256, 64)]
plan = calibrate(deploy, batches)

for rep in weight_report(deploy):
    print(f"{rep.name:9s} weight std {rep.weight_std:.3f}  absmax {rep.weight_absmax:.3f}")
for i, rep in enumerate(activation_report(net, batches[0])):
    print(f"blocks.{i} pre-activation range [{rep.pre_min:.2f}, {rep.pre_max:.2f}]"
          f"  branch std 3x3 {rep.std_3x3:.2f} 1x1 {rep.std_1x1:.2f}")

curve = cumulative_mse(deploy, plan, batches)
print("cumulative MSE as layers switch to INT8:", np.round([c.mse for c in curve], 5).tolist())
