"""
Collapsing a three-branch block into one convolution
====================================================

A training-time block sums a 3x3 conv+BN, a 1x1 conv+BN and an identity BN.
At inference the three are folded into a single 3x3 kernel and bias.
"""

import numpy as np

from repquant.blocks import BlockConfig, RepBlock
from repquant.fusion import block_forward_deploy, fold_coefficients, fuse_block

rng = np.random.default_rng(0)
block = RepBlock(BlockConfig.for_variant("S0", 8, 8), rng)

# give the BN layers non-trivial running statistics, as after training
for bn in block.bn_layers().values():
    bn.gamma.data = rng.uniform(0.5, 1.5, 8).astype(np.float32)
    bn.running_mean = rng.normal(0, 0.5, 8).astype(np.float32)
    bn.running_var = rng.uniform(0.2, 2.0, 8).astype(np.float32)

x = rng.uniform(-1, 1, (4, 8, 16, 16)).astype(np.float32)
branches = block.branch_outputs(x)
print("branches:", {k: v.shape for k, v in branches.items()})

fused = fuse_block(block)
print("fused kernel", fused.weight.shape, "bias", fused.bias.shape)
gap = np.abs(block.forward(x).data - block_forward_deploy(fused, x).data).max()
print(f"max |train - deploy| = {gap:.2e}")

# each branch enters the fused kernel scaled by gamma / sqrt(var + eps)
for name, t in fold_coefficients(block).items():
    print(f"{name}: coefficients in [{t.min():.3f}, {t.max():.3f}]")

# %%
# A dead input channel
# --------------------
# If a channel feeding the identity branch is always zero, its BN running
# variance decays toward 0 and the fold coefficient approaches gamma/sqrt(eps).

block.bn0.running_var[0] = 0.0
t0 = fold_coefficients(block)["bn0"][0]
g0 = block.bn0.gamma.data[0]
print(f"identity coefficient for a dead channel: {t0:.2f} (gamma/sqrt(1e-5) = {g0 / np.sqrt(1e-5):.2f})")
w = fuse_block(block).weight.data
print(f"fused |w| max: channel 0 {np.abs(w[0]).max():.1f}, others {np.abs(w[1:]).max():.2f}")
