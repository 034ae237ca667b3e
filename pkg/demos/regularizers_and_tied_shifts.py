"""
Kernel regularizers and the tied BN shifts
==========================================

Compares the three loss modes on one block, then trains an S2 network
(no identity BN) and watches the 3x3 and 1x1 BN shifts stay equal.
"""

import numpy as np

from repquant.blocks import BlockConfig, LossMode, NetworkSpec, RepBlock, build_network
from repquant.data import synth_dataset
from repquant.training import OptimConfig, custom_l2, eq5_l2, plain_l2, train

block = RepBlock(BlockConfig.for_variant("S0", 4, 4), np.random.default_rng(1))
print("custom L2 :", float(custom_l2(block).data))
print("eq5 L2    :", float(eq5_l2(block).data))
print("plain L2  :", float(plain_l2([block.w3.weight, block.w1.weight]).data))

# the BN coefficients enter the regularizer but receive no gradient from it
custom_l2(block).backward()
print("gamma grad from custom L2:", block.bn3.gamma.grad)

# %%
# Training S2 for 200 steps
# -------------------------
data = synth_dataset(0, 1600, 10)
net = build_network(NetworkSpec.a0_mini(variant="S2"), 0)
hist = train(net, data, OptimConfig(epochs=4, batch_size=32), LossMode.PLAIN_L2, max_steps=200)
print("max |beta3 - beta1| over 200 steps:", max(hist.step_lemma1_gap))

# decaying only beta3 breaks the symmetry
ctrl = build_network(NetworkSpec.a0_mini(variant="S2"), 0)
mask = {f"{b.name}.bn3.beta": True for b in ctrl.blocks}
hist = train(ctrl, data, OptimConfig(epochs=4, batch_size=32, decay_mask=mask), LossMode.PLAIN_L2, max_steps=200)
print("same, with weight decay on beta3 only:", max(hist.step_lemma1_gap))
