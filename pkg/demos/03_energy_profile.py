"""Where does the energy go?  Count spikes layer by layer and cost them.

An untrained default-size network is enough to see the accounting: the input
layer reads real-valued CVGR-I and pays full multiply-accumulates, every
hidden layer pays one accumulate per synapse per spike, and the
potential-assisted output layer is dense again.  The comparison point is the
same architecture run as a conventional network, all MACs.

    python demos/03_energy_profile.py
"""
import numpy as np

from spikesfp.data import synthetic_dataset
from spikesfp.energy import AC_ENERGY, MAC_ENERGY, energy_report, profile_inference, rate_table
from spikesfp.unet import NetworkConfig, SpikingUNet

sample = synthetic_dataset(1, seed=0, height=64, width=64)[0]
x = sample.cvgri[None]

for mode in ("single", "multi"):
    net = SpikingUNet(NetworkConfig(mode=mode), seed=0)
    ann_traces, ann = profile_inference(net, x, ann_mode=True)
    traces, snn = profile_inference(net, x, reference=ann)
    print(f"== {mode}-timestep, {len(net.layers)} weighted layers ==")
    print(rate_table(traces))
    print(f"ANN reference: {ann.op_mac:.3e} MAC -> {ann.energy_joules * 1e3:.4f} mJ")
    print(f"spiking:       {snn.op_mac:.3e} MAC + {snn.op_ac:.3e} AC -> "
          f"{snn.energy_joules * 1e3:.4f} mJ, benefit {snn.benefit:.2f}x\n")

# published op counts plug into the same arithmetic
print(f"one MAC costs {MAC_ENERGY / AC_ENERGY:.2f} ACs")
ann = energy_report(161.11e9, 0)
for ac in (22.36e9, 255.35e9):
    r = energy_report(1.21e9, ac, ann)
    print(f"1.21e9 MAC + {ac:.4g} AC = {r.energy_joules * 1e3:.2f} mJ, {r.benefit:.2f}x below "
          f"{ann.energy_joules * 1e3:.2f} mJ")
