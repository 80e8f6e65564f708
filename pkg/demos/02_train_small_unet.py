"""Train a small multi-timestep spiking UNet on synthetic scenes.

Uses a reduced network (two encoder blocks, 8 base channels) on 32x32 scenes
(12 train, 4 test) so it finishes in under two minutes on one core.  Compare
the learned predictor with the best single constant normal, the natural floor
any useful model has to beat.

    python demos/02_train_small_unet.py [epochs]
"""
import sys
import time

import numpy as np

from spikesfp.data import synthetic_dataset
from spikesfp.neurons import NeuronConfig
from spikesfp.training import TrainConfig, best_constant_normal, evaluate, train
from spikesfp.unet import NetworkConfig

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 120

data = synthetic_dataset(16, seed=3, height=32, width=32)
train_set, test_set = data[:12], data[12:]
gt = np.stack([s.normals for s in test_set])
mask = np.stack([s.mask for s in test_set])
_, baseline = best_constant_normal(gt, mask)

cfg = NetworkConfig(mode="multi", depth=2, base_channels=8, neuron=NeuronConfig(kind="if"))
start = time.perf_counter()


def report(epoch, net, row):
    if epoch % 10 == 0:
        r = evaluate(net, test_set)
        net.train()
        print(f"epoch {epoch:4d}  loss {row['loss']:.4f}  train MAE {row['MAE']:6.2f}  "
              f"test MAE {r.mae:6.2f}  ({time.perf_counter() - start:.0f} s)")


result = train(train_set, cfg, TrainConfig(epochs=epochs, batch_size=2, lr=1e-3, seed=0),
               on_epoch_end=report)
final = evaluate(result.network, test_set)
print(f"\nbest constant normal: {baseline:.2f} deg")
print(f"spiking UNet:         {final.mae:.2f} deg  "
      f"(<11.25: {final.ae_11:.3f}, <22.5: {final.ae_22:.3f}, <30: {final.ae_30:.3f})")
