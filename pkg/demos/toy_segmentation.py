"""Train the small events-only model on synthetic moving shapes, then report MIoU and energy.

Takes roughly 25 s per epoch on one core. Pass the number of epochs as the first argument.
"""
import sys

import numpy as np

from spikingedn.autograd import precision
from spikingedn.evaluation import EnergyModel, count_ops, evaluate, miou_table
from spikingedn.events import synthetic_dataset
from spikingedn.genotype import uniform_genotype
from spikingedn.network import ModelConfig, build_from_genotype
from spikingedn.training import TrainConfig, train


def main(epochs=20):
    ds = synthetic_dataset(60, seed=0)
    print(f"{len(ds.train)} training and {len(ds.test)} held-out sequences")
    cfg = ModelConfig(num_classes=3, stem_channels=16, node_width=8, aspp_channels=8, decoder_channels=16,
                      aspp_rates=(2, 4, 6))
    with precision(np.float32):
        model = build_from_genotype(uniform_genotype([0, 1, 1], plan=(2, 2, 2, 2)), cfg)
        train(model, ds.train, TrainConfig(epochs=epochs, batch_size=8, lr=1e-2, eval_every=5), ds.test,
              log=sys.stdout)
        print(miou_table(evaluate(model, ds.test), ["background", "disk", "triangle"]))
        ledger = count_ops(model.fold(), ds.test)
    print(ledger.to_text(EnergyModel()))


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 20)
