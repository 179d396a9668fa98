"""Drive one LIF and one AiLIF neuron with the same noisy current and print their traces."""
import numpy as np

from spikingedn.autograd import Tensor
from spikingedn.neuron import NeuronConfig, adaptation_bound, lif_step


def trace(cfg, drive):
    state, rows = None, []
    for current in drive:
        y, state = lif_step(state, Tensor(np.array([current])), cfg)
        rows.append((float(state.u.data[0]), float(state.threshold(cfg)[0]), int(y.data[0])))
    return rows


def main():
    rng = np.random.default_rng(0)
    drive = rng.uniform(0.2, 0.9, 30)
    lif, ailif = NeuronConfig.lif(0.5), NeuronConfig.ailif(0.5, 0.07, 0.3)
    print("threshold range of the adaptive neuron:", adaptation_bound(ailif))
    print(f"{'t':>3} {'I':>6} | {'u':>6} {'y':>2} | {'u':>6} {'A':>6} {'y':>2}")
    for t, (I, a, b) in enumerate(zip(drive, trace(lif, drive), trace(ailif, drive))):
        print(f"{t:3d} {I:6.3f} | {a[0]:6.3f} {a[2]:2d} | {b[0]:6.3f} {b[1]:6.3f} {b[2]:2d}")
    print("spikes: LIF", sum(r[2] for r in trace(lif, drive)), "AiLIF", sum(r[2] for r in trace(ailif, drive)))


if __name__ == "__main__":
    main()
