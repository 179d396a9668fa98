"""Bi-level search on a task where a 3x3 conv is exact and a skip edge is at chance."""
from spikingedn.search import EdgeProbe, SearchConfig, SearchSpace, probe_batches, run_search, shift_task, split_half


def main(seed=0):
    space = SearchSpace(ops=("skip", "conv3x3"), nodes=1, layers=1, plan=(1,))
    train_set, val_set = split_half(shift_task(32, seed=seed))
    res = run_search(EdgeProbe(space, seed=seed), train_set, val_set,
                     SearchConfig(epochs=20, warmup_epochs=5, batch_size=4, w_lr=3e-3, a_lr=0.3, seed=seed),
                     batch_fn=probe_batches)
    for h in res.history:
        skip, conv = h["edge_weights"][0][0]
        print(f"epoch {h['epoch']:2d}  loss {h['train_loss']:.4f}  skip {skip:.3f}  conv3x3 {conv:.3f}")
    print(res.genotype.to_text())


if __name__ == "__main__":
    main()
