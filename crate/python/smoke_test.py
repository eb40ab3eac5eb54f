"""Smoke test for the seqmasks_py extension.

Build first:  maturin develop -m crates/python/Cargo.toml
Then:         python python/smoke_test.py
"""

import math
import random

import seqmasks_py as sm


def hard_oracle(x, labels, margin):
    def d(a, b):
        return math.dist(x[a], x[b])

    total, count = 0.0, 0
    for a in range(len(x)):
        pos = [d(a, p) for p in range(len(x)) if p != a and labels[p] == labels[a]]
        neg = [d(a, q) for q in range(len(x)) if labels[q] != labels[a]]
        if pos and neg:
            total += max(max(pos) - min(neg) + margin, 0.0)
            count += 1
    return total / count if count else 0.0


def main():
    rng = random.Random(0)
    x = [[rng.gauss(0, 1) for _ in range(4)] for _ in range(8)]
    labels = [0, 0, 1, 1, 2, 2, 3, 3]
    got = sm.batch_hard_triplet(x, labels, 0.3)
    assert abs(got - hard_oracle(x, labels, 0.3)) < 1e-9, got
    assert sm.batch_all_triplet(x, labels, 0.3) >= 0.0

    logits = [[0.0, 0.0], [0.0, 0.0]]
    assert abs(sm.lsr_softmax(logits, [0, 1], 0.1) - math.log(2)) < 1e-12

    emb = [[float(i), 0.0] for i in range(4)]
    m = sm.cmc_map(emb, [0, 1, 2, 3], [0] * 4, emb, [0, 1, 2, 3], [1] * 4)
    assert m["rank1"] == 1.0 and m["map"] == 1.0, m

    cfg = sm.TrainConfig()
    cfg.seed = 7
    again = sm.TrainConfig(cfg.to_toml())
    assert again.seed == 7
    try:
        sm.TrainConfig("no_such_key = 1")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")
    try:
        sm.Model.load("/nonexistent/model.safetensors")
    except (IOError, ValueError):
        pass
    else:
        raise AssertionError("missing checkpoint loaded")
    print("seqmasks_py smoke test OK")


if __name__ == "__main__":
    main()
