"""End-to-end check of the Python bindings on a small graph.

Run after `maturin develop` (or installing the wheel):

    python crates/python/python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import graphprompter as gp


def main():
    g = gp.generate_sbm(blocks=6, nodes_per_block=60, p_in=0.15, p_out=0.01, seed=1)
    assert g.num_nodes == 360 and g.feature_dim == 16
    assert g.node_label(0) == 0 and len(g.features(0)) == 16

    model, metrics = gp.pretrain(
        g, steps=30, pretrain_classes=[0, 1, 2], spec={"ways": 3}, checkpoint_interval=0
    )
    assert model.step == 30 and len(metrics) == 30
    assert all(math.isfinite(m["loss_total"]) for m in metrics)

    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "model.gpck"
        model.save(str(path))
        again = gp.Model.load(str(path))
        assert again.fingerprint() == model.fingerprint()

    before = model.fingerprint()
    records = gp.infer(model, g, classes=[3, 4, 5], spec={"ways": 3}, episodes=5, seed=7)
    assert model.fingerprint() == before
    assert len(records) == 5 * 4
    report = gp.evaluate(records)
    assert 0.0 <= report["accuracy"] <= 1.0
    again = gp.infer(model, g, classes=[3, 4, 5], spec={"ways": 3}, episodes=5, seed=7)
    assert again == records

    chosen, votes = gp.vote_select([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]], [[0, 1, 2]], 1)
    assert chosen == [[0]] and votes == [1.0, 1.0, 0.0]
    assert gp.score(0.5, 0.5, 0.5) == 0.75
    sims = gp.knn_similarity([[1.0, 0.0]], [[2.0, 0.0], [0.0, 3.0]])
    assert abs(sims[0][0] - 1.0) < 1e-12 and abs(sims[0][1]) < 1e-12

    cache = gp.PromptCache(capacity=1)
    assert cache.admit([1.0, 0.0], 3, 0.9) is None
    evicted = cache.admit([0.0, 1.0], 4, 0.8)
    assert evicted["label"] == 3 and len(cache) == 1

    try:
        gp.pretrain(g, stepz=1)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown option accepted")

    print(f"ok: accuracy {report['accuracy']:.3f} over {report['n']} queries")


if __name__ == "__main__":
    main()
