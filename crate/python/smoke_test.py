"""Smoke test for the Python bindings: python python/smoke_test.py"""

import math
import tempfile
from pathlib import Path

import bisimlab_py as bl


def main():
    # Two absorbing states with rewards 0 and 1 sit 1/(1 - gamma) apart.
    mdp = bl.Mdp([[[1.0, 0.0]], [[0.0, 1.0]]], [[0.0], [1.0]], 0.5)
    report = mdp.solve()
    assert abs(report["diameter"] - 2.0) < 1e-9, report
    assert report["diameter"] <= report["diameter_bound"] + 1e-9

    grid = bl.Mdp.gridworld(3, 3, reward="sparse_goal", gamma=0.9)
    assert (grid.n_states, grid.n_actions) == (9, 4)
    assert bl.Mdp.from_json(grid.to_json()).n_states == 9

    ground = [[0.0, 1.0, 2.0], [1.0, 0.0, 1.0], [2.0, 1.0, 0.0]]
    assert abs(bl.wasserstein1([1, 0, 0], [0, 0, 1], ground) - 2.0) < 1e-12
    assert abs(bl.cosine_distance([1.0, 0.0], [0.0, 2.0]) - 1.0) < 1e-12

    eye = [[float(i == j) for j in range(4)] for i in range(4)]
    assert abs(bl.effective_rank(eye) - math.log(4)) < 1e-12

    run = bl.linear_experiment(steps=5, seed=1)
    assert len(run) == 6 and run[0]["loss"] is None

    config = bl.small_config(4, 4, "dense_distance")
    config["train_steps"] = 3
    config["min_replay"] = 40
    with tempfile.TemporaryDirectory() as out:
        rows = bl.train(config, out)
        assert [r["step"] for r in rows] == [1, 2, 3]
        assert (Path(out) / "final.ckpt").is_file()

    try:
        bl.Mdp([[[0.5, 0.4]]], [[0.0]], 0.9)
    except ValueError:
        pass
    else:
        raise AssertionError("invalid transition row accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
