"""Smoke test for the `reachped` extension module.

Build and install it first, e.g. `maturin develop -m crates/python/Cargo.toml`.
"""

import json
import math
import random
import tempfile

import reachped


def check_zonotope():
    square = reachped.Zonotope([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]])
    assert math.isclose(square.area(), 4.0)
    assert square.contains([1.0, 1.0])
    assert not square.contains([1.1, 0.0])
    rotated = square.linear_map([[0.0, -1.0], [1.0, 0.0]])
    assert math.isclose(rotated.area(), 4.0)
    bigger = square.minkowski_sum(square)
    assert math.isclose(bigger.support([1.0, 0.0]), 2.0)
    many = reachped.Zonotope([0.0, 0.0], [[random.uniform(-1, 1), random.uniform(-1, 1)] for _ in range(12)])
    reduced = many.reduce_order(2)
    assert len(reduced.generators) <= 4
    assert reduced.area() >= many.area() - 1e-9
    assert len(square.polygon()) == 4


def check_reach():
    theta = 0.1
    a = [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
    xm = [[random.uniform(-1, 1), random.uniform(-1, 1)] for _ in range(50)]
    xp = [[a[0][0] * x + a[0][1] * y, a[1][0] * x + a[1][1] * y] for x, y in xm]
    sets, truncated = reachped.identify_and_reach(xm, xp, [0.0, 0.0], [1.0, 0.0], [0.01, 0.01], horizon=5)
    assert len(sets) == 5 and not truncated
    x = [1.0, 0.0]
    for z in sets:
        x = [a[0][0] * x[0] + a[0][1] * x[1], a[1][0] * x[0] + a[1][1] * x[1]]
        assert z.contains(x)


def check_clusters():
    rng = random.Random(0)
    pts = [[rng.gauss(0, 1), rng.gauss(0, 1)] for _ in range(60)]
    pts += [[rng.gauss(20, 1), rng.gauss(0, 1)] for _ in range(60)]
    labels = reachped.hdbscan_labels(pts)
    assert len(set(labels[:60]) - {-1}) == 1 and len(set(labels[60:]) - {-1}) == 1
    assert labels[0] != labels[60]

    ids = [str(i) for i in range(len(pts))]
    index = reachped.AnnIndex(ids, pts, labels, [5.0, 5.0])
    assert len(index) == len(pts)
    hits = index.query(pts[3], 3)
    assert hits[0][0] == "3" and hits[0][1] == 0.0
    label, distance, reason = index.assign([20.0, 0.0])
    assert label == labels[60] and reason is None
    label, _, reason = index.assign([1000.0, 1000.0])
    assert label is None and reason == "too_far"


def check_pipeline():
    with tempfile.TemporaryDirectory() as out:
        cfg = reachped.Config("synth_tracks = 6\n")
        cfg.set("out", out)
        cfg.validate()
        summary = json.loads(reachped.run_stage("synth", cfg))
        assert summary["tracks"] == 6
        assert "synth_tracks = 6" in cfg.echo()
        try:
            reachped.run_stage("train", cfg)
        except FileNotFoundError as e:
            assert "reachped ingest" in str(e)
        else:
            raise AssertionError("train without chunks should fail")


if __name__ == "__main__":
    random.seed(1)
    check_zonotope()
    check_reach()
    check_clusters()
    check_pipeline()
    print("smoke test passed")
