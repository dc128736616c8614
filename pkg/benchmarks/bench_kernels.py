"""Time the compiled kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--rows 200000] [--repeat 5]

Each kernel is called once per backend before timing so compilation is not
counted. The last block times one training epoch end to end.
"""
from __future__ import annotations

import argparse
import os
import timeit

import numpy as np

from urbanstate import kernels


def _problem(rows, n=2000, tau=40, d=7, seed=0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([rng.normal(size=(n, d - 1)), np.ones(n)])
    return dict(
        nodes=rng.integers(0, n, rows), types=rng.integers(0, tau, rows),
        labels=(rng.random(rows) < 0.2).astype(float), ratings=rng.normal(size=rows),
        rhat=rng.normal(size=(n, tau)), alpha=rng.normal(size=tau) * 0.3,
        theta=rng.normal(size=(tau, d)) * 0.3, X=X,
    )


def _cases(p, points):
    lat_a, lon_a, lat_b, lon_b = points
    return {
        "unobserved_rows": lambda: kernels.unobserved_rows(p["nodes"], p["types"], p["labels"], p["rhat"],
                                                           p["alpha"], p["theta"], p["X"], 1.0, 1e-6),
        "observed_rows": lambda: kernels.observed_rows(p["nodes"], p["types"], p["labels"], p["ratings"],
                                                       p["rhat"], p["alpha"], p["theta"], p["X"], 20.0, 1.0),
        "nearest_haversine": lambda: kernels.nearest_haversine(lat_a, lon_a, lat_b, lon_b),
    }


def _time(fn, repeat):
    fn()  # compile / warm caches
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def _epoch_case():
    from urbanstate.data_model import WeekSplit
    from urbanstate.synthetic import SyntheticSpec, make_synthetic_panel
    from urbanstate.training import TrainConfig, train

    panel, graph, demo, _ = make_synthetic_panel(SyntheticSpec(seed=0))
    split = WeekSplit.tail(panel.n_weeks, 25, 13)
    return lambda: train(panel, graph, demo, split, "full", TrainConfig(epochs=1, validation="last"))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=200_000)
    ap.add_argument("--points", type=int, default=3000, help="ratings and reports for the matcher")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-epoch", action="store_true")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(1)
    points = (rng.uniform(40.5, 40.9, args.points), rng.uniform(-74.2, -73.7, args.points),
              rng.uniform(40.5, 40.9, args.points), rng.uniform(-74.2, -73.7, args.points))
    cases = _cases(_problem(args.rows), points)
    if not args.skip_epoch:
        cases["train_epoch"] = _epoch_case()

    old = os.environ.get("URBANSTATE_BACKEND")
    print(f"{'case':<20}{'numba s':>12}{'numpy s':>12}{'speedup':>10}")
    try:
        for name, fn in cases.items():
            t = {}
            for backend in ("numba", "numpy"):
                os.environ["URBANSTATE_BACKEND"] = backend
                t[backend] = _time(fn, 1 if name == "train_epoch" else args.repeat)
            print(f"{name:<20}{t['numba']:>12.4f}{t['numpy']:>12.4f}{t['numpy'] / t['numba']:>9.1f}x")
    finally:
        if old is None:
            os.environ.pop("URBANSTATE_BACKEND", None)
        else:
            os.environ["URBANSTATE_BACKEND"] = old


if __name__ == "__main__":
    main()
