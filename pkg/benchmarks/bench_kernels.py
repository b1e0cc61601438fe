"""Time the compiled and numpy kernel backends on a GAT-sized workload.

Usage: python3 benchmarks/bench_kernels.py [--repeats 5] [--days 8]
"""

import argparse
import time

import numpy as np

from gnnpp import kernels
from gnnpp.graph import build_topology
from gnnpp.synth import SynthConfig, place_stations


def workload(days, members, channels, heads):
    stations = place_stations(SynthConfig(n_stations=20))
    topo = build_topology([(s.lat, s.lon) for s in stations], members, 100.0)
    src, dst, attr = topo.batched(days)
    n = topo.n_nodes * days
    rng = np.random.default_rng(0)
    cat = channels * heads
    return dict(
        n=n,
        src=src,
        dst=dst,
        attr=attr,
        xt=rng.normal(size=(n, cat)),
        xs=rng.normal(size=(n, cat)),
        we=rng.normal(size=cat),
        att=rng.normal(size=(heads, channels)),
        v=rng.normal(size=(n, cat)),
        g=rng.normal(size=(len(src), heads)),
        set_x=rng.normal(size=(20 * days, members, cat)),
    )


def cases(w):
    scores = kernels.gatv2_scores(w["xt"], w["xs"], w["attr"], w["we"], w["att"], w["src"], w["dst"], 0.2)
    alpha = kernels.segment_softmax(scores, w["dst"], w["n"])
    return {
        "gatv2_scores": lambda: kernels.gatv2_scores(w["xt"], w["xs"], w["attr"], w["we"], w["att"], w["src"], w["dst"], 0.2),
        "gatv2_scores_backward": lambda: kernels.gatv2_scores_backward(
            w["g"], w["xt"], w["xs"], w["attr"], w["we"], w["att"], w["src"], w["dst"], 0.2
        ),
        "segment_softmax": lambda: kernels.segment_softmax(scores, w["dst"], w["n"]),
        "segment_softmax_backward": lambda: kernels.segment_softmax_backward(alpha, w["g"], w["dst"], w["n"]),
        "attend": lambda: kernels.attend(alpha, w["v"], w["src"], w["dst"], w["n"]),
        "attend_backward": lambda: kernels.attend_backward(w["v"], alpha, w["v"], w["src"], w["dst"]),
        "scatter_add": lambda: kernels.scatter_add(w["g"], w["dst"], w["n"]),
        "set_sum": lambda: kernels.set_sum(w["set_x"]),
    }


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--days", type=int, default=8)
    ap.add_argument("--members", type=int, default=11)
    ap.add_argument("--channels", type=int, default=8)
    ap.add_argument("--heads", type=int, default=2)
    args = ap.parse_args()
    w = workload(args.days, args.members, args.channels, args.heads)
    print(f"{len(w['src'])} edges, {w['n']} nodes, {args.heads} heads x {args.channels} channels")
    results = {}
    for backend in ("cython", "python"):
        try:
            kernels.use_backend(backend)
        except ImportError:
            print(f"{backend} backend unavailable, skipped")
            continue
        results[backend] = {name: best_of(fn, args.repeats) for name, fn in cases(w).items()}
    print(f"{'kernel':<28}{'cython ms':>12}{'python ms':>12}{'speedup':>10}")
    for name in cases(w):
        c = results.get("cython", {}).get(name)
        p = results.get("python", {}).get(name)
        fmt = lambda t: f"{1e3 * t:12.2f}" if t is not None else f"{'-':>12}"  # noqa: E731
        ratio = f"{p / c:10.1f}" if c and p else f"{'-':>10}"
        print(f"{name:<28}{fmt(c)}{fmt(p)}{ratio}")


if __name__ == "__main__":
    main()
