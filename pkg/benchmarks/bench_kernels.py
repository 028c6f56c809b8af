"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--sizes 64,128,256]
"""

import argparse
import timeit

import numpy as np

from gancompose import kernels


def make_inputs(res, c=8, seed=0):
    rng = np.random.default_rng(seed)
    return dict(x=rng.normal(size=(c, res, res)), scale=rng.normal(size=c), shift=rng.normal(size=c),
                k=rng.normal(size=(c, 3, 3)), field=rng.normal(size=(c, res, res)),
                mix=rng.normal(size=(c, c)), bias=rng.normal(size=(c, res, res)),
                g=rng.normal(size=(c, res, res)))


def cases(impl, a):
    fwd_args = (a["x"], a["scale"], a["shift"], a["k"], a["field"], a["mix"], a["bias"], 1.0, 0.2)
    _, d = impl.modconv_forward(*fwd_args)
    flat = a["x"].ravel()
    return {
        "dwconv3x3": lambda: impl.dwconv3x3(a["x"], a["k"]),
        "dwconv3x3_backward": lambda: impl.dwconv3x3_backward(a["g"], a["k"]),
        "smooth_leaky": lambda: impl.smooth_leaky(flat, 0.2),
        "modconv_forward": lambda: impl.modconv_forward(*fwd_args),
        "modconv_backward": lambda: impl.modconv_backward(a["g"], a["x"], a["scale"], a["k"],
                                                          a["field"], a["mix"], d),
    }


def best_time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--sizes", default="64,128,256")
    args = parser.parse_args(argv)

    found = kernels.backends()
    if "compiled" not in found:
        print("compiled extension not built; timing the numpy fallback only")
    names = sorted(found)
    print(f"{'kernel':<20} {'res':>4} " + " ".join(f"{n + ' ms':>12}" for n in names) + f" {'speedup':>8}")
    for res in (int(s) for s in args.sizes.split(",")):
        a = make_inputs(res)
        per_backend = {n: cases(found[n], a) for n in names}
        for kernel in per_backend["python"]:
            times = {n: best_time(per_backend[n][kernel], args.repeat) * 1e3 for n in names}
            speed = times["python"] / times["compiled"] if "compiled" in times else float("nan")
            print(f"{kernel:<20} {res:>4} " + " ".join(f"{times[n]:>12.3f}" for n in names)
                  + f" {speed:>7.1f}x")


if __name__ == "__main__":
    main()
