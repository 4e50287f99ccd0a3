"""Time the hot kernels with and without numba.

    python benchmarks/bench_kernels.py [--repeat 3]

Each backend runs in its own interpreter because ``CBFPA_NUMBA`` is read at
import time.  Numba timings exclude the first (compiling) call.  The script
also checks that both backends produce the same numbers.
"""
import argparse
import json
import os
import subprocess
import sys

CHILD = r"""
import json, sys, time
import numpy as np
import cbfpa
from cbfpa import cbf_core, envs, scalar_flow

repeat = int(sys.argv[1])


def best(fn):
    fn()  # warm-up / compile
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def flow():
    tr = scalar_flow.run_flow(scalar_flow.illustrative_objectives(), "cbfpa", 20000, 1e-3, 10.0, 0.01)
    return [float(tr.j_values[-1]), float(tr.g_bar)]


def fuzz():
    r = cbf_core.fuzz_oracle(2000, 0)
    return [r.max_abs_da, r.max_abs_dc]


def cartpole():
    p, s = envs.CartpoleParams(), np.array([0.0, 0.0, 0.1, 0.0])
    for k in range(20000):
        s = envs.cartpole_step(p, s, 0.3 * np.sin(0.01 * k))
    return s.tolist()


def unicycle():
    p, s = envs.UnicycleParams(), np.array([-1.5, 0.0, 0.0])
    for k in range(20000):
        s = envs.unicycle_step(p, s, [0.2, np.cos(0.001 * k)])
    return s.tolist()


res = {"numba": cbfpa.ENABLE_NUMBA}
for name, fn in [("illustrative_flow_20k", flow), ("fuzz_oracle_2k", fuzz), ("cartpole_20k_steps", cartpole),
                 ("unicycle_20k_steps", unicycle)]:
    t, out = best(fn)
    res[name] = {"seconds": t, "result": out}
print(json.dumps(res))
"""


def run(flag, repeat):
    env = dict(os.environ, CBFPA_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", CHILD, str(repeat)], env=env, check=True,
                         capture_output=True, text=True).stdout
    return json.loads(out)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    fast, slow = run("1", args.repeat), run("0", args.repeat)
    if not fast["numba"]:
        print("numba unavailable: both columns are the numpy fallback")
    print(f"{'kernel':<24}{'numba s':>10}{'numpy s':>10}{'speedup':>9}  max |diff|")
    for name in (k for k in fast if k != "numba"):
        a, b = fast[name], slow[name]
        diff = max(abs(x - y) for x, y in zip(a["result"], b["result"]))
        print(f"{name:<24}{a['seconds']:>10.4f}{b['seconds']:>10.4f}{b['seconds'] / a['seconds']:>8.1f}x  {diff:.3g}")


if __name__ == "__main__":
    main()
