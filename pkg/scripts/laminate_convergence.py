"""Distance error on the laminate against its exact flattening.

The laminate ``diag(a(y1), 1)`` with ``a = exp(sin 2 pi y1)`` is the pullback
of the Euclidean metric by ``Phi(x) = (int_0^x1 sqrt(a), x2)``, so
``d(0, x) = |Phi(x)|`` exactly. This prints the worst relative error of the
stencil distance on a circle of radius 10 for several (resolution, radius)
pairs.

Usage: python3 scripts/laminate_convergence.py [--radius 10]
"""

import argparse
import math

import numpy as np
from scipy import integrate

from torus_macrospec.geodesic_distance import distance_map
from torus_macrospec.metric_field import make_metric

SPEC = {"family": "laminate", "axis": 1, "log_profile": {"terms": [{"coef": 1.0, "k": [1], "funcs": ["sin"]}]}}


def phi1(x):
    period, _ = integrate.quad(lambda s: math.exp(0.5 * math.sin(2 * math.pi * s)), 0, 1, epsabs=1e-14)
    whole = math.floor(x)
    part, _ = integrate.quad(lambda s: math.exp(0.5 * math.sin(2 * math.pi * s)), 0, x - whole, epsabs=1e-14)
    return whole * period + part


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--radius", type=float, default=10.0)
    p.add_argument("--pairs", default="8:3,16:3,32:3,16:4,32:4,32:5")
    args = p.parse_args()
    field = make_metric(SPEC, 128)
    th = np.linspace(0, math.pi / 2, 91)
    pts = args.radius * np.stack([np.cos(th), np.sin(th)], axis=1)
    exact = np.array([math.hypot(phi1(x), y) for x, y in pts])
    print("res  r  max_rel_err  min_rel_err")
    for pair in args.pairs.split(","):
        res, r = (int(v) for v in pair.split(":"))
        dist = distance_map(field, args.radius * 1.7 + 1, res, r)
        rel = dist.value_at(pts) / exact - 1
        print(f"{res:3d}  {r}  {rel.max():+.4%}    {rel.min():+.4%}")


if __name__ == "__main__":
    main()
