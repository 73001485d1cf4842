"""Faber-Krahn property suite over random unit-area convex polygons.

For each norm, ``lambda_1(D)`` is compared with ``lambda_1(D*)`` where ``D*``
is the norm ball of the same area. Violations beyond twice the solver
tolerance are reported.

Usage: python3 scripts/faber_krahn_suite.py [--count 5] [--resolution 24] [--seed 0]
"""

import argparse
import math

import numpy as np
from scipy.spatial import ConvexHull

from torus_macrospec.norm_analysis import ConvexDomain, NormSpec, faber_krahn_report


def polygons(rng, count):
    out = []
    while len(out) < count:
        k = int(rng.integers(3, 8))
        th = np.sort(rng.uniform(0, 2 * math.pi, k))
        pts = np.stack([np.cos(th), np.sin(th)], axis=1) * rng.uniform(0.6, 1.4, (k, 1))
        hull = ConvexHull(pts)
        if hull.volume >= 0.2:
            out.append(pts[hull.vertices] / math.sqrt(hull.volume))
    return out


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--resolution", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    rng = np.random.default_rng(args.seed)
    norms = {"euclid": NormSpec.euclidean(), "l1": NormSpec.lp(1), "l4": NormSpec.lp(4)}
    for name, norm in norms.items():
        for i, verts in enumerate(polygons(rng, args.count)):
            rep = faber_krahn_report(ConvexDomain(verts), norm, args.resolution)
            bad = rep.slack < -2 * rep.tolerance
            print(f"{name:6s} #{i} sides={len(verts)} lambda(D)={rep.lambda1_D:8.4f} "
                  f"lambda(D*)={rep.lambda1_Dstar:8.4f} slack={rep.slack:+.4f}{'  VIOLATION' if bad else ''}")


if __name__ == "__main__":
    main()
