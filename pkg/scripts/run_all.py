"""Run every shipped config and print the headline verdicts.

Usage: python3 scripts/run_all.py [--force] [--out runs]
"""

import argparse
import time
from pathlib import Path

from torus_macrospec import harness_cli as h

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--force", action="store_true")
    p.add_argument("--out", default=str(ROOT / "runs"))
    p.add_argument("names", nargs="*", default=["flat", "flat_general", "conformal", "laminate"])
    args = p.parse_args()
    for name in args.names:
        cfg = h.load_config(ROOT / "configs" / f"{name}.toml")
        t0 = time.perf_counter()
        res = h.run(cfg, Path(args.out) / name, force=args.force)
        v = res.report["verdicts"]
        print(f"== {name}: exit {res.exit_code} in {time.perf_counter() - t0:.0f}s")
        print(f"   audit {v['audit']['verdict']} exceeding={v['audit'].get('exceeding')}")
        t2 = v["spectral_bound"]
        print(f"   lambda_inf {t2['lambda_inf']:.5f} slack {t2['slack']:+.4f} bound_holds {t2['bound_holds']}")
        print(f"   albanese min ratio {v['albanese_inclusion']['min_ratio']:.4f} holds {v['albanese_inclusion']['holds']}")
        av = v["asymptotic_volume"]
        print(f"   asvol {av['asvol']:.4f} bound {av['bound']:.4f} cross gap {av['cross_gap']:.2e}")
        print(f"   dirichlet {v['dirichlet_sweep']}")
        print(f"   neumann {v['neumann_sweep']}")
        print(f"   faber-krahn {v['faber_krahn']}")
        print(f"   heat {v['heat']}")


if __name__ == "__main__":
    main()
