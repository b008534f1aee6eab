"""Compare the full model against the single-prompt CE baseline on toy base-to-novel splits.

    python3 scripts/base_to_novel.py --seeds 0,1,2
"""

import argparse
import statistics
import time

from attriprompt.config import RunConfig, load_config
from attriprompt.data import SyntheticSpec, load_spec
from attriprompt.experiment import BASELINE_OVERRIDES, seeded_run


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--config", help="run config file (defaults when omitted)")
    parser.add_argument("--spec", help="synthetic spec file (defaults when omitted)")
    args = parser.parse_args()

    config = load_config(args.config) if args.config else RunConfig()
    spec = load_spec(args.spec) if args.spec else SyntheticSpec()
    seeds = [int(s) for s in args.seeds.split(",")]
    variants = {"full": config, "baseline": config.replace(**BASELINE_OVERRIDES)}

    print(f"{'variant':<9} {'seed':>4} {'base':>7} {'novel':>7} {'hm':>7}")
    means = {}
    for name, cfg in variants.items():
        runs = []
        for seed in seeds:
            start = time.perf_counter()
            r = seeded_run(cfg, spec, seed)
            runs.append(r)
            print(f"{name:<9} {seed:>4} {r.base_acc:7.2f} {r.novel_acc:7.2f} {r.hm:7.2f}   ({time.perf_counter() - start:.0f}s)", flush=True)
        means[name] = [statistics.fmean(getattr(r, a) for r in runs) for a in ("base_acc", "novel_acc", "hm")]
    print()
    for name, (b, n, h) in means.items():
        print(f"{name:<9} {'mean':>4} {b:7.2f} {n:7.2f} {h:7.2f}")
    d = [f - b for f, b in zip(means["full"], means["baseline"])]
    print(f"{'delta':<9} {'':>4} {d[0]:+7.2f} {d[1]:+7.2f} {d[2]:+7.2f}")


if __name__ == "__main__":
    main()
