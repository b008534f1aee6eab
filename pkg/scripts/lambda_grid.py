"""Mean HM over seeds for a grid of diversity (lambda3) and matching (lambda4) weights.

    python3 scripts/lambda_grid.py --lambda3 0.1,0.4,0.7 --lambda4 0.01,0.04,0.07
"""

import argparse
import statistics

from attriprompt.config import RunConfig, load_config
from attriprompt.data import SyntheticSpec, load_spec
from attriprompt.experiment import seeded_run


def floats(text):
    return [float(v) for v in text.split(",")]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--lambda3", type=floats, default=[0.1, 0.4, 0.7])
    parser.add_argument("--lambda4", type=floats, default=[0.01, 0.04, 0.07])
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--config")
    parser.add_argument("--spec")
    args = parser.parse_args()

    config = load_config(args.config) if args.config else RunConfig()
    spec = load_spec(args.spec) if args.spec else SyntheticSpec()
    seeds = [int(s) for s in args.seeds.split(",")]

    print("lambda3\\lambda4 " + " ".join(f"{l4:>13g}" for l4 in args.lambda4))
    variances = []
    for l3 in args.lambda3:
        cells = []
        for l4 in args.lambda4:
            hms = [seeded_run(config.replace(lambda3=l3, lambda4=l4), spec, s).hm for s in seeds]
            if len(hms) > 1:
                variances.append(statistics.variance(hms))
            cells.append(f"{statistics.fmean(hms):6.2f}±{statistics.stdev(hms) if len(hms) > 1 else 0:5.2f}")
        print(f"{l3:>15g} " + " ".join(f"{c:>13}" for c in cells), flush=True)
    if variances:
        print(f"\npooled seed std of HM: {statistics.fmean(variances) ** 0.5:.2f}")


if __name__ == "__main__":
    main()
