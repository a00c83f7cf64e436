"""Run one or more experiment configs: python3 scripts/run_experiment.py configs/lambda_sweep.json ..."""
import argparse
import json
import sys

from kernel_trading.harness import ExperimentConfig, run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("configs", nargs="+")
    ap.add_argument("--seeds", type=int, nargs="*", help="override the seed list")
    ap.add_argument("--out", help="output directory (single config only)")
    args = ap.parse_args(argv)
    if args.out and len(args.configs) > 1:
        ap.error("--out needs a single config")
    for path in args.configs:
        with open(path) as fh:
            doc = json.load(fh)
        if args.seeds:
            doc["seeds"] = args.seeds
        cfg = ExperimentConfig.from_dict(doc)
        res = run(cfg, args.out)
        print(f"{cfg.experiment}: {len(res.rows)} rows, {res.manifest['wall_time_s']:.1f} s -> "
              f"{args.out or cfg.output_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
