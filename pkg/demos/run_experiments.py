"""Run the comparative experiments on a preset and print their outcomes.

    python3 demos/run_experiments.py --preset desk

Upstream artifacts and per-run results are cached under $D2G_CACHE, so a
second invocation (or the acceptance tests) reuses finished work.
"""

import argparse
import json
import logging
import time

from d2g import config, pipeline
from d2g.experiments import Experiments

ORDER = ("benchmark", "reconstruction", "ablation", "gan", "size", "rewire")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--only", nargs="*", choices=ORDER, default=list(ORDER))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    cfg = config.preset(args.preset)
    pipeline.set_deterministic(True, cfg.seed)
    ex = Experiments(cfg)
    jobs = {
        "benchmark": ex.loss_benchmark,
        "reconstruction": ex.reconstruction,
        "ablation": lambda: ex.loss_ablation(config.ABLATION_LOSS_MODES, config.ABLATION_SEEDS),
        "gan": lambda: ex.gan_gain(config.ABLATION_SEEDS),
        "size": ex.size_trend,
        "rewire": ex.rewire_control,
    }
    for name in ORDER:
        if name in args.only:
            t0 = time.time()
            result = jobs[name]()
            print(f"== {name} ({time.time() - t0:.0f}s)\n{json.dumps(result, indent=2)}", flush=True)


if __name__ == "__main__":
    main()
