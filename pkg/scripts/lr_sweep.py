"""Learning-rate sweep with and without SWR on the desk experiment.

Prints one line per (mode, lr): mean error over seeds, per-seed errors, and
how many seeds end up above the unadapted source model.

    python3 scripts/lr_sweep.py --seeds 1 2 3 4 5
"""
import argparse
import time

import numpy as np

from ttalab import adapt, desk
from ttalab.io import checkpoint_hash


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    ap.add_argument("--lrs", type=float, nargs="+", default=list(adapt.LR_SWEEP))
    ap.add_argument("--modes", nargs="+", default=["main_only", "main+swr"])
    ap.add_argument("--target-n-per-class", type=int, default=100)
    args = ap.parse_args()

    cfg = desk.DeskConfig(target_n_per_class=args.target_n_per_class)
    t0 = time.perf_counter()
    source = desk.source_dataset(cfg)
    model = desk.pretrained_model(cfg, source)
    art = desk.prepare_artifacts(cfg, model, source, checkpoint_hash(model))
    src = np.array(desk.source_errors(model, cfg, args.seeds, bn_mode="running"))
    print(f"setup {time.perf_counter() - t0:.0f}s; source error {src.mean():.4f} per seed {np.round(src, 3).tolist()}")

    configs = adapt.lr_sweep_configs(adapt.AdaptConfig(), args.lrs, args.modes)
    rows, _ = adapt.ablation_matrix(model, art, configs, args.seeds, desk.stream_factory(cfg))
    for row in sorted(rows, key=lambda r: (r.mode, -r.lr)):
        errs = np.array(row.errors)
        above = int(np.sum(errs > src[:len(errs)]))
        print(f"{row.mode:<10} lr={row.lr:<8g} mean {row.mean:.4f}  seeds {np.round(errs, 3).tolist()}  "
              f"above source {above}/{len(errs)}" + (f"  failures {row.failures}" if row.failures else ""))


if __name__ == "__main__":
    main()
