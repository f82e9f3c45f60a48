"""Ablation table on the desk experiment, one row per adaptation mode.

Every mode runs at its default learning rate unless --lr is given; main_only
can additionally be reported at its best rate over the sweep.

    python3 scripts/ablation_table.py --target-n-per-class 400 --best-main
"""
import argparse

import numpy as np

from ttalab import adapt, desk
from ttalab.io import checkpoint_hash


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    ap.add_argument("--modes", nargs="+", default=list(adapt.TABLE_ORDER))
    ap.add_argument("--lr", type=float, default=None, help="one rate for every mode")
    ap.add_argument("--target-n-per-class", type=int, default=100)
    ap.add_argument("--corruption", default="gaussian_noise")
    ap.add_argument("--severity", type=int, default=5)
    ap.add_argument("--best-main", action="store_true", help="also sweep main_only and report its best rate")
    args = ap.parse_args()

    cfg = desk.DeskConfig(target_n_per_class=args.target_n_per_class, corruption=args.corruption,
                          severity=args.severity)
    source = desk.source_dataset(cfg)
    model = desk.pretrained_model(cfg, source)
    art = desk.prepare_artifacts(cfg, model, source, checkpoint_hash(model))

    configs = [adapt.AdaptConfig(m, lr=args.lr) for m in args.modes]
    if args.best_main:
        configs += adapt.lr_sweep_configs(adapt.AdaptConfig(), modes=("main_only",))
    rows, _ = adapt.ablation_matrix(model, art, configs, args.seeds, desk.stream_factory(cfg))

    src = desk.source_error(model, cfg, args.seeds, bn_mode="running")
    print(f"{args.corruption} severity {args.severity}, {len(args.seeds)} seeds; "
          f"source (stored batchnorm estimates) {src * 100:.2f}")
    print(f"{'mode':<18} {'lr':>8} {'error %':>16}")
    main_rows = [r for r in rows if r.mode == "main_only" and r.errors]
    best = min(main_rows, key=lambda r: r.mean) if main_rows else None
    for r in rows:
        if args.best_main and r.mode == "main_only" and r is not best:
            continue
        tag = "  (best main_only)" if args.best_main and r is best else ""
        err = f"{r.mean * 100:6.2f} ± {r.std * 100:5.2f}" if r.errors else "failed"
        print(f"{r.mode:<18} {r.lr:>8g} {err:>16}{tag}")
        for seed, msg in r.failures:
            print(f"    seed {seed}: {msg}")


if __name__ == "__main__":
    main()
