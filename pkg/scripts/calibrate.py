"""Calibration report for the desk setup.

Trains the source model, prepares the artifacts and prints the quantities the
defaults were chosen from: source accuracy, source error on the target streams
under both batchnorm modes, the penalty vector, and the projector's mean
cosine curve.

    python3 scripts/calibrate.py --projector-lr 0.001
"""
import argparse
import time

import numpy as np

from ttalab import adapt, desk, nsp


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    ap.add_argument("--hidden", type=int, default=16)
    ap.add_argument("--pretrain-epochs", type=int, default=20)
    ap.add_argument("--projector-depth", type=int, default=2)
    ap.add_argument("--projector-lr", type=float, default=0.001)
    ap.add_argument("--projector-epochs", type=int, default=20)
    args = ap.parse_args()

    cfg = desk.DeskConfig(hidden=args.hidden, pretrain_epochs=args.pretrain_epochs,
                          projector_depth=args.projector_depth, projector_lr=args.projector_lr,
                          projector_epochs=args.projector_epochs)
    t0 = time.perf_counter()
    source = desk.source_dataset(cfg)
    model = desk.pretrained_model(cfg, source)
    print(f"model {model.num_parameters()} parameters, trained in {time.perf_counter() - t0:.0f}s")
    print(f"source train accuracy {adapt.accuracy(model, source):.4f}")
    for bn_mode in ("running", "batch"):
        errs = desk.source_errors(model, cfg, args.seeds, bn_mode=bn_mode)
        print(f"source target error ({bn_mode} statistics) {np.mean(errs):.4f} per seed {np.round(errs, 3).tolist()}")

    t0 = time.perf_counter()
    art = desk.prepare_artifacts(cfg, model, source)
    print(f"artifacts prepared in {time.perf_counter() - t0:.0f}s")
    for name, s, w in zip(art.penalty.unit_names, art.penalty.similarities, art.penalty.penalties):
        print(f"  {name:<6} similarity {s:+.4f}  penalty {w:.4f}")

    _, _, hist = nsp.train_projector_and_prototypes(
        model, source, cfg.transform_spec(), epochs=cfg.projector_epochs, seed=cfg.seed,
        depth=cfg.projector_depth, width=cfg.projector_width, lr=cfg.projector_lr, batch_size=2 * cfg.batch_size)
    print("projector mean cosine by epoch: " + " ".join(f"{c:.3f}" for c in hist.mean_cos))


if __name__ == "__main__":
    main()
