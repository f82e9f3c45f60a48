"""Command line: pretrain | prepare | adapt | report.

Every option can come from a flat ``key=value`` config file (``--config``) or
from ``--key value`` flags (dashes or underscores); flags win. Unknown keys are
errors. ``TTA_SEED`` supplies the seed when neither source sets it.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import desk
from . import io as tio
from .adapt import MODES, TABLE_ORDER, AdaptConfig, MetricsRecord, run_online_evaluation

log = logging.getLogger("ttalab")

METRIC_COLUMNS = ("run_id", "seed", "corruption", "severity", "batch_index", "n", "n_wrong",
                  "mean_main_entropy", "mean_nsp_entropy")
SUMMARY_TAG = "total"
ECHO_SKIP = ("out",)  # where the file goes is not part of the run


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# RunConfig
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    # experiment (mirrors DeskConfig)
    seed: int = 0
    num_classes: int = 5
    image_size: int = 16
    n_per_class: int = 300
    arch: str = "cnn"
    hidden: int = 16
    pretrain_epochs: int = 20
    pretrain_lr: float = 0.1
    batch_size: int = 50
    n_samples: int = 1024
    swr_variant: str = "exponent=2"
    transform: str = "default"
    projector_depth: int = 2
    projector_width: int = 512
    projector_hidden: int = 0
    projector_epochs: int = 20
    projector_lr: float = 0.001
    prototype_source: str = "projection_z"
    target_n_per_class: int = 100
    corruption: str = "gaussian_noise"
    severity: int = 5
    stream_batch_size: int = 50
    # adaptation (mirrors AdaptConfig)
    mode: str = "full"
    lr: float = -1.0  # negative: per-mode default
    lambda_m1: float = 0.2
    lambda_m2: float = 0.25
    lambda_a1: float = 0.8
    lambda_a2: float = 0.25
    lambda_s: float = 0.1
    lambda_r: float = 250.0
    tau: float = 0.1
    bn_mode: str = "batch"
    projector_finetune: bool = False
    selfsup_stop_grad: bool = True
    test_time_ema: bool = False
    epochs: int = 1
    # paths and run identity
    run_id: str = ""
    checkpoint: str = "src.ckpt"
    penalty: str = "penalty.bin"
    prototypes: str = "prototypes.bin"
    projector: str = "projector.bin"
    source_dataset: str = ""
    out: str = ""

    def desk(self) -> desk.DeskConfig:
        names = {f.name for f in fields(desk.DeskConfig)}
        return desk.DeskConfig(**{k: getattr(self, k) for k in names})

    def adapt(self) -> AdaptConfig:
        from .swr import SwrVariant
        return AdaptConfig(mode=self.mode, lr=None if self.lr < 0 else self.lr, lambda_m1=self.lambda_m1,
                           lambda_m2=self.lambda_m2, lambda_a1=self.lambda_a1, lambda_a2=self.lambda_a2,
                           lambda_s=self.lambda_s, lambda_r=self.lambda_r, tau=self.tau, bn_mode=self.bn_mode,
                           swr_variant=SwrVariant.parse(self.swr_variant),
                           projector_finetune=self.projector_finetune, selfsup_stop_grad=self.selfsup_stop_grad,
                           test_time_ema=self.test_time_ema, epochs=self.epochs)

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key, text):
    kind = type(getattr(RunConfig, key)) if hasattr(RunConfig, key) else str
    try:
        if kind is bool:
            low = str(text).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise UsageError(f"bad value for {key}: {text!r} (expected {kind.__name__})") from None


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        k = k.replace("-", "_")
        if k not in _FIELDS:
            raise UsageError(f"config line {lineno}: unknown key {k!r}")
        out[k] = _coerce(k, v)
    return out


def resolve_config(config_path=None, overrides=None, env=None) -> RunConfig:
    env = os.environ if env is None else env
    values = {}
    if config_path:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
        values.update(parse_config_text(text))
    for k, v in (overrides or {}).items():
        if k not in _FIELDS:
            raise UsageError(f"unknown key {k!r}")
        values[k] = _coerce(k, v)
    if "seed" not in values and env.get("TTA_SEED"):
        values["seed"] = _coerce("seed", env["TTA_SEED"])
    cfg = RunConfig(**values)
    if cfg.mode not in MODES:
        raise UsageError(f"unknown mode {cfg.mode!r}; expected one of {', '.join(MODES)}")
    return cfg


# ---------------------------------------------------------------------------
# metrics file
# ---------------------------------------------------------------------------


def _fmt(x):
    return repr(float(x))


def metrics_csv(records, config: RunConfig, run_id: str) -> str:
    """Config echo as '# key=value' lines, header, per-batch rows, one summary row per run."""
    buf = _io.StringIO()
    for k, v in config.items():
        if k not in ECHO_SKIP:
            buf.write(f"# {k}={v}\n")
    resolved = config.adapt()
    buf.write(f"# resolved_lr={resolved.step_size!r}\n")
    buf.write(f"# config_hash={resolved.hash()}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for rec in records:
        for b in rec.batches:
            w.writerow([run_id, rec.seed, rec.corruption, rec.severity, b.batch_index, b.n, b.n_wrong,
                        _fmt(b.mean_main_entropy), _fmt(b.mean_nsp_entropy)])
        main = np.mean([b.mean_main_entropy for b in rec.batches]) if rec.batches else float("nan")
        nspe = np.mean([b.mean_nsp_entropy for b in rec.batches]) if rec.batches else float("nan")
        w.writerow([run_id, rec.seed, rec.corruption, rec.severity, SUMMARY_TAG, rec.n, rec.n_wrong,
                    _fmt(main), _fmt(nspe)])
    return buf.getvalue()


@dataclass
class MetricsSummary:
    path: str
    config: dict
    runs: list  # (seed, corruption, severity, n, n_wrong)


def read_metrics(path) -> MetricsSummary:
    text = Path(path).read_text(encoding="utf-8")
    config, body = {}, []
    for line in text.splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            config[k] = v
        elif line.strip():
            body.append(line)
    if not body:
        raise ValueError(f"{path}: no CSV header")
    rows = list(csv.reader(body))
    if tuple(rows[0]) != METRIC_COLUMNS:
        raise ValueError(f"{path}: unexpected columns {rows[0]}")
    for key in ("mode", "resolved_lr"):
        if key not in config:
            raise ValueError(f"{path}: config echo lacks {key!r}")
    runs = []
    for r in rows[1:]:
        if len(r) != len(METRIC_COLUMNS):
            raise ValueError(f"{path}: malformed row {r}")
        if r[4] == SUMMARY_TAG:
            runs.append((int(r[1]), r[2], int(r[3]), int(r[5]), int(r[6])))
    if not runs:
        raise ValueError(f"{path}: no summary row")
    return MetricsSummary(str(path), config, runs)


def aggregate(summaries):
    """Rows of (mode, lr, corruption, severity, n_runs, mean_error, std_error), table-ordered."""
    groups = {}
    for s in summaries:
        for seed, corruption, severity, n, n_wrong in s.runs:
            key = (s.config["mode"], float(s.config["resolved_lr"]), corruption, severity)
            groups.setdefault(key, []).append(n_wrong / n)
    rows = []
    for (mode, lr, corruption, severity), errs in groups.items():
        rows.append((mode, lr, corruption, severity, len(errs), float(np.mean(errs)), float(np.std(errs))))
    order = {m: i for i, m in enumerate(TABLE_ORDER)}
    rows.sort(key=lambda r: (r[2], r[3], order.get(r[0], len(order)), -r[1]))
    return rows


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _load_source_dataset(cfg: RunConfig):
    if cfg.source_dataset and Path(cfg.source_dataset).exists():
        return tio.loads_dataset(Path(cfg.source_dataset).read_bytes())
    ds = desk.source_dataset(cfg.desk())
    if cfg.source_dataset:
        tio.write_bytes(cfg.source_dataset, tio.dumps_dataset(ds))
    return ds


def cmd_pretrain(cfg: RunConfig):
    out = cfg.out or cfg.checkpoint
    ds = _load_source_dataset(cfg)
    model = desk.pretrained_model(cfg.desk(), ds)
    digest = tio.save_checkpoint(model, out)
    print(f"wrote {out} ({model.num_parameters()} parameters, hash {digest.hex()[:16]})")


def cmd_prepare(cfg: RunConfig):
    model, digest = tio.load_checkpoint(cfg.checkpoint)
    ds = _load_source_dataset(cfg)
    art = desk.prepare_artifacts(cfg.desk(), model, ds, digest)
    tio.write_bytes(cfg.penalty, tio.dumps_penalty(art.penalty, digest))
    tio.write_bytes(cfg.prototypes, tio.dumps_prototypes(art.bank, digest))
    if art.projector is not None:
        tio.write_bytes(cfg.projector, tio.dumps_projector(art.projector, digest))
    elif Path(cfg.projector).exists():
        Path(cfg.projector).unlink()  # stale projector from a deeper run would be picked up by adapt
    w = ", ".join(f"{n}={v:.3f}" for n, v in art.penalty.as_dict().items())
    print(f"wrote {cfg.penalty}, {cfg.prototypes}" + (f", {cfg.projector}" if art.projector else ""))
    print(f"penalty vector: {w}")


def load_artifacts(cfg: RunConfig, source_hash: bytes):
    from .adapt import Artifacts
    penalty, h1 = tio.loads_penalty(Path(cfg.penalty).read_bytes())
    bank, h2 = tio.loads_prototypes(Path(cfg.prototypes).read_bytes())
    projector = None
    hashes = [h1, h2]
    if Path(cfg.projector).exists():
        projector, h3 = tio.loads_projector(Path(cfg.projector).read_bytes())
        hashes.append(h3)
    for h in hashes:
        if h != source_hash:
            raise tio.HashMismatch(f"artifact was prepared from checkpoint {h.hex()[:16]}, "
                                   f"not {source_hash.hex()[:16]}")
    return Artifacts(penalty, projector, bank, cfg.desk().transform_spec(), source_hash)


def cmd_adapt(cfg: RunConfig):
    model, digest = tio.load_checkpoint(cfg.checkpoint)
    art = load_artifacts(cfg, digest)
    acfg = cfg.adapt()
    stream = desk.make_stream(cfg.desk(), cfg.seed)
    rec: MetricsRecord = run_online_evaluation(model, art, stream, acfg, digest)
    run_id = cfg.run_id or f"{acfg.mode}-lr{acfg.step_size:g}-s{cfg.seed}"
    out = cfg.out or f"{run_id}.csv"
    tio.write_bytes(out, metrics_csv([rec], cfg, run_id).encode("utf-8"))
    print(f"{run_id}: error {rec.error_rate:.4f} ({rec.n_wrong}/{rec.n}), aborted steps {rec.n_aborted}; "
          f"wrote {out}")


def cmd_report(paths, out=None):
    summaries = [read_metrics(p) for p in paths]
    rows = aggregate(summaries)
    header = ("mode", "lr", "corruption", "severity", "runs", "mean_error", "std_error")
    lines = [f"{'mode':<18} {'lr':>8} {'corruption':<16} {'sev':>3} {'runs':>4} {'error':>15}"]
    for mode, lr, corruption, severity, n, m, s in rows:
        lines.append(f"{mode:<18} {lr:>8.3g} {corruption:<16} {severity:>3} {n:>4} {m * 100:>7.2f} ± {s * 100:5.2f}")
    print("\n".join(lines))
    if out:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([r[0], repr(r[1]), r[2], r[3], r[4], repr(r[5]), repr(r[6])])
        tio.write_bytes(out, buf.getvalue().encode("utf-8"))
    return rows


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_run_flags(p):
    p.add_argument("--config", help="flat key=value config file")
    for name, f in _FIELDS.items():
        flags = [f"--{name.replace('_', '-')}"]
        if "_" in name:
            flags.append(f"--{name}")
        p.add_argument(*flags, dest=name, default=None, metavar=name.upper())


def build_parser():
    parser = _Parser(prog="ttalab", description="Desk-scale test-time adaptation with SWR and NSP.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, help_ in (("pretrain", "train the source model and write a checkpoint"),
                        ("prepare", "compute penalty vector, projector and prototypes"),
                        ("adapt", "run online test-time adaptation on a corrupted stream")):
        _add_run_flags(sub.add_parser(name, help=help_))
    rep = sub.add_parser("report", help="aggregate metrics files")
    rep.add_argument("metrics", nargs="*")
    rep.add_argument("--out", default=None, help="also write the table as CSV")
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            raise UsageError("a subcommand is required: pretrain, prepare, adapt or report")
        if args.command == "report":
            if not args.metrics:
                raise UsageError("report needs at least one metrics file")
            cmd_report(args.metrics, args.out)
            return 0
        overrides = {k: v for k, v in vars(args).items() if k in _FIELDS and v is not None}
        cfg = resolve_config(args.config, overrides)
        {"pretrain": cmd_pretrain, "prepare": cmd_prepare, "adapt": cmd_adapt}[args.command](cfg)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
