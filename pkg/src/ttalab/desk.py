"""The standard desk-scale experiment: data, source model, pre-deployment artifacts, target streams."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import datagen as dg
from .adapt import Artifacts, pretrain_source
from .nsp import train_projector_and_prototypes
from .swr import SwrVariant, compute_penalty_vector
from .tensorcore import Model, build_cnn, build_mlp

TRANSFORMS = {
    "default": dg.default_transform,
    "crop_flip": dg.crop_flip_transform,
    "identity": dg.identity_transform,
}


@dataclass(frozen=True)
class DeskConfig:
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
    # target side
    target_n_per_class: int = 100
    corruption: str = "gaussian_noise"
    severity: int = 5
    stream_batch_size: int = 50

    def variant(self) -> SwrVariant:
        return SwrVariant.parse(self.swr_variant)

    def transform_spec(self) -> dg.TransformSpec:
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}; expected one of {sorted(TRANSFORMS)}")
        return TRANSFORMS[self.transform]()

    def with_(self, **kw) -> "DeskConfig":
        return replace(self, **kw)


def source_dataset(cfg: DeskConfig) -> dg.Dataset:
    return dg.generate_source_dataset(cfg.seed, cfg.n_per_class, cfg.num_classes, cfg.image_size)


def build_model(cfg: DeskConfig) -> Model:
    if cfg.arch == "cnn":
        return build_cnn(cfg.num_classes, image_size=cfg.image_size, hidden=cfg.hidden, seed=cfg.seed)
    if cfg.arch == "mlp":
        return build_mlp(cfg.num_classes, 3 * cfg.image_size ** 2, seed=cfg.seed)
    raise ValueError(f"unknown arch {cfg.arch!r}")


def pretrained_model(cfg: DeskConfig, dataset=None) -> Model:
    dataset = dataset if dataset is not None else source_dataset(cfg)
    model = build_model(cfg)
    pretrain_source(model, dataset, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.seed, cfg.batch_size)
    return model


def prepare_artifacts(cfg: DeskConfig, model: Model, dataset=None, source_hash=None) -> Artifacts:
    """Penalty vector, projector and prototype bank, all from the frozen source model."""
    dataset = dataset if dataset is not None else source_dataset(cfg)
    transform = cfg.transform_spec()
    penalty = compute_penalty_vector(model, dataset.images, dataset.labels, transform,
                                     min(cfg.n_samples, len(dataset)), cfg.variant(), cfg.seed)
    projector, bank, _ = train_projector_and_prototypes(
        model, dataset, transform, epochs=cfg.projector_epochs, seed=cfg.seed, depth=cfg.projector_depth,
        width=cfg.projector_width, hidden=cfg.projector_hidden or None, lr=cfg.projector_lr,
        batch_size=cfg.batch_size * 2, source_kind=cfg.prototype_source)
    return Artifacts(penalty, projector if cfg.projector_depth else None, bank, transform, source_hash)


def target_dataset(cfg: DeskConfig, stream_seed: int) -> dg.Dataset:
    """Fresh clean examples for a stream; disjoint seed space from the source set."""
    return dg.generate_source_dataset(10_000 + stream_seed, cfg.target_n_per_class, cfg.num_classes,
                                      cfg.image_size)


def make_stream(cfg: DeskConfig, stream_seed: int) -> dg.TargetStream:
    spec = dg.CorruptionSpec(cfg.corruption, cfg.severity)
    return dg.make_target_stream(target_dataset(cfg, stream_seed), spec, stream_seed, cfg.stream_batch_size)


def stream_factory(cfg: DeskConfig):
    return lambda s: make_stream(cfg, s)


def source_errors(model: Model, cfg: DeskConfig, seeds, bn_mode="batch") -> list:
    """Per-seed error of the unadapted model on the same streams the adaptation runs see."""
    errs = []
    saved = model.bn_mode
    model.bn_mode = bn_mode
    try:
        for s in seeds:
            st = make_stream(cfg, s)
            wrong = n = 0
            for b in st:
                pred = model.forward(b.images, mode="eval").data.argmax(1)
                wrong += int(np.sum(pred != st.oracle(b.keys)))
                n += len(pred)
            errs.append(wrong / n)
    finally:
        model.bn_mode = saved
    return errs


def source_error(model: Model, cfg: DeskConfig, seeds, bn_mode="batch") -> float:
    return float(np.mean(source_errors(model, cfg, seeds, bn_mode)))
