"""Config-driven construction of tasks, models and complete runs."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .baselines import run_stored_head_sequence
from .config import RunConfig, config_to_dict
from .datasets import SplitSpec, ingest_image_archive, make_synthetic_tasks, split_dataset
from .metrics import AccuracyMatrix, summarize
from .model import ModelDims, PahModel
from .trainer import FreezeAudit, TrainSettings, TrainState, run_sequence


def _streams(seed: int):
    data_ss, model_ss, train_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(data_ss), np.random.default_rng(model_ss),
            np.random.default_rng(train_ss))


def build_tasks(cfg: RunConfig):
    d = cfg.data
    if d.source == "synthetic":
        rng = np.random.default_rng(np.random.SeedSequence([d.split_seed, 7919]))
        return make_synthetic_tasks(d.num_tasks, d.classes_per_task, d.samples_per_class,
                                    (d.channels, d.height, d.width), rng, d.noise,
                                    d.test_samples_per_class, d.template_grid)
    source = ingest_image_archive(d.archive, d.manifest)
    return split_dataset(source, SplitSpec(d.num_tasks, d.classes_per_task, d.split_seed, d.archive))


def model_dims(cfg: RunConfig, tasks) -> ModelDims:
    ch, H, W = tasks[0].train_images.shape[1:]
    m = cfg.model
    return ModelDims(channels=ch, height=H, width=W, num_classes=tasks[0].num_classes,
                     hidden=m.hidden, feature_dim=m.feature_dim, hyper_hidden=m.hyper_hidden,
                     proto_h=m.proto_h, proto_w=m.proto_w)


def train_settings(cfg: RunConfig) -> TrainSettings:
    o = cfg.optim
    return TrainSettings(epochs=cfg.epochs, batch_size=cfg.batch_size, weights=cfg.loss,
                         optimizer=o.kind, lr=o.lr, proto_lr=o.proto_lr, betas=(o.beta1, o.beta2),
                         eps=o.eps, init=cfg.model.init, proto_std=cfg.model.proto_std)


@dataclass
class RunRecord:
    config: dict
    matrix: AccuracyMatrix
    AA: float
    FM: float
    FM_defined: bool
    wallclock_s: float
    history: list[dict] = field(default_factory=list)
    version: str = __version__

    def to_json(self) -> dict:
        arr = self.matrix.to_array()
        rows = [[None if np.isnan(v) else float(v) for v in row] for row in arr]
        return {"version": self.version, "config": self.config, "matrix": rows,
                "AA": self.AA, "FM": self.FM, "FM_defined": self.FM_defined,
                "wallclock_s": self.wallclock_s, "history": self.history}


def run_pah(cfg: RunConfig, tasks=None, audit: FreezeAudit | None = None,
            on_event=None) -> tuple[RunRecord, TrainState]:
    cfg.validate()
    t0 = time.perf_counter()
    tasks = build_tasks(cfg) if tasks is None else tasks
    _, model_rng, train_rng = _streams(cfg.seed)
    dtype = np.dtype(cfg.dtype)
    model = PahModel.create(model_dims(cfg, tasks), model_rng, dtype)
    state = run_sequence(tasks, model, train_settings(cfg), train_rng, audit, on_event)
    s = summarize(state.matrix)
    record = RunRecord(config_to_dict(cfg), state.matrix, s["AA"], s["FM"], s["FM_defined"],
                       time.perf_counter() - t0, state.history)
    return record, state


def run_naive(cfg: RunConfig, tasks=None) -> AccuracyMatrix:
    """Fine-tuning with per-task stored heads and no distillation, same budget as ``run_pah``."""
    tasks = build_tasks(cfg) if tasks is None else tasks
    _, model_rng, _ = _streams(cfg.seed)
    return run_stored_head_sequence(tasks, model_dims(cfg, tasks), train_settings(cfg),
                                    model_rng, np.dtype(cfg.dtype))
