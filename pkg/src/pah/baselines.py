"""Reference learners with directly parameterized, stored per-task heads.

``StoredHeadModel`` shares the PAH backbone architecture but keeps one
linear head per task. Trained with cross-entropy only, it is the naive
fine-tuning reference for forgetting, and on a single task it is the
direct-head counterpart of a hypernetwork-generated head.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import hard_loss_main
from .metrics import AccuracyMatrix
from .model import Backbone, ModelDims, UnknownTaskError
from .trainer import TrainSettings, make_optimizer


class StoredHeadModel:
    def __init__(self, dims: ModelDims, rng: np.random.Generator, dtype=np.float64):
        self.dims = dims
        self.backbone = Backbone(dims, rng, dtype)
        self.heads: dict[int, tuple[Tensor, Tensor]] = {}
        self._rng = rng

    @property
    def dtype(self):
        return self.backbone.W1.dtype

    def add_head(self, k: int) -> tuple[Tensor, Tensor]:
        C, d = self.dims.num_classes, self.dims.feature_dim
        W = Tensor(self._rng.normal(0, np.sqrt(1.0 / d), (C, d)), True, self.dtype, f"head.{k}.W")
        b = Tensor(np.zeros(C), True, self.dtype, f"head.{k}.b")
        self.heads[k] = (W, b)
        return W, b

    def forward(self, x: Tensor, k: int) -> Tensor:
        if k not in self.heads:
            raise UnknownTaskError(f"no head stored for task {k}")
        W, b = self.heads[k]
        return self.backbone(x) @ ad.transpose(W) + b

    def evaluate(self, k: int, data, stats=None) -> float:
        x = data.normalized("test", stats, self.dtype)
        with ad.no_grad():
            pred = self.forward(Tensor(x, dtype=self.dtype), k).data.argmax(axis=1)
        return float((pred == data.test_labels).mean())


def train_stored_head_task(model: StoredHeadModel, k: int, data, settings: TrainSettings,
                           rng: np.random.Generator, stats=None) -> None:
    """Cross-entropy fine-tuning of the backbone and task ``k``'s new head."""
    W, b = model.add_head(k)
    opt = make_optimizer(settings.optimizer, model.backbone.parameters() + [W, b],
                         settings.lr, settings.betas, settings.eps)
    x_all = data.normalized("train", stats, model.dtype)
    y_all = data.train_labels
    n = len(y_all)
    for _ in range(settings.epochs):
        order = rng.permutation(n)
        for start in range(0, n, settings.batch_size):
            idx = order[start:start + settings.batch_size]
            with ad.ComputationTape() as tape:
                loss = hard_loss_main(model.forward(Tensor(x_all[idx], dtype=model.dtype), k), y_all[idx])
                tape.backward(loss)
            opt.step()
            opt.zero_grad()
            # earlier heads are stored, not trained: drop any stray gradient
            for j, (Wj, bj) in model.heads.items():
                Wj.grad = bj.grad = None


def run_stored_head_sequence(tasks, dims: ModelDims, settings: TrainSettings,
                             rng: np.random.Generator, dtype=np.float64) -> AccuracyMatrix:
    model = StoredHeadModel(dims, rng, dtype)
    stats = tasks[0].stats
    R = AccuracyMatrix(len(tasks))
    for data in tasks:
        train_stored_head_task(model, data.task_id, data, settings, rng, stats)
        for j in range(1, data.task_id + 1):
            R.set(data.task_id, j, model.evaluate(j, tasks[j - 1], stats))
    return R
