"""Sequential task training with separate network and prototype update steps.

Each batch of task ``k`` runs two sub-steps:

* MAIN: cross-entropy plus distillation on the batch. Updates the backbone,
  the hypernetwork and the prototypes of task ``k``.
* PROTO (``k >= 2``): prototype distillation. Updates only the prototypes of
  tasks ``j < k``; backbone and hypernetwork are held fixed.

The split is enforced by toggling ``requires_grad`` so that forbidden
parameters never receive a gradient, and by giving each sub-step its own
optimizer over its own parameter set.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import LossWeights, hard_loss_main, soft_loss_main, soft_loss_prototypes, total_loss
from .metrics import AccuracyMatrix
from .model import (FrozenModel, ModelDims, PahModel, init_prototype_random, init_prototype_semantic,
                    model_forward, snapshot)

log = logging.getLogger(__name__)


class ProtocolError(RuntimeError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


class FreezeViolation(AssertionError):
    pass


# -- optimizers ---------------------------------------------------------------
class Optimizer:
    def __init__(self, params=(), lr: float = 1e-3):
        self.lr = lr
        self.params: list[Tensor] = []
        self.step_count = 0
        for p in params:
            self.add(p)

    def add(self, p: Tensor) -> None:
        if not any(q is p for q in self.params):
            self.params.append(p)

    def remove(self, p: Tensor) -> None:
        self.params = [q for q in self.params if q is not p]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        for p in self.params:
            if p.grad is not None:
                self._update(p)

    def _update(self, p: Tensor) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def _update(self, p):
        p.data -= (self.lr * p.grad).astype(p.dtype)


class Adam(Optimizer):
    def __init__(self, params=(), lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.betas, self.eps = betas, eps
        self.state: dict[int, list] = {}
        super().__init__(params, lr)

    def remove(self, p):
        super().remove(p)
        self.state.pop(id(p), None)

    def _update(self, p):
        b1, b2 = self.betas
        st = self.state.setdefault(id(p), [0, np.zeros_like(p.data), np.zeros_like(p.data)])
        st[0] += 1
        t, m, v = st
        m *= b1
        m += (1 - b1) * p.grad
        v *= b2
        v += (1 - b2) * p.grad * p.grad
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


def make_optimizer(kind: str, params, lr: float, betas=(0.9, 0.999), eps=1e-8) -> Optimizer:
    if kind == "adam":
        return Adam(params, lr, betas, eps)
    if kind == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}")


# -- auditing -----------------------------------------------------------------
def checksum(params) -> str:
    h = hashlib.blake2b(digest_size=16)
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


@dataclass
class FreezeAudit:
    """Checks the parameter-isolation contract of every sub-step."""

    main_steps: int = 0
    proto_steps: int = 0
    violations: list[str] = field(default_factory=list)
    strict: bool = True

    def fail(self, msg: str) -> None:
        self.violations.append(msg)
        if self.strict:
            raise FreezeViolation(msg)

    @property
    def steps(self) -> int:
        return self.main_steps + self.proto_steps


# -- training -----------------------------------------------------------------
@dataclass
class TrainSettings:
    epochs: int = 20
    batch_size: int = 32
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: str = "adam"
    lr: float = 1e-3
    proto_lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    init: str = "semantic"
    proto_std: float = 0.1


@dataclass
class TrainState:
    model: PahModel
    settings: TrainSettings
    rng: np.random.Generator
    frozen: FrozenModel | None = None
    matrix: AccuracyMatrix | None = None
    main_opt: Optimizer | None = None
    proto_opt: Optimizer | None = None
    step: int = 0
    trained_tasks: int = 0
    history: list[dict] = field(default_factory=list)
    reference_stats: tuple | None = None

    def __post_init__(self):
        s = self.settings
        if self.main_opt is None:
            self.main_opt = make_optimizer(s.optimizer, self.model.network_parameters(), s.lr, s.betas, s.eps)
        if self.proto_opt is None:
            self.proto_opt = make_optimizer(s.optimizer, [], s.proto_lr, s.betas, s.eps)


class _Trainable:
    """Temporarily restrict ``requires_grad`` to an allow-list of parameters."""

    def __init__(self, model: PahModel, allowed: list[Tensor]):
        self.params = model.parameters()
        self.allowed = {id(p) for p in allowed}

    def __enter__(self):
        self.saved = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = id(p) in self.allowed
            p.grad = None
        return self

    def __exit__(self, *exc):
        for p, flag in zip(self.params, self.saved):
            p.requires_grad = flag


def _check_grad_set(audit: FreezeAudit | None, forbidden: list[Tensor], step: int, phase: str) -> None:
    if audit is None:
        return
    leaked = [p.name or repr(p) for p in forbidden if p.grad is not None]
    if leaked:
        audit.fail(f"{phase} step {step}: gradient reached frozen parameters {leaked[:3]}")


def _init_prototypes(state: TrainState, k: int, data) -> list[np.ndarray]:
    d = state.model.dims
    shape = (d.proto_h, d.proto_w)
    if state.settings.init == "semantic":
        return [init_prototype_semantic(data, c, state.rng, shape, state.reference_stats or data.stats)
                for c in range(d.num_classes)]
    return [init_prototype_random((d.channels, *shape), state.rng, state.settings.proto_std)
            for c in range(d.num_classes)]


def train_task(state: TrainState, k: int, data, audit: FreezeAudit | None = None,
               on_event: Callable[[dict], None] | None = None) -> TrainState:
    """Train task ``k`` for the configured number of epochs."""
    model, s = state.model, state.settings
    if k != state.trained_tasks + 1:
        raise ProtocolError(f"expected task {state.trained_tasks + 1}, got {k}")
    if (state.frozen is not None) != (k >= 2):
        raise ProtocolError("a frozen snapshot must exist exactly when k >= 2")
    if data.num_classes != model.dims.num_classes:
        raise ProtocolError(f"task {k} has {data.num_classes} classes, model expects {model.dims.num_classes}")
    if state.reference_stats is None:
        state.reference_stats = data.stats

    model.register_task(k, _init_prototypes(state, k, data))
    current = model.prototypes.parameters([k])
    past = model.prototypes.parameters(list(range(1, k)))
    network = model.network_parameters()
    for p in past:
        state.main_opt.remove(p)
        state.proto_opt.add(p)
    for p in current:
        state.main_opt.add(p)

    x_all = data.normalized("train", state.reference_stats, model.dtype)
    y_all = data.train_labels
    n = len(y_all)
    w = s.weights

    for epoch in range(1, s.epochs + 1):
        order = state.rng.permutation(n)
        sums = np.zeros(4)
        batches = 0
        for start in range(0, n, s.batch_size):
            idx = order[start:start + s.batch_size]
            xb = Tensor(x_all[idx], dtype=model.dtype)
            yb = y_all[idx]
            state.step += 1

            # MAIN: backbone + hypernet + current prototypes
            before = checksum(past) if audit is not None else None
            with _Trainable(model, network + current), ad.ComputationTape() as tape:
                l_hm = hard_loss_main(model_forward(model, xb, k), yb)
                l_sm = soft_loss_main(state.frozen, model, xb, k, w.temperature) if k >= 2 else Tensor(0.0)
                main = total_loss(l_hm, l_sm, 0.0, w)
                if not np.isfinite(main.item()):
                    raise DivergenceError(state.step, "MAIN loss")
                tape.backward(main)
                _check_grad_set(audit, past, state.step, "MAIN")
                state.main_opt.step()
                state.main_opt.zero_grad()
            if audit is not None:
                audit.main_steps += 1
                if checksum(past) != before:
                    audit.fail(f"MAIN step {state.step}: past prototypes changed")

            # PROTO: only past prototypes
            l_sp_val = 0.0
            if k >= 2:
                before = checksum(network + current) if audit is not None else None
                with _Trainable(model, past), ad.ComputationTape() as tape:
                    l_sp = soft_loss_prototypes(state.frozen, model, k, w.temperature, w.lsp_old_inputs)
                    proto_loss = ad.scale(l_sp, w.lambda_sp)
                    l_sp_val = l_sp.item()
                    if not np.isfinite(l_sp_val):
                        raise DivergenceError(state.step, "PROTO loss")
                    tape.backward(proto_loss)
                    _check_grad_set(audit, network + current, state.step, "PROTO")
                    state.proto_opt.step()
                    state.proto_opt.zero_grad()
                if audit is not None:
                    audit.proto_steps += 1
                    if checksum(network + current) != before:
                        audit.fail(f"PROTO step {state.step}: backbone/hypernet/current prototypes changed")

            sums += [l_hm.item(), l_sm.item(), l_sp_val, main.item() + w.lambda_sp * l_sp_val]
            batches += 1

        means = sums / max(batches, 1)
        event = {"task": k, "epoch": epoch, "L_hm": means[0], "L_sm": means[1],
                 "L_sp": means[2], "total": means[3]}
        state.history.append(event)
        log.debug("task %d epoch %d: %s", k, epoch, event)
        if on_event is not None:
            on_event(event)

    state.trained_tasks = k
    return state


def evaluate(model: PahModel, j: int, data, stats=None, batch_size: int = 256) -> float:
    """Fraction of test samples whose argmax under task ``j``'s head equals the label."""
    x = data.normalized("test", stats, model.dtype)
    y = data.test_labels
    if len(y) == 0:
        return 0.0
    correct = 0
    with ad.no_grad():
        for start in range(0, len(y), batch_size):
            logits = model_forward(model, Tensor(x[start:start + batch_size], dtype=model.dtype), j)
            correct += int((logits.data.argmax(axis=1) == y[start:start + batch_size]).sum())
    return correct / len(y)


def run_sequence(tasks, model: PahModel, settings: TrainSettings, rng: np.random.Generator,
                 audit: FreezeAudit | None = None,
                 on_event: Callable[[dict], None] | None = None) -> TrainState:
    """Train every task in order, snapshotting and evaluating at each task boundary."""
    ids = [t.task_id for t in tasks]
    if ids != list(range(1, len(tasks) + 1)):
        raise ProtocolError(f"task ids must be 1..K in order, got {ids}")
    state = TrainState(model=model, settings=settings, rng=rng, matrix=AccuracyMatrix(len(tasks)))
    per_task = model.dims.proto_size * model.dims.num_classes
    for data in tasks:
        k = data.task_id
        before = model.num_parameters()
        train_task(state, k, data, audit, on_event)
        grown = model.num_parameters() - before
        if grown != per_task:
            raise ProtocolError(f"task {k} grew storage by {grown} parameters, expected {per_task}")
        state.frozen = snapshot(model)
        for j in range(1, k + 1):
            state.matrix.set(k, j, evaluate(state.frozen, j, tasks[j - 1], state.reference_stats))
        log.info("task %d done: row %s", k, np.round(state.matrix.row(k), 4).tolist())
    return state


def dims_for(tasks, hidden=256, feature_dim=64, hyper_hidden=128, proto_h=10, proto_w=10) -> ModelDims:
    ch, H, W = tasks[0].train_images.shape[1:]
    return ModelDims(channels=ch, height=H, width=W, num_classes=tasks[0].num_classes,
                     hidden=hidden, feature_dim=feature_dim, hyper_hidden=hyper_hidden,
                     proto_h=proto_h, proto_w=proto_w)
