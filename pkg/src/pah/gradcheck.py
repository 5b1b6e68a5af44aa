"""Finite-difference battery over every primitive, every loss and a full PAH step."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .losses import (LossWeights, hard_loss_main, kl_distill, prototype_targets, soft_loss_main,
                     soft_loss_prototypes, total_loss)
from .model import ModelDims, PahModel, model_forward, snapshot

PRIMITIVE_TOL = 1e-5
END_TO_END_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


def _weighted(out: Tensor, R: np.ndarray) -> Tensor:
    return ad.sum(ad.mul(out, Tensor(R)))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _primitive_cases(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    """Each case returns the worst relative error over all differentiable inputs."""

    def check(op, *arrays):
        tensors = [Tensor(a) for a in arrays]
        out_shape = op(*tensors).shape
        R = rng.normal(size=out_shape)
        errs = []
        for t in tensors:
            errs.append(grad_check(lambda _x: _weighted(op(*tensors), R), t))
        return max(errs)

    n = lambda *s: rng.normal(size=s)  # noqa: E731
    return {
        "matmul": lambda: check(ad.matmul, n(3, 4), n(4, 2)),
        "add": lambda: max(check(ad.add, n(3, 4), n(3, 4)), check(ad.add, n(3, 4), n(4))),
        "sub": lambda: max(check(ad.sub, n(3, 4), n(3, 4)), check(ad.sub, n(3, 4), n(4))),
        "mul": lambda: max(check(ad.mul, n(3, 4), n(3, 4)), check(ad.mul, n(3, 4), n(4))),
        "scale": lambda: check(lambda x: ad.scale(x, -1.7), n(3, 4)),
        "relu": lambda: check(ad.relu, _away_from_zero(rng, (3, 4))),
        "exp": lambda: check(ad.exp, n(3, 4)),
        "log": lambda: check(ad.log, rng.uniform(0.5, 2.0, (3, 4))),
        "sum": lambda: max(check(ad.sum, n(3, 4)), check(lambda x: ad.sum(x, axis=1), n(3, 4))),
        "mean": lambda: max(check(ad.mean, n(3, 4)), check(lambda x: ad.mean(x, axis=0), n(3, 4))),
        "log_softmax": lambda: check(ad.log_softmax, n(4, 5)),
        "reshape": lambda: check(lambda x: ad.reshape(x, (6, 2)), n(3, 4)),
        "transpose": lambda: check(ad.transpose, n(3, 4)),
        "narrow": lambda: check(lambda x: ad.narrow(x, 1, 4), n(5, 2)),
        "concat": lambda: check(lambda a, b: ad.concat([a, b]), n(2, 3), n(4, 3)),
        "stack": lambda: check(lambda a, b: ad.stack([a, b]), n(2, 3), n(2, 3)),
        "resize_bilinear": lambda: max(check(lambda x: ad.resize_bilinear(x, 5, 7), n(2, 3, 4)),
                                       check(lambda x: ad.resize_bilinear(x, 2, 3), n(1, 5, 6))),
    }


def toy_setup(seed: int = 0, k: int = 2):
    """A tiny float64 PAH model with ``k`` registered tasks, a frozen copy and a batch."""
    rng = np.random.default_rng(seed)
    dims = ModelDims(channels=1, height=4, width=4, num_classes=2, hidden=6, feature_dim=3,
                     hyper_hidden=5, proto_h=2, proto_w=2)
    model = PahModel.create(dims, rng, np.float64)
    # larger output weights than the default init so every path carries signal
    model.hypernet.V2.data = rng.normal(0, 0.5, model.hypernet.V2.shape)
    model.hypernet.c1.data = rng.uniform(0.1, 0.5, model.hypernet.c1.shape)
    model.backbone.b1.data = rng.uniform(0.1, 0.5, model.backbone.b1.shape)
    model.backbone.b2.data = rng.uniform(0.1, 0.5, model.backbone.b2.shape)
    for j in range(1, k):
        model.register_task(j, [rng.normal(0, 1, (1, 2, 2)) for _ in range(2)])
    old = snapshot(model)
    for p in model.network_parameters():
        p.data = p.data + rng.normal(0, 0.1, p.shape)
    for t in model.prototypes.parameters():
        t.data = t.data + rng.normal(0, 0.1, t.shape)
    model.register_task(k, [rng.normal(0, 1, (1, 2, 2)) for _ in range(2)])
    x = Tensor(rng.normal(size=(4, 1, 4, 4)))
    y = np.array([0, 1, 1, 0])
    return model, old, x, y


def _worst_over(params, loss_fn) -> float:
    return max(grad_check(lambda _x: loss_fn(), p) for p in params)


def _loss_cases(seed: int = 0) -> dict[str, Callable[[], float]]:
    model, old, x, y = toy_setup(seed, k=2)
    rng = np.random.default_rng(seed + 1)
    w = LossWeights(stability=0.5, w_sp=1.0)
    k = 2

    # teacher logits are constants of the objective; fix them before perturbing
    targets = {j: prototype_targets(old, model, j) for j in range(1, k)}

    def full_step():
        l_hm = hard_loss_main(model_forward(model, x, k), y)
        l_sm = soft_loss_main(old, model, x, k)
        l_sp = soft_loss_prototypes(old, model, k, targets=targets)
        return total_loss(l_hm, l_sm, l_sp, w)

    def kl_case():
        old_logits = rng.normal(size=(4, 3))
        new = Tensor(rng.normal(size=(4, 3)))
        return max(grad_check(lambda t: kl_distill(old_logits, t), new),
                   grad_check(lambda t: kl_distill(old_logits, t, temperature=2.0), new))

    def total_case():
        a, b, c = (Tensor(rng.normal(size=())) for _ in range(3))
        return max(grad_check(lambda t: total_loss(t, b, c, w), a),
                   grad_check(lambda t: total_loss(a, t, c, w), b),
                   grad_check(lambda t: total_loss(a, b, t, w), c))

    params = model.parameters()
    return {
        "hard_loss_main": lambda: _worst_over(params, lambda: hard_loss_main(model_forward(model, x, k), y)),
        "kl_distill": kl_case,
        "soft_loss_main": lambda: _worst_over(params, lambda: soft_loss_main(old, model, x, k)),
        "soft_loss_prototypes": lambda: _worst_over(params, lambda: soft_loss_prototypes(old, model, k, targets=targets)),
        "total_loss": total_case,
        "pah_step": lambda: _worst_over(params, full_step),
    }


def run_battery(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    cases = _primitive_cases(rng)
    for name in ad.PRIMITIVES:
        results.append(CheckResult(name, cases[name](), PRIMITIVE_TOL))
    for name, fn in _loss_cases(seed).items():
        results.append(CheckResult(name, fn(), END_TO_END_TOL))
    return results
