"""Cross-entropy, the two distillation terms and the weighted total objective.

All distillation terms use ``KL(old || new)`` with the old side detached.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossWeights:
    """``stability`` scales both distillation terms; ``w_sp`` additionally scales L_sp."""

    stability: float = 0.5
    w_sp: float = 1.0
    temperature: float = 1.0
    lsp_old_inputs: str = "live"  # live | snapshot

    def __post_init__(self):
        if self.stability < 0 or self.w_sp < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def lambda_sm(self) -> float:
        return self.stability

    @property
    def lambda_sp(self) -> float:
        return self.stability * self.w_sp


def hard_loss_main(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``logits`` against integer ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, C = logits.shape
    if labels.shape != (n,):
        raise ad.ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    onehot = np.zeros((n, C), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    picked = ad.sum(ad.mul(ad.log_softmax(logits), Tensor(onehot, dtype=logits.dtype)), axis=1)
    return ad.scale(ad.mean(picked), -1.0)


def _old_distribution(old_logits, temperature: float) -> tuple[np.ndarray, np.ndarray]:
    z = (old_logits.data if isinstance(old_logits, Tensor) else np.asarray(old_logits)) / temperature
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return np.exp(logp), logp


def kl_distill(old_logits, new_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Batch mean of ``KL(softmax(old/T) || softmax(new/T))``; no gradient reaches ``old_logits``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    old_shape = old_logits.shape
    if tuple(old_shape) != new_logits.shape:
        raise ad.ShapeError(f"kl_distill: old {tuple(old_shape)} vs new {new_logits.shape}")
    p, logp = _old_distribution(old_logits, temperature)
    p = p.astype(new_logits.dtype)
    # sum_c p_c log p_c is constant wrt the new logits
    entropy_term = float((p * logp).sum(axis=1).mean())
    new_lsm = ad.log_softmax(new_logits if temperature == 1.0 else ad.scale(new_logits, 1.0 / temperature))
    cross = ad.mean(ad.sum(ad.mul(new_lsm, Tensor(p, dtype=new_logits.dtype)), axis=1))
    return ad.sub(entropy_term, cross)


def soft_loss_main(old, new, x, k: int, temperature: float = 1.0) -> Tensor:
    """Average over past tasks ``j < k`` of KL between old and new outputs on current-task inputs."""
    from .model import backbone_forward, generate_head, head_forward

    if k < 1:
        raise ValueError("task ids start at 1")
    if k == 1:
        return Tensor(0.0, dtype=new.dtype)
    for j in range(1, k):
        if j not in old.prototypes:
            from .model import UnknownTaskError
            raise UnknownTaskError(f"old model has no task {j}")
    with ad.no_grad():
        old_feats = backbone_forward(old, x)
        old_logits = [head_forward(old_feats, generate_head(old, j)).data for j in range(1, k)]
    new_feats = backbone_forward(new, x)
    terms = [kl_distill(old_logits[j - 1], head_forward(new_feats, generate_head(new, j)), temperature)
             for j in range(1, k)]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / (k - 1))


def prototype_targets(old, new, j: int, temperature: float = 1.0, old_inputs: str = "live") -> np.ndarray:
    """Frozen-model logits for task ``j``'s prototypes; the fixed side of the prototype KL."""
    from .model import backbone_forward, embedding_from, head_forward, hypernet_forward, prototype_inputs

    if old_inputs == "live":
        protos = [t.detach() for t in new.prototypes.tensors(j)]
    elif old_inputs == "snapshot":
        protos = old.prototypes.tensors(j)
    else:
        raise ValueError(f"unknown old_inputs mode {old_inputs!r}")
    with ad.no_grad():
        return head_forward(backbone_forward(old, prototype_inputs(old, protos)),
                            hypernet_forward(old, embedding_from(protos))).data


def prototype_task_kl(old_logits: np.ndarray, new, j: int, temperature: float = 1.0) -> Tensor:
    """Sum over the classes of task ``j`` of ``KL(old(p_j^c | j) || new(p_j^c | j))``."""
    from .model import backbone_forward, embedding_from, head_forward, hypernet_forward, prototype_inputs

    live = new.prototypes.tensors(j)
    new_logits = head_forward(backbone_forward(new, prototype_inputs(new, live)),
                              hypernet_forward(new, embedding_from(live)))
    return ad.scale(kl_distill(old_logits, new_logits, temperature), float(len(live)))


def soft_loss_prototypes(old, new, k: int, temperature: float = 1.0, old_inputs: str = "live",
                         targets: dict[int, np.ndarray] | None = None) -> Tensor:
    """Average over past tasks of the per-task prototype KL sums.

    ``targets`` maps task id to precomputed frozen-model logits; by default
    they are computed from the current prototype values (``old_inputs="live"``)
    or from the snapshot's own prototypes (``"snapshot"``).
    """
    from .model import UnknownTaskError

    if k < 1:
        raise ValueError("task ids start at 1")
    if k == 1:
        return Tensor(0.0, dtype=new.dtype)
    total = None
    for j in range(1, k):
        if j not in old.prototypes or j not in new.prototypes:
            raise UnknownTaskError(f"prototypes for task {j} are missing")
        target = targets[j] if targets is not None else prototype_targets(old, new, j, temperature, old_inputs)
        term = prototype_task_kl(target, new, j, temperature)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / (k - 1))


def total_loss(l_hm, l_sm, l_sp, w: LossWeights):
    """``l_hm + stability * l_sm + stability * w_sp * l_sp``; works on tensors or floats."""
    if not any(isinstance(v, Tensor) for v in (l_hm, l_sm, l_sp)):
        return l_hm + w.lambda_sm * l_sm + w.lambda_sp * l_sp
    out = l_hm if isinstance(l_hm, Tensor) else Tensor(l_hm)
    for term, lam in ((l_sm, w.lambda_sm), (l_sp, w.lambda_sp)):
        term = term if isinstance(term, Tensor) else Tensor(term, dtype=out.dtype)
        out = ad.add(out, ad.scale(term, lam))
    return out
