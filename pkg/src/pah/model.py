"""Backbone, hypernetwork and learnable prototypes composed into per-task classifiers.

No classifier head is ever stored. For task ``k`` the head is regenerated
by feeding the flattened prototypes of that task through the hypernetwork,
so the only per-task state is the prototype set itself.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class UnknownTaskError(KeyError):
    pass


@dataclass(frozen=True)
class ModelDims:
    channels: int
    height: int
    width: int
    num_classes: int
    hidden: int = 256
    feature_dim: int = 64
    hyper_hidden: int = 128
    proto_h: int = 10
    proto_w: int = 10

    @property
    def input_dim(self) -> int:
        return self.channels * self.height * self.width

    @property
    def proto_size(self) -> int:
        return self.channels * self.proto_h * self.proto_w

    @property
    def embedding_dim(self) -> int:
        return self.num_classes * self.proto_size

    @property
    def head_dim(self) -> int:
        return self.num_classes * (self.feature_dim + 1)


@dataclass
class HeadParams:
    W: Tensor  # [C, d]
    b: Tensor  # [C]


@dataclass
class Prototype:
    values: Tensor
    task_id: int
    class_id: int


class Backbone:
    """Two-layer relu MLP from flattened images to ``feature_dim`` features."""

    def __init__(self, dims: ModelDims, rng: np.random.Generator, dtype=np.float64):
        d_in, h, d = dims.input_dim, dims.hidden, dims.feature_dim
        self.W1 = Tensor(rng.normal(0, np.sqrt(2.0 / d_in), (d_in, h)), True, dtype, "backbone.W1")
        self.b1 = Tensor(np.zeros(h), True, dtype, "backbone.b1")
        self.W2 = Tensor(rng.normal(0, np.sqrt(2.0 / h), (h, d)), True, dtype, "backbone.W2")
        self.b2 = Tensor(np.zeros(d), True, dtype, "backbone.b2")

    def parameters(self) -> list[Tensor]:
        return [self.W1, self.b1, self.W2, self.b2]

    def __call__(self, x: Tensor) -> Tensor:
        flat = ad.reshape(x, (x.shape[0], -1))
        hidden = ad.relu(flat @ self.W1 + self.b1)
        return ad.relu(hidden @ self.W2 + self.b2)


class Hypernetwork:
    """Maps a task embedding to the flat parameter vector of a linear head.

    The output layer has no bias: a bias would be a task-independent head
    component shared by every task and overwritten by each new one.
    """

    def __init__(self, dims: ModelDims, rng: np.random.Generator, dtype=np.float64):
        E, h, out = dims.embedding_dim, dims.hyper_hidden, dims.head_dim
        self.V1 = Tensor(rng.normal(0, np.sqrt(2.0 / E), (E, h)), True, dtype, "hypernet.V1")
        self.c1 = Tensor(np.zeros(h), True, dtype, "hypernet.c1")
        # small output weights keep the first generated heads near zero
        self.V2 = Tensor(rng.normal(0, 0.01, (h, out)), True, dtype, "hypernet.V2")

    def parameters(self) -> list[Tensor]:
        return [self.V1, self.c1, self.V2]

    def __call__(self, e: Tensor) -> Tensor:
        row = ad.reshape(e, (1, -1))
        hidden = ad.relu(row @ self.V1 + self.c1)
        return ad.reshape(hidden @ self.V2, (-1,))


class PrototypeBank:
    """Per-task, per-class prototypes in stable class order."""

    def __init__(self, num_classes: int, shape: tuple[int, int, int]):
        self.num_classes = num_classes
        self.shape = tuple(shape)
        self._tasks: dict[int, list[Prototype]] = {}

    def __contains__(self, task_id: int) -> bool:
        return task_id in self._tasks

    def __len__(self) -> int:
        return len(self._tasks)

    @property
    def task_ids(self) -> list[int]:
        return sorted(self._tasks)

    def register(self, task_id: int, protos: list[Prototype]) -> None:
        if task_id in self._tasks:
            raise ValueError(f"task {task_id} already has prototypes")
        expected = len(self._tasks) + 1
        if task_id != expected:
            raise ValueError(f"task ids must be contiguous from 1; expected {expected}, got {task_id}")
        if len(protos) != self.num_classes:
            raise ValueError(f"task {task_id}: need {self.num_classes} prototypes, got {len(protos)}")
        protos = sorted(protos, key=lambda p: p.class_id)
        for c, p in enumerate(protos):
            if p.class_id != c:
                raise ValueError(f"task {task_id}: class ids must be 0..C-1")
            if p.values.shape != self.shape:
                raise ValueError(f"prototype shape {p.values.shape} != configured {self.shape}")
            p.task_id = task_id
        self._tasks[task_id] = protos

    def get(self, task_id: int) -> list[Prototype]:
        try:
            return self._tasks[task_id]
        except KeyError:
            raise UnknownTaskError(f"no prototypes registered for task {task_id}") from None

    def tensors(self, task_id: int) -> list[Tensor]:
        return [p.values for p in self.get(task_id)]

    def parameters(self, task_ids=None) -> list[Tensor]:
        ids = self.task_ids if task_ids is None else task_ids
        return [t for k in ids for t in self.tensors(k)]

    def num_parameters(self) -> int:
        return len(self) * self.num_classes * int(np.prod(self.shape))


@dataclass
class PahModel:
    dims: ModelDims
    backbone: Backbone
    hypernet: Hypernetwork
    prototypes: PrototypeBank
    frozen: bool = field(default=False)

    @classmethod
    def create(cls, dims: ModelDims, rng: np.random.Generator, dtype=np.float64) -> "PahModel":
        return cls(
            dims=dims,
            backbone=Backbone(dims, rng, dtype),
            hypernet=Hypernetwork(dims, rng, dtype),
            prototypes=PrototypeBank(dims.num_classes, (dims.channels, dims.proto_h, dims.proto_w)),
        )

    @property
    def dtype(self):
        return self.backbone.W1.dtype

    def network_parameters(self) -> list[Tensor]:
        return self.backbone.parameters() + self.hypernet.parameters()

    def parameters(self) -> list[Tensor]:
        return self.network_parameters() + self.prototypes.parameters()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def register_task(self, task_id: int, values: list[np.ndarray]) -> None:
        protos = [
            Prototype(Tensor(v, requires_grad=not self.frozen, dtype=self.dtype, name=f"proto.{task_id}.{c}"), task_id, c)
            for c, v in enumerate(values)
        ]
        self.prototypes.register(task_id, protos)


class FrozenModel(PahModel):
    """An immutable copy of a model; forward passes never record gradients."""


def snapshot(model: PahModel) -> FrozenModel:
    """Deep copy with every parameter marked non-learnable."""
    dup = copy.deepcopy(model)
    for p in dup.parameters():
        p.requires_grad = False
        p.grad = None
        p.data.setflags(write=False)
    return FrozenModel(dims=dup.dims, backbone=dup.backbone, hypernet=dup.hypernet,
                       prototypes=dup.prototypes, frozen=True)


def _as_input(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def backbone_forward(model: PahModel, x) -> Tensor:
    x = _as_input(x, model.dtype)
    d = model.dims
    if x.ndim != 4 or x.shape[1:] != (d.channels, d.height, d.width):
        raise ad.ShapeError(
            f"backbone expects [batch, {d.channels}, {d.height}, {d.width}], got {x.shape}")
    return model.backbone(x)


def build_task_embedding(bank: PrototypeBank, k: int) -> Tensor:
    """Flatten and concatenate the task's prototypes in class order."""
    return ad.concat([ad.reshape(t, (-1,)) for t in bank.tensors(k)])


def embedding_from(tensors: list[Tensor]) -> Tensor:
    return ad.concat([ad.reshape(t, (-1,)) for t in tensors])


def hypernet_forward(model: PahModel, e_k: Tensor) -> HeadParams:
    d = model.dims
    if e_k.shape != (d.embedding_dim,):
        raise ad.ShapeError(f"embedding must have shape ({d.embedding_dim},), got {e_k.shape}")
    flat = model.hypernet(e_k)
    C, fd = d.num_classes, d.feature_dim
    W = ad.reshape(ad.narrow(flat, 0, C * fd), (C, fd))
    b = ad.narrow(flat, C * fd, C * (fd + 1))
    return HeadParams(W, b)


def head_forward(features: Tensor, head: HeadParams) -> Tensor:
    if features.ndim != 2 or features.shape[1] != head.W.shape[1]:
        raise ad.ShapeError(f"head_forward: features {features.shape} vs weights {head.W.shape}")
    return features @ ad.transpose(head.W) + head.b


def generate_head(model: PahModel, k: int) -> HeadParams:
    return hypernet_forward(model, build_task_embedding(model.prototypes, k))


def model_forward(model: PahModel, x, k: int) -> Tensor:
    """Logits of task ``k``'s regenerated head on input ``x``."""
    if model.frozen:
        with ad.no_grad():
            return head_forward(backbone_forward(model, x), generate_head(model, k))
    return head_forward(backbone_forward(model, x), generate_head(model, k))


def prototype_inputs(model: PahModel, protos: list[Tensor]) -> Tensor:
    """Stack a task's prototypes and upsample them to the backbone's input size."""
    d = model.dims
    return ad.resize_bilinear(ad.stack(protos), d.height, d.width)


def init_prototype_semantic(dataset, class_id: int, rng: np.random.Generator,
                            shape: tuple[int, int], stats=None) -> np.ndarray:
    """A random training image of ``class_id``, resized to ``shape`` and standardized."""
    from .datasets import resize_bilinear

    idx = np.flatnonzero(dataset.train_labels == class_id)
    if idx.size == 0:
        raise ValueError(f"class {class_id} has no training samples in task {dataset.task_id}")
    img = dataset.train_images[idx[rng.integers(idx.size)]]
    mean, std = stats if stats is not None else dataset.stats
    small = resize_bilinear(img, *shape)
    return (small - mean[:, None, None]) / std[:, None, None]


def init_prototype_random(shape: tuple[int, ...], rng: np.random.Generator, std: float = 0.1) -> np.ndarray:
    return rng.normal(0.0, std, shape)
