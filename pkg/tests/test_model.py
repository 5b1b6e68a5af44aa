import numpy as np
import pytest

from pah import autodiff as ad
from pah.autodiff import ShapeError, Tensor
from pah.datasets import TaskDataset
from pah.model import (HeadParams, ModelDims, PahModel, UnknownTaskError, backbone_forward,
                       build_task_embedding, generate_head, head_forward, hypernet_forward,
                       init_prototype_random, init_prototype_semantic, model_forward, snapshot)


def test_embedding_dim_arithmetic():
    assert ModelDims(3, 32, 32, num_classes=10, proto_h=10, proto_w=10).embedding_dim == 3000
    assert ModelDims(3, 32, 32, num_classes=10, feature_dim=64).head_dim == 650


def test_embedding_is_flat_concatenation():
    dims = ModelDims(1, 4, 4, num_classes=2, proto_h=2, proto_w=2)
    model = PahModel.create(dims, np.random.default_rng(0))
    model.register_task(1, [np.array([[[1.0, 2.0], [3.0, 4.0]]]), np.array([[[5.0, 6.0], [7.0, 8.0]]])])
    assert build_task_embedding(model.prototypes, 1).data.tolist() == [1, 2, 3, 4, 5, 6, 7, 8]


def test_embedding_locality():
    dims = ModelDims(2, 4, 4, num_classes=4, proto_h=2, proto_w=3)
    model = PahModel.create(dims, np.random.default_rng(0))
    model.register_task(1, [np.zeros((2, 2, 3)) for _ in range(4)])
    before = build_task_embedding(model.prototypes, 1).data.copy()
    model.prototypes.get(1)[3].values.data += 1.0
    changed = np.flatnonzero(build_task_embedding(model.prototypes, 1).data != before)
    size = dims.proto_size
    assert changed.tolist() == list(range(3 * size, 4 * size))


def test_backbone_zero_map_and_row_independence(small_model):
    x = np.random.default_rng(0).normal(size=(1, 1, 6, 6))
    batch = np.repeat(x, 4, axis=0)
    out1 = backbone_forward(small_model, x).data
    out4 = backbone_forward(small_model, batch).data
    for row in out4:
        np.testing.assert_allclose(row, out1[0], atol=1e-12)
    for p in small_model.backbone.parameters():
        p.data = np.zeros_like(p.data)
    assert np.all(backbone_forward(small_model, batch).data == 0)


def test_backbone_shape_error(small_model):
    with pytest.raises(ShapeError):
        backbone_forward(small_model, np.zeros((2, 1, 5, 6)))


def test_head_forward_cases():
    f = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    zero = head_forward(f, HeadParams(Tensor(np.zeros((2, 4))), Tensor(np.zeros(2))))
    assert np.all(zero.data == 0)
    ident = head_forward(f, HeadParams(Tensor(np.eye(4)), Tensor(np.zeros(4))))
    np.testing.assert_array_equal(ident.data, f.data)


def test_hypernet_deterministic_and_shaped(small_model):
    e = build_task_embedding(small_model.prototypes, 1)
    h1, h2 = hypernet_forward(small_model, e), hypernet_forward(small_model, Tensor(e.data.copy()))
    assert h1.W.shape == (2, 5) and h1.b.shape == (2,)
    np.testing.assert_array_equal(h1.W.data, h2.W.data)
    with pytest.raises(ShapeError):
        hypernet_forward(small_model, Tensor(np.zeros(3)))


def test_forward_is_composition(small_model):
    x = np.random.default_rng(2).normal(size=(3, 1, 6, 6))
    manual = head_forward(backbone_forward(small_model, x), generate_head(small_model, 1))
    np.testing.assert_array_equal(model_forward(small_model, x, 1).data, manual.data)


def test_tasks_give_different_logits(small_model):
    rng = np.random.default_rng(5)
    small_model.register_task(2, [rng.normal(size=(1, 3, 3)) for _ in range(2)])
    x = rng.normal(size=(3, 1, 6, 6))
    assert not np.allclose(model_forward(small_model, x, 1).data, model_forward(small_model, x, 2).data)


def test_unknown_task(small_model):
    with pytest.raises(UnknownTaskError):
        model_forward(small_model, np.zeros((1, 1, 6, 6)), 7)


def test_prototype_gradient_path_is_nonzero(small_model):
    x = Tensor(np.random.default_rng(3).normal(size=(4, 1, 6, 6)))
    p = small_model.prototypes.get(1)[0].values
    err = ad.grad_check(lambda _t: ad.sum(model_forward(small_model, x, 1)), p)
    assert err < 1e-4
    with ad.ComputationTape() as tape:
        tape.backward(ad.sum(model_forward(small_model, x, 1)))
    assert np.abs(p.grad).max() > 0


def test_registration_rules(small_dims):
    model = PahModel.create(small_dims, np.random.default_rng(0))
    with pytest.raises(ValueError):
        model.register_task(2, [np.zeros((1, 3, 3))] * 2)
    with pytest.raises(ValueError):
        model.register_task(1, [np.zeros((1, 3, 3))])
    with pytest.raises(ValueError):
        model.register_task(1, [np.zeros((1, 2, 2))] * 2)
    model.register_task(1, [np.zeros((1, 3, 3))] * 2)
    with pytest.raises(ValueError):
        model.register_task(1, [np.zeros((1, 3, 3))] * 2)


def test_storage_has_no_heads(small_model):
    names = [p.name for p in small_model.parameters()]
    assert not any(n.startswith("head") for n in names)
    before = small_model.num_parameters()
    small_model.register_task(2, [np.zeros((1, 3, 3))] * 2)
    assert small_model.num_parameters() - before == 2 * 9


def test_snapshot_copy_and_isolation(small_model):
    x = np.random.default_rng(4).normal(size=(3, 1, 6, 6))
    frozen = snapshot(small_model)
    ref = model_forward(frozen, x, 1).data.copy()
    np.testing.assert_array_equal(ref, model_forward(small_model, x, 1).data)
    for _ in range(100):
        for p in small_model.parameters():
            p.data += 0.01
    np.testing.assert_array_equal(model_forward(frozen, x, 1).data, ref)
    assert all(not p.requires_grad for p in frozen.parameters())
    with pytest.raises(ValueError):
        frozen.backbone.W1.data[0, 0] = 1.0


def test_snapshot_never_receives_gradients(small_model):
    frozen = snapshot(small_model)
    x = Tensor(np.random.default_rng(6).normal(size=(2, 1, 6, 6)))
    with ad.ComputationTape() as tape:
        loss = ad.sum(model_forward(small_model, x, 1)) + ad.sum(model_forward(frozen, x, 1))
        tape.backward(loss)
    assert all(p.grad is None for p in frozen.parameters())


def _dataset_with(img):
    imgs = np.stack([img, img])
    labels = np.array([0, 1])
    return TaskDataset(1, [0, 1], imgs, labels, imgs, labels, (np.zeros(img.shape[0]), np.ones(img.shape[0])))


def test_semantic_init_constant_image():
    data = _dataset_with(np.full((2, 8, 8), 0.7))
    stats = (np.array([0.5, 0.1]), np.array([0.2, 0.3]))
    proto = init_prototype_semantic(data, 0, np.random.default_rng(0), (4, 4), stats)
    np.testing.assert_allclose(proto[0], (0.7 - 0.5) / 0.2)
    np.testing.assert_allclose(proto[1], (0.7 - 0.1) / 0.3)


def test_semantic_init_block_means():
    img = np.random.default_rng(0).uniform(size=(1, 20, 20))
    data = _dataset_with(img)
    proto = init_prototype_semantic(data, 1, np.random.default_rng(0), (10, 10))
    blocks = img.reshape(1, 10, 2, 10, 2).mean(axis=(2, 4))
    np.testing.assert_allclose(proto, blocks, atol=1e-6)


def test_semantic_init_deterministic_and_empty_class():
    rng_img = np.random.default_rng(1)
    imgs = rng_img.uniform(size=(6, 1, 8, 8))
    labels = np.array([0, 0, 0, 1, 1, 1])
    data = TaskDataset(1, [0, 1, 2], imgs, labels, imgs, labels, (np.zeros(1), np.ones(1)))
    a = init_prototype_semantic(data, 0, np.random.default_rng(9), (4, 4))
    b = init_prototype_semantic(data, 0, np.random.default_rng(9), (4, 4))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        init_prototype_semantic(data, 2, np.random.default_rng(0), (4, 4))


def test_random_init_statistics():
    a = init_prototype_random((100, 100), np.random.default_rng(0), 0.1)
    np.testing.assert_array_equal(a, init_prototype_random((100, 100), np.random.default_rng(0), 0.1))
    assert abs(a.mean()) < 0.01
    assert abs(a.std() - 0.1) < 0.01
