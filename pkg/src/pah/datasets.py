"""Task splits, a separable synthetic generator and a small binary image archive.

Archive layout: a flat sequence of records, each ``[1-byte label][ch*H*W
uint8 pixels, row-major]``, train records first and then test records. A
manifest (``key = value`` lines) declares ``channels``, ``height``,
``width``, ``classes`` (comma separated names), ``train_records`` and
``test_records``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import interpolation_matrix

STD_EPS = 1e-6


class ArchiveError(ValueError):
    pass


@dataclass
class TaskDataset:
    task_id: int
    classes: list[int]
    train_images: np.ndarray  # [N, ch, H, W] float
    train_labels: np.ndarray  # local labels in [0, C)
    test_images: np.ndarray
    test_labels: np.ndarray
    stats: tuple[np.ndarray, np.ndarray]  # per-channel mean, std

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def normalized(self, split: str, stats=None, dtype=np.float64) -> np.ndarray:
        mean, std = stats if stats is not None else self.stats
        imgs = self.train_images if split == "train" else self.test_images
        return ((imgs - mean[:, None, None]) / std[:, None, None]).astype(dtype)


@dataclass
class SplitSpec:
    num_tasks: int
    classes_per_task: int
    seed: int = 0
    source: str = "synthetic"


@dataclass
class SourceDataset:
    """A labelled image collection before task splitting (uint8 pixels)."""

    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    class_names: list[str]
    stats: tuple[np.ndarray, np.ndarray]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over ``[N, ch, H, W]``; std clamped to ``STD_EPS``."""
    images = np.asarray(images, dtype=np.float64)
    mean = images.mean(axis=(0, 2, 3))
    std = np.maximum(images.std(axis=(0, 2, 3)), STD_EPS)
    return mean, std


def resize_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of ``[..., H, W]`` (align_corners=False)."""
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape[-2:]
    if (H, W) == (h, w):
        return img.copy()
    Mh = interpolation_matrix(H, h)
    Mw = interpolation_matrix(W, w)
    return np.einsum("ih,...hw,jw->...ij", Mh, img, Mw)


def _with_reference_stats(tasks: list[TaskDataset]) -> list[TaskDataset]:
    # stats come from the first task only; later tasks are never peeked at
    ref = channel_stats(tasks[0].train_images)
    return [replace(t, stats=ref) for t in tasks]


def split_dataset(source: SourceDataset, spec: SplitSpec) -> list[TaskDataset]:
    """Shuffle classes by seed and chunk them into ``num_tasks`` groups."""
    K, C = spec.num_tasks, spec.classes_per_task
    n = source.num_classes
    if K < 1 or C < 1:
        raise ValueError("num_tasks and classes_per_task must be positive")
    if K * C > n:
        raise ValueError(f"{K} tasks x {C} classes exceeds the {n} available classes")
    if n % C != 0:
        raise ValueError(f"{n} classes cannot be divided into groups of {C}")
    order = np.random.default_rng(spec.seed).permutation(n)
    tasks = []
    for k in range(K):
        cls = [int(c) for c in order[k * C:(k + 1) * C]]
        lookup = {c: i for i, c in enumerate(cls)}
        tr = np.isin(source.train_labels, cls)
        te = np.isin(source.test_labels, cls)
        tasks.append(TaskDataset(
            task_id=k + 1,
            classes=cls,
            train_images=source.train_images[tr].astype(np.float64) / 255.0,
            train_labels=np.array([lookup[int(c)] for c in source.train_labels[tr]], dtype=np.int64),
            test_images=source.test_images[te].astype(np.float64) / 255.0,
            test_labels=np.array([lookup[int(c)] for c in source.test_labels[te]], dtype=np.int64),
            stats=source.stats,
        ))
    return _with_reference_stats(tasks)


def make_templates(num_classes: int, shape: tuple[int, int, int], rng: np.random.Generator,
                   coarse: int = 4) -> np.ndarray:
    """Smooth class templates: coarse random grids upsampled to the image size."""
    ch, H, W = shape
    grid = rng.normal(0.0, 1.0, (num_classes, ch, coarse, coarse))
    return resize_bilinear(grid, H, W)


def make_synthetic_tasks(K: int, C: int, samples_per_class: int, image_shape: tuple[int, int, int],
                         rng: np.random.Generator, noise: float = 0.5,
                         test_samples_per_class: int | None = None,
                         template_grid: int = 4) -> list[TaskDataset]:
    """``K`` tasks of ``C`` Gaussian classes, each centred on its own template.

    Templates are drawn on a ``template_grid`` x ``template_grid`` grid and
    upsampled, so a small grid puts every class of every task in one shared
    low-dimensional subspace.
    """
    n_test = samples_per_class if test_samples_per_class is None else test_samples_per_class
    templates = make_templates(K * C, image_shape, rng, template_grid)
    tasks = []
    for k in range(K):
        parts = {}
        for split, n in (("train", samples_per_class), ("test", n_test)):
            imgs, labels = [], []
            for c in range(C):
                base = templates[k * C + c]
                imgs.append(base + noise * rng.normal(0.0, 1.0, (n, *image_shape)))
                labels.append(np.full(n, c, dtype=np.int64))
            parts[split] = (np.concatenate(imgs), np.concatenate(labels))
        tasks.append(TaskDataset(
            task_id=k + 1,
            classes=list(range(k * C, (k + 1) * C)),
            train_images=parts["train"][0], train_labels=parts["train"][1],
            test_images=parts["test"][0], test_labels=parts["test"][1],
            stats=(np.zeros(image_shape[0]), np.ones(image_shape[0])),
        ))
    return _with_reference_stats(tasks)


def make_synthetic_source(num_classes: int, samples_per_class: int, image_shape: tuple[int, int, int],
                          rng: np.random.Generator, noise: float = 0.3,
                          test_samples_per_class: int | None = None) -> SourceDataset:
    """A uint8 source collection suitable for writing as an archive."""
    n_test = samples_per_class if test_samples_per_class is None else test_samples_per_class
    templates = make_templates(num_classes, image_shape, rng)

    def draw(n):
        imgs = templates[:, None] + noise * rng.normal(0.0, 1.0, (num_classes, n, *image_shape))
        pix = np.clip(np.round(127.5 + 40.0 * imgs), 0, 255).astype(np.uint8)
        labels = np.repeat(np.arange(num_classes), n).astype(np.int64)
        return pix.reshape(-1, *image_shape), labels

    tr_x, tr_y = draw(samples_per_class)
    te_x, te_y = draw(n_test)
    return SourceDataset(tr_x, tr_y, te_x, te_y, [f"class_{i}" for i in range(num_classes)],
                         channel_stats(tr_x.astype(np.float64) / 255.0))


# -- archive format -----------------------------------------------------------
def write_manifest(path: str | Path, channels: int, height: int, width: int,
                   class_names: list[str], train_records: int, test_records: int) -> None:
    Path(path).write_text(
        f"channels = {channels}\nheight = {height}\nwidth = {width}\n"
        f"classes = {','.join(class_names)}\n"
        f"train_records = {train_records}\ntest_records = {test_records}\n"
    )


def read_manifest(path: str | Path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ArchiveError(f"manifest line not key = value: {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    try:
        return {
            "channels": int(out["channels"]),
            "height": int(out["height"]),
            "width": int(out["width"]),
            "classes": [c.strip() for c in out["classes"].split(",") if c.strip()],
            "train_records": int(out["train_records"]),
            "test_records": int(out["test_records"]),
        }
    except KeyError as exc:
        raise ArchiveError(f"manifest is missing {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ArchiveError(f"manifest has a malformed value: {exc}") from None


def write_image_archive(path: str | Path, manifest_path: str | Path, source: SourceDataset) -> None:
    ch, H, W = source.train_images.shape[1:]

    def records(images, labels):
        lab = labels.astype(np.uint8).reshape(-1, 1)
        return np.concatenate([lab, images.reshape(len(images), -1).astype(np.uint8)], axis=1)

    blob = np.concatenate([records(source.train_images, source.train_labels),
                           records(source.test_images, source.test_labels)])
    Path(path).write_bytes(blob.tobytes())
    write_manifest(manifest_path, ch, H, W, source.class_names,
                   len(source.train_images), len(source.test_images))


def ingest_image_archive(path: str | Path, manifest_path: str | Path) -> SourceDataset:
    """Decode an archive; nothing is returned unless the whole file parses."""
    man = read_manifest(manifest_path)
    ch, H, W = man["channels"], man["height"], man["width"]
    rec = 1 + ch * H * W
    n_train, n_test = man["train_records"], man["test_records"]
    raw = Path(path).read_bytes()
    expected = rec * (n_train + n_test)
    if len(raw) < expected:
        last_full = (len(raw) // rec) * rec
        raise ArchiveError(f"truncated archive: record at byte offset {last_full} is incomplete "
                           f"({len(raw)} of {expected} bytes)")
    if len(raw) > expected:
        raise ArchiveError(f"trailing data at byte offset {expected} ({len(raw) - expected} extra bytes)")
    table = np.frombuffer(raw, dtype=np.uint8).reshape(n_train + n_test, rec)
    labels = table[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= len(man["classes"]))
    if bad.size:
        raise ArchiveError(f"label {labels[bad[0]]} out of range at byte offset {bad[0] * rec}")
    images = table[:, 1:].reshape(-1, ch, H, W).copy()
    tr_x, te_x = images[:n_train], images[n_train:]
    stats = channel_stats(tr_x.astype(np.float64) / 255.0) if n_train else (np.zeros(ch), np.full(ch, STD_EPS))
    return SourceDataset(tr_x, labels[:n_train], te_x, labels[n_train:], man["classes"], stats)


def export_split_csv(tasks: list[TaskDataset], path: str | Path) -> None:
    """One row per (task, class) with its train/test sample counts."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id", "local_label", "global_class", "train_samples", "test_samples"])
        for t in tasks:
            for i, c in enumerate(t.classes):
                w.writerow([t.task_id, i, c, int((t.train_labels == i).sum()), int((t.test_labels == i).sum())])
