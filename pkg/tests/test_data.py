import numpy as np
import pytest
import torch
from PIL import Image

from aegis.data import (DatasetError, ImageBatch, IngestionConfig, load_dataset, load_directory, load_split,
                        make_toy)


def test_toy_deterministic_and_valid():
    a, b = make_toy(60, seed=3), make_toy(60, seed=3)
    assert a.digest() == b.digest()
    assert a.pixels.shape == (60, 1, 32, 32)
    assert 0 <= a.pixels.min() and a.pixels.max() <= 1
    assert set(a.labels.tolist()) == {0, 1, 2}
    assert torch.allclose(a.pixels * 255, torch.round(a.pixels * 255), atol=1e-4)


def test_toy_classes_differ_in_intensity():
    d = make_toy(300, seed=0)
    means = [d.of_class(c).pixels.amax(dim=(1, 2, 3)).mean().item() for c in range(3)]
    assert means[1] > means[0]


def test_batch_invariants():
    with pytest.raises(DatasetError):
        ImageBatch(torch.full((2, 1, 4, 4), 1.5), torch.zeros(2, dtype=torch.long))
    with pytest.raises(DatasetError):
        ImageBatch(torch.zeros(2, 1, 4, 4), torch.tensor([0, 3]), num_classes=3)
    with pytest.raises(DatasetError):
        ImageBatch(torch.zeros(2, 4, 4), torch.zeros(2, dtype=torch.long))


def test_load_dataset_batches():
    cfg = IngestionConfig(batch_size=50, n_train=120)
    sizes = [len(b) for b in load_dataset("toy", "train", cfg)]
    assert sizes == [50, 50, 20]
    assert len(load_split("toy", "test", IngestionConfig(n_test=30))) == 30


def _write(root, names_labels, size=8):
    lines = []
    for name, label in names_labels:
        arr = (np.random.default_rng(0).random((size, size)) * 255).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(root / name)
        lines.append(f"{name} {label}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")


def test_directory_loader(tmp_path):
    _write(tmp_path, [("a.png", 0), ("b.png", 1)])
    batch = load_directory(tmp_path, num_classes=2, size=8)
    assert batch.pixels.shape == (2, 1, 8, 8)
    assert batch.labels.tolist() == [0, 1]


def test_directory_loader_rejects_bad_label_and_corrupt_file(tmp_path):
    _write(tmp_path, [("a.png", 5)])
    with pytest.raises(DatasetError):
        load_directory(tmp_path, num_classes=2, size=8)
    (tmp_path / "a.png").write_bytes(b"not an image")
    (tmp_path / "manifest.txt").write_text("a.png 0\n")
    with pytest.raises(DatasetError):
        load_directory(tmp_path, num_classes=2, size=8)


def test_unknown_dataset():
    with pytest.raises(DatasetError):
        load_split("nope", "train")
