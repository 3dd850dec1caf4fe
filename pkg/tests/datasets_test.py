from pathlib import Path

import numpy as np
import pytest

from maskfed.utils import datasets
from maskfed.utils.datasets import (
    CIFAR10_RECORD_BYTES,
    LabeledImage,
    read_cifar10_batch,
    resize_bilinear,
    synth_dataset,
    to_cifar10_record,
)
from maskfed.utils.errors import ContractViolation, DataFormatError


def _record(label: int, planes: tuple[int, int, int]) -> bytes:
    return bytes([label]) + b"".join(bytes([v]) * 1024 for v in planes)


def test_read_zero_record(tmp_path: Path) -> None:
    path = tmp_path / "batch.bin"
    path.write_bytes(_record(3, (0, 0, 0)))
    [item] = read_cifar10_batch(path)
    assert item.label == 3
    assert item.image.shape == (32, 96)
    assert not item.image.any()


def test_read_channel_interleaving(tmp_path: Path) -> None:
    path = tmp_path / "batch.bin"
    path.write_bytes(_record(0, (255, 0, 51)) + _record(9, (0, 0, 0)))
    first, second = read_cifar10_batch(path)
    assert np.all(first.image[:, 0::3] == 1.0)
    assert np.all(first.image[:, 1::3] == 0.0)
    assert np.allclose(first.image[:, 2::3], 0.2)
    assert second.label == 9


def test_record_round_trip(tmp_path: Path) -> None:
    rng = np.random.default_rng(0)
    raw = bytes([7]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes()
    path = tmp_path / "batch.bin"
    path.write_bytes(raw)
    [item] = read_cifar10_batch(path)
    assert to_cifar10_record(item) == raw


def test_record_rejects_wrong_shape() -> None:
    with pytest.raises(ContractViolation):
        to_cifar10_record(LabeledImage(np.zeros((16, 48)), 0))


@pytest.mark.parametrize("size", [0, CIFAR10_RECORD_BYTES - 1])
def test_read_partial_record(tmp_path: Path, size: int) -> None:
    path = tmp_path / "batch.bin"
    path.write_bytes(b"\0" * size)
    with pytest.raises(DataFormatError):
        read_cifar10_batch(path)


def test_load_cifar10_binary(
    tmp_path: Path, monkeypatch: pytest.MonkeyPatch
) -> None:
    monkeypatch.setattr(datasets, "RECORDS_PER_BATCH", 2)
    (tmp_path / "test_batch.bin").write_bytes(
        _record(1, (0, 0, 0)) + _record(2, (255, 255, 255))
    )
    loaded = datasets.load_cifar10_binary(tmp_path, "test")
    assert [item.label for item in loaded] == [1, 2]
    assert np.all(loaded[1].image == 1.0)


def test_load_cifar10_binary_truncated(
    tmp_path: Path, monkeypatch: pytest.MonkeyPatch
) -> None:
    monkeypatch.setattr(datasets, "RECORDS_PER_BATCH", 2)
    (tmp_path / "test_batch.bin").write_bytes(_record(1, (0, 0, 0)))
    with pytest.raises(DataFormatError) as excinfo:
        datasets.load_cifar10_binary(tmp_path, "test")
    assert "expected 6146 bytes" in str(excinfo.value)


def test_load_cifar10_binary_missing(tmp_path: Path) -> None:
    with pytest.raises(OSError):
        datasets.load_cifar10_binary(tmp_path, "train")


def test_synth_dataset() -> None:
    data = synth_dataset(4, 5, 16, 16, 3, seed=2)
    assert len(data) == 20
    assert [item.label for item in data[::5]] == [0, 1, 2, 3]
    assert all(item.image.shape == (16, 48) for item in data)
    assert all(0 <= item.image.min() <= item.image.max() <= 1 for item in data)
    again = synth_dataset(4, 5, 16, 16, 3, seed=2)
    assert all(np.array_equal(a.image, b.image) for a, b in zip(data, again))
    other = synth_dataset(4, 5, 16, 16, 3, seed=3)
    assert not np.array_equal(data[0].image, other[0].image)


def test_synth_dataset_without_noise() -> None:
    data = synth_dataset(3, 4, 8, 8, 1, seed=0, noise=0.0)
    assert np.array_equal(data[0].image, data[3].image)
    assert not np.array_equal(data[0].image, data[4].image)


def test_synth_dataset_needs_two_classes() -> None:
    with pytest.raises(ContractViolation):
        synth_dataset(1, 4, 8, 8, 1, seed=0)


def test_resize_identity() -> None:
    image = np.random.default_rng(1).random((6, 18))
    assert np.array_equal(resize_bilinear(image, 6, 6, 3), image)


def test_resize_constant() -> None:
    image = np.full((32, 96), 0.25)
    resized = resize_bilinear(image, 16, 16, 3)
    assert resized.shape == (16, 48)
    assert np.allclose(resized, 0.25)


def test_resize_checkerboard_center() -> None:
    image = np.array([[0.0, 1.0], [1.0, 0.0]])
    resized = resize_bilinear(image, 3, 3, 1)
    assert resized[1, 1] == pytest.approx(0.5)
    assert resized[0, 0] == pytest.approx(0.0)
    assert resized[0, 2] == pytest.approx(1.0)


def test_resize_rejects_empty_target() -> None:
    with pytest.raises(ContractViolation):
        resize_bilinear(np.zeros((4, 4)), 0, 2, 1)


def test_resize_dataset() -> None:
    data = synth_dataset(2, 2, 8, 8, 3, seed=0)
    resized = datasets.resize_dataset(data, 4, 4, 3)
    assert [item.label for item in resized] == [0, 0, 1, 1]
    assert all(item.image.shape == (4, 12) for item in resized)
