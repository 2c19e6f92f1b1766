import json

import numpy as np
import pytest

from scripts.artifacts import file_fingerprint, load_tensor_dump, save_tensor_dump, spec_fingerprint
from scripts.exceptions import ConfigurationError, DatasetFormatError


def test_dump_round_trip_with_labels(tmp_path, digit_images):
    path = save_tensor_dump(digit_images.images, tmp_path / "dump", labels=digit_images.labels, kind="bim")
    assert path.suffix == ".bin"
    assert path.stat().st_size == digit_images.images.size * 4
    images, labels, sidecar = load_tensor_dump(tmp_path / "dump.json")
    np.testing.assert_array_equal(images, digit_images.images)
    np.testing.assert_array_equal(labels, digit_images.labels)
    assert sidecar["dtype"] == "float32-le"
    assert sidecar["kind"] == "bim"


def test_dump_without_labels(tmp_path):
    save_tensor_dump(np.zeros((2, 3), dtype=np.float32), tmp_path / "plain.bin")
    _, labels, sidecar = load_tensor_dump(tmp_path / "plain.bin")
    assert labels is None
    assert sidecar["shape"] == [2, 3]


def test_dump_size_mismatch(tmp_path):
    path = save_tensor_dump(np.zeros((2, 3), dtype=np.float32), tmp_path / "plain.bin")
    sidecar_path = path.with_suffix(".json")
    sidecar = json.loads(sidecar_path.read_text())
    sidecar["shape"] = [3, 3]
    sidecar_path.write_text(json.dumps(sidecar))
    with pytest.raises(DatasetFormatError):
        load_tensor_dump(path)


def test_missing_dump(tmp_path):
    with pytest.raises(ConfigurationError):
        load_tensor_dump(tmp_path / "absent.bin")


def test_fingerprints(tmp_path):
    path = tmp_path / "weights.bin"
    path.write_bytes(b"abc")
    assert file_fingerprint(path) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    assert spec_fingerprint({"a": 1, "b": [1, 2]}) == spec_fingerprint({"b": [1, 2], "a": 1})
