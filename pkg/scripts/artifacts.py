import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from scripts.exceptions import ConfigurationError, DatasetFormatError


# Configure logging
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")

DUMP_DTYPE = "<f4"


def _stem(path):
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".bin", ".json") else path


def save_tensor_dump(images, path, labels=None, **metadata):
    """
    Writes images as raw little-endian float32 plus a JSON sidecar.

    Args:
        images (np.ndarray | Tensor): Array of any shape, usually [N, C, H, W].
        path (str | Path): Dump location; ``.bin``/``.json`` suffixes are optional.
        labels (np.ndarray | None): Saved next to the dump as ``<stem>.labels.npy``.
        **metadata: Extra sidecar fields (attack kind, epsilon, seed, ...).

    Returns:
        Path: The ``.bin`` file written.
    """
    data = np.asarray(getattr(images, "data", images), dtype=DUMP_DTYPE)
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    bin_path = stem.with_suffix(".bin")
    bin_path.write_bytes(np.ascontiguousarray(data).tobytes())
    sidecar = {"shape": list(data.shape), "dtype": "float32-le", **metadata}
    if labels is not None:
        labels_path = stem.with_name(stem.name + ".labels.npy")
        np.save(labels_path, np.asarray(labels, dtype=np.int64))
        sidecar["labels"] = labels_path.name
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True, default=str))
    logging.info(f"Wrote tensor dump {bin_path} with shape {data.shape}")
    return bin_path


def load_tensor_dump(path):
    """
    Reads a dump written by ``save_tensor_dump``.

    Returns:
        tuple[np.ndarray, np.ndarray | None, dict]: float32 array, labels (if
        dumped) and the sidecar metadata.
    """
    stem = _stem(path)
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    for required in (bin_path, json_path):
        if not required.exists():
            raise ConfigurationError(f"Tensor dump file {required} does not exist")
    sidecar = json.loads(json_path.read_text())
    shape = tuple(sidecar["shape"])
    raw = bin_path.read_bytes()
    expected = 4 * int(np.prod(shape))
    if len(raw) != expected:
        raise DatasetFormatError(f"{bin_path}: {len(raw)} bytes, sidecar shape {shape} needs {expected}")
    data = np.frombuffer(raw, dtype=DUMP_DTYPE).reshape(shape).astype(np.float32)
    labels = None
    if "labels" in sidecar:
        labels = np.load(stem.parent / sidecar["labels"])
    return data, labels, sidecar


def file_fingerprint(path):
    """SHA-256 of the file bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def spec_fingerprint(mapping):
    """SHA-256 of the canonical JSON form of a spec dictionary."""
    canonical = json.dumps(mapping, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
