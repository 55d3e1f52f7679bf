import hashlib
import json
import logging
import platform
import struct
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List

import numpy as np

import speechqa.dpr
from speechqa.dpr.base import DataError

"""
Some utility functions shared by the modules of this package: the binary matrix format, line-delimited JSON, seeds,
logging setup and run manifests.
"""

MATRIX_MAGIC = 0x5344504D
MATRIX_VERSION = 1
_HEADER = struct.Struct("<4I")


def write_frame_file(path: Path | str, matrix: np.ndarray) -> None:
    """
    Write a ``T×D`` matrix in the binary matrix format: a header of four little-endian uint32 (magic, version, T, D)
    followed by the values as little-endian float32 in row-major order.

    :param path: The file to write. Parent directories are created.
    :param matrix: A two-dimensional array.
    """
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise DataError(f"Only matrices can be written, got shape {matrix.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, matrix.shape[0], matrix.shape[1]))
        f.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
    logging.getLogger(__name__).debug(f"Wrote {matrix.shape[0]}x{matrix.shape[1]} matrix to {path}")


def read_frame_file(path: Path | str) -> np.ndarray:
    """
    Read a matrix written by :func:`write_frame_file`. The values are widened to float64.

    :param path: The file to read.
    :return: A ``T×D`` float64 array.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path} is too short to hold a matrix header")
    magic, version, t, d = _HEADER.unpack_from(raw)
    if magic != MATRIX_MAGIC:
        raise DataError(f"{path} has bad magic number {magic:#x}")
    if version != MATRIX_VERSION:
        raise DataError(f"{path} has unsupported format version {version}")
    expected = _HEADER.size + 4 * t * d
    if len(raw) != expected:
        raise DataError(f"{path} should be {expected} bytes for a {t}x{d} matrix, but is {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(t, d).astype(np.float64)


def float32_roundtrip(matrix: np.ndarray) -> np.ndarray:
    """
    The values a matrix has after being written and read again, so in-memory and on-disk data are bit-identical.
    """
    return np.asarray(matrix, dtype=np.float32).astype(np.float64)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_jsonl(path: Path | str, records: Iterable[Dict[str, Any]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(canonical_json(record))
            f.write("\n")


def append_jsonl(path: Path | str, record: Dict[str, Any]) -> None:
    with open(path, "a", encoding="utf-8", newline="\n") as f:
        f.write(canonical_json(record))
        f.write("\n")


def read_jsonl(path: Path | str) -> Iterator[Dict[str, Any]]:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                err = DataError(f"Line {lineno} of {path} is not valid JSON")
                err.add_note(str(e))
                raise err from e
            if not isinstance(record, dict):
                raise DataError(f"Line {lineno} of {path} is not a JSON object")
            yield record


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def derive_seed(base: int, *keys: str | int) -> int:
    """
    A sub-seed that depends only on the base seed and the keys, not on how many random numbers were drawn before.

    :param base: The seed of the run.
    :param keys: Anything identifying the consumer, e.g. ``("featurize", speaker, utterance_id)``.
    :return: A non-negative 63-bit integer.
    """
    digest = hashlib.sha256(":".join(str(k) for k in (base, *keys)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def make_rng(base: int, *keys: str | int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, *keys))


def setup_logging(log_level: str = "WARNING") -> None:
    """
    Configure the root logger from a level name.

    :param log_level: One of ``DEBUG``, ``INFO``, ``WARNING``, ``ERROR`` or ``CRITICAL`` (case-insensitive).
    """
    match log_level.upper():
        case "DEBUG":
            logging.basicConfig(level=logging.DEBUG)
        case "INFO":
            logging.basicConfig(level=logging.INFO)
        case "WARNING":
            logging.basicConfig(level=logging.WARNING)
        case "ERROR":
            logging.basicConfig(level=logging.ERROR)
        case "CRITICAL":
            logging.basicConfig(level=logging.CRITICAL)
        case _:
            raise ValueError(f"Invalid log level {log_level}")


def package_version() -> str:
    return getattr(speechqa.dpr, "__version__", "unknown")


def write_run_manifest(directory: Path | str, subcommand: str, config_hash: str, seed: int, **extra: Any) -> Path:
    """
    Write ``run_manifest.<subcommand>.json`` into an artifact directory. The timestamp is the only field that differs
    between two identical runs.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "config_hash": config_hash,
        "seed": seed,
        "versions": {
            "speechqa-dpr": package_version(),
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "timestamp": datetime.now(timezone.utc).isoformat(),
        **extra,
    }
    path = directory / f"run_manifest.{subcommand}.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def list_files(directory: Path | str) -> List[Path]:
    """All files below ``directory``, sorted, excluding run manifests."""
    directory = Path(directory)
    return sorted(p for p in directory.rglob("*") if p.is_file() and not p.name.startswith("run_manifest."))
