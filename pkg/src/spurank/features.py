"""Frozen-backbone features and their on-disk cache.

Cache layout (little endian)::

    magic "SPRKFEAT" | u32 version | u32 header_len | JSON header | float32 rows ...

with a sidecar ``<cache>.idx`` holding one ``{"image_id", "row_offset"}`` line
per row.  A row is appended to the payload before its index line, so readers
that only trust indexed rows never see a torn row.
"""

from __future__ import annotations

import base64
import json
import os
import shlex
import struct
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from PIL import Image

from ._io import append_line, keyed_rng, num_threads, read_jsonl, truncate_torn_tail
from .dataset import DatasetManifest, load_image

FEAT_MAGIC = b"SPRKFEAT"
FEAT_VERSION = 1


class FeatureCacheError(RuntimeError):
    pass


@dataclass
class FeatureMatrix:
    values: np.ndarray  # n x d float32
    labels: np.ndarray  # n int64
    image_ids: tuple[str, ...]
    backbone_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.image_ids = tuple(self.image_ids)
        n = len(self.image_ids)
        if self.values.ndim != 2 or self.values.shape[0] != n or self.labels.shape != (n,):
            raise ValueError("values, labels and image_ids must be row-aligned")
        if list(self.image_ids) != sorted(set(self.image_ids)):
            raise ValueError("image_ids must be unique and sorted ascending")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values must be finite")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def take(self, image_ids: Sequence[str]) -> "FeatureMatrix":
        pos = {iid: i for i, iid in enumerate(self.image_ids)}
        ids = sorted(image_ids)
        rows = [pos[i] for i in ids]
        return FeatureMatrix(self.values[rows], self.labels[rows], ids, self.backbone_id)


class BackboneAdapter(Protocol):
    backbone_id: str
    d: int

    def embed(self, image: np.ndarray) -> np.ndarray:
        """Map an H x W x 3 image in [0, 1] to a length-d vector."""


# --------------------------------------------------------------------------
# mock backbone

MOCK_GRID = 16
MOCK_DIM = 64


def _downsample(image: np.ndarray, size: int) -> np.ndarray:
    h, w, _ = image.shape
    if h % size == 0 and w % size == 0:
        return image.reshape(size, h // size, size, w // size, 3).mean(axis=(1, 3))
    chans = [np.asarray(Image.fromarray(np.ascontiguousarray(image[..., c], dtype=np.float32), mode="F")
                        .resize((size, size), Image.BILINEAR), dtype=np.float64)
             for c in range(3)]
    return np.stack(chans, axis=-1)


def mock_projection(d: int = MOCK_DIM, seed: int = 0) -> np.ndarray:
    k = MOCK_GRID * MOCK_GRID * 3
    return keyed_rng(seed, "mock-backbone-projection", d).normal(size=(d, k)) / np.sqrt(k)


def mock_backbone_embed(image: np.ndarray, projection: np.ndarray | None = None) -> np.ndarray:
    """Block-average to 16x16x3, project with a fixed random matrix, standardise the vector."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3 or min(image.shape[:2]) < 1:
        raise ValueError(f"expected an H x W x 3 image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    P = mock_projection() if projection is None else projection
    z = P @ _downsample(image, MOCK_GRID).reshape(-1)
    sd = z.std()
    if sd == 0.0:
        return np.zeros_like(z)
    return (z - z.mean()) / sd


class MockBackbone:
    def __init__(self, d: int = MOCK_DIM, seed: int = 0):
        self.d = d
        self.seed = seed
        self.backbone_id = f"mock-backbone/v1/d{d}/s{seed}"
        self._P = mock_projection(d, seed)
        self.calls = 0

    def embed(self, image: np.ndarray) -> np.ndarray:
        self.calls += 1
        return mock_backbone_embed(image, self._P)


class SubprocessBackbone:
    """Backbone served by an external process over line-delimited JSON.

    Request ``{"request_id", "image_path"}`` or ``{"request_id", "array", "shape"}``
    (array = base64 float32 H*W*3); response ``{"request_id", "embedding": [...]}``.
    """

    def __init__(self, command: str, backbone_id: str | None = None, d: int | None = None):
        self.command = command
        self.backbone_id = backbone_id or command
        self._proc = subprocess.Popen(shlex.split(command), stdin=subprocess.PIPE,
                                      stdout=subprocess.PIPE, text=True, bufsize=1)
        self._lock = threading.Lock()
        self._next = 0
        self.d = d if d is not None else len(self.embed(np.zeros((16, 16, 3), np.float32)))

    def embed(self, image: np.ndarray) -> np.ndarray:
        arr = np.ascontiguousarray(image, dtype="<f4")
        with self._lock:
            self._next += 1
            req = {"request_id": self._next, "shape": list(arr.shape),
                   "array": base64.b64encode(arr.tobytes()).decode("ascii")}
            self._proc.stdin.write(json.dumps(req) + "\n")
            self._proc.stdin.flush()
            line = self._proc.stdout.readline()
        if not line:
            raise RuntimeError(f"backbone process {self.command!r} closed its output")
        resp = json.loads(line)
        if resp.get("request_id") != req["request_id"]:
            raise RuntimeError("backbone response out of order")
        if "error" in resp:
            raise RuntimeError(f"backbone error: {resp['error']}")
        return np.asarray(resp["embedding"], dtype=np.float64)

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)


def decode_backbone_request(req: dict) -> np.ndarray:
    if "image_path" in req:
        return load_image(req["image_path"])
    raw = base64.b64decode(req["array"])
    return np.frombuffer(raw, dtype="<f4").reshape(req["shape"])


def make_backbone(spec: str) -> BackboneAdapter:
    """``mock`` / ``mock:D`` select the in-process mock; anything else is a command line."""
    if spec == "mock" or spec.startswith("mock:"):
        d = int(spec.split(":", 1)[1]) if ":" in spec else MOCK_DIM
        return MockBackbone(d=d)
    return SubprocessBackbone(spec)


# --------------------------------------------------------------------------
# cache

class FeatureCache:
    def __init__(self, path: str | os.PathLike, backbone_id: str, d: int):
        self.path = Path(path)
        self.index_path = self.path.with_name(self.path.name + ".idx")
        self.backbone_id = backbone_id
        self.d = d
        self._lock = threading.Lock()
        if self.path.exists():
            header, self._payload_start = self._read_header()
            if header["backbone_id"] != backbone_id:
                raise FeatureCacheError(
                    f"{self.path}: cache built by {header['backbone_id']!r}, "
                    f"refusing to mix with {backbone_id!r}")
            if int(header["d"]) != d:
                raise FeatureCacheError(
                    f"{self.path}: cache dimension {header['d']} != backbone dimension {d}")
            self._repair()
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            blob = json.dumps({"backbone_id": backbone_id, "d": d, "dtype": "float32",
                               "order": "row-major"}, sort_keys=True).encode("utf-8")
            tmp = self.path.with_name(self.path.name + ".tmp")
            with open(tmp, "wb") as fh:
                fh.write(FEAT_MAGIC + struct.pack("<II", FEAT_VERSION, len(blob)) + blob)
            os.replace(tmp, self.path)
            self.index_path.write_text("", encoding="utf-8")
            self._payload_start = 16 + len(blob)

    def _repair(self) -> None:
        # an interrupted append can leave a partial row or a partial index line
        row_bytes = 4 * self.d
        size = self.path.stat().st_size
        extra = (size - self._payload_start) % row_bytes
        if extra:
            with open(self.path, "rb+") as fh:
                fh.truncate(size - extra)
        if self.index_path.exists():
            truncate_torn_tail(self.index_path)

    def _read_header(self) -> tuple[dict, int]:
        with open(self.path, "rb") as fh:
            if fh.read(8) != FEAT_MAGIC:
                raise FeatureCacheError(f"{self.path}: not a feature cache")
            version, hlen = struct.unpack("<II", fh.read(8))
            if version != FEAT_VERSION:
                raise FeatureCacheError(f"{self.path}: unsupported cache version {version}")
            header = json.loads(fh.read(hlen).decode("utf-8"))
        return header, 16 + hlen

    def index(self) -> dict[str, int]:
        if not self.index_path.exists():
            return {}
        return {obj["image_id"]: int(obj["row_offset"]) for _, obj in read_jsonl(self.index_path)}

    def read_rows(self, offsets: Sequence[int]) -> np.ndarray:
        if not offsets:
            return np.zeros((0, self.d), np.float32)
        payload = np.memmap(self.path, dtype="<f4", mode="r", offset=self._payload_start)
        payload = payload[: (payload.shape[0] // self.d) * self.d].reshape(-1, self.d)
        return np.array(payload[np.asarray(offsets)], dtype=np.float32)

    def append(self, image_id: str, row: np.ndarray) -> None:
        data = np.ascontiguousarray(row, dtype="<f4").reshape(self.d).tobytes()
        with self._lock:
            with open(self.path, "ab") as fh:
                pos = fh.seek(0, os.SEEK_END)
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            offset = (pos - self._payload_start) // (4 * self.d)
            append_line(self.index_path, {"image_id": image_id, "row_offset": offset})


def extract_features(image_ids: Sequence[str], manifest: DatasetManifest,
                     backbone: BackboneAdapter, cache_path: str | os.PathLike | None = None,
                     ) -> FeatureMatrix:
    """One row per requested id, sorted by image_id, reusing cached rows bit-exactly."""
    by_id = manifest.by_id()
    ids = sorted(set(image_ids))
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise KeyError(f"image ids not in manifest: {missing[:5]}")
    cache = FeatureCache(cache_path, backbone.backbone_id, backbone.d) if cache_path else None
    have = cache.index() if cache else {}
    todo = [i for i in ids if i not in have]

    def work(iid):
        path = manifest.path_of(by_id[iid])
        try:
            img = load_image(path)
        except Exception as exc:
            raise OSError(f"cannot read image {iid!r} at {path}: {exc}") from exc
        vec = np.asarray(backbone.embed(img), dtype=np.float32)
        if vec.shape != (backbone.d,):
            raise FeatureCacheError(f"backbone returned dimension {vec.shape} for {iid!r}, "
                                    f"expected {backbone.d}")
        return vec

    threads = num_threads()
    if threads > 1 and len(todo) > 1:
        with ThreadPoolExecutor(threads) as pool:
            fresh = list(pool.map(work, todo))
    else:
        fresh = [work(i) for i in todo]

    rows = dict(zip(todo, fresh))
    if cache:
        for iid in todo:  # sorted, so the payload is independent of thread timing
            cache.append(iid, rows[iid])
        cached_ids = [i for i in ids if i in have]
        for iid, row in zip(cached_ids, cache.read_rows([have[i] for i in cached_ids])):
            rows[iid] = row
    values = (np.stack([rows[i] for i in ids]) if ids
              else np.zeros((0, backbone.d), np.float32))
    labels = np.array([by_id[i].class_id for i in ids], dtype=np.int64)
    return FeatureMatrix(values, labels, ids, backbone.backbone_id)


def load_cached_features(cache_path: str | os.PathLike, image_ids: Sequence[str],
                         manifest: DatasetManifest) -> FeatureMatrix:
    """Read rows for ``image_ids`` from an existing cache, without a backbone."""
    path = Path(cache_path)
    if not path.exists():
        raise FileNotFoundError(f"feature cache not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(8) != FEAT_MAGIC:
            raise FeatureCacheError(f"{path}: not a feature cache")
        _, hlen = struct.unpack("<II", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
    cache = FeatureCache(path, header["backbone_id"], int(header["d"]))
    index = cache.index()
    ids = sorted(set(image_ids))
    missing = [i for i in ids if i not in index]
    if missing:
        raise FeatureCacheError(f"{path}: no cached rows for {missing[:5]}"
                                + (f" (+{len(missing) - 5} more)" if len(missing) > 5 else ""))
    by_id = manifest.by_id()
    values = cache.read_rows([index[i] for i in ids])
    labels = np.array([by_id[i].class_id for i in ids], dtype=np.int64)
    return FeatureMatrix(values, labels, ids, header["backbone_id"])
