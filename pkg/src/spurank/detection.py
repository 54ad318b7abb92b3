"""Open-vocabulary detection scores: one scalar per image, cached and resumable.

Backends speak a line protocol.  Request::

    {"request_id": ..., "image_path": "...", "queries": ["a photo of a ...", ...]}

Response::

    {"request_id": ..., "boxes": [{"x_min", "y_min", "x_max", "y_max", "score", "query_index"}, ...]}

or ``{"request_id": ..., "error": "..."}``.
"""

from __future__ import annotations

import json
import logging
import os
import shlex
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from PIL import Image

from ._io import append_line, dumps, num_threads, read_jsonl, truncate_torn_tail
from .dataset import DatasetManifest, ImageRecord, SyntheticGroundTruth, load_ground_truth

log = logging.getLogger(__name__)

DEFAULT_TEMPLATE = "a photo of a {class_name}"
AGGREGATIONS = ("max", "sum", "top3")


class BackendError(RuntimeError):
    pass


class ImageReadError(OSError):
    pass


class ScoreCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectionBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    score: float
    query_index: int = 0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"box score {self.score} outside [0, 1]")
        if self.query_index < 0:
            raise ValueError("query_index must be >= 0")

    def check_bounds(self, width: int, height: int) -> None:
        if self.x_min < 0 or self.y_min < 0 or self.x_max > width or self.y_max > height:
            raise ValueError(f"box {self.as_tuple()} outside {width}x{height} image")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def to_json(self) -> dict:
        return {"x_min": self.x_min, "y_min": self.y_min, "x_max": self.x_max,
                "y_max": self.y_max, "score": self.score, "query_index": self.query_index}

    @classmethod
    def from_json(cls, obj: dict) -> "DetectionBox":
        return cls(float(obj["x_min"]), float(obj["y_min"]), float(obj["x_max"]),
                   float(obj["y_max"]), float(obj["score"]), int(obj.get("query_index", 0)))


def box_order(box: DetectionBox) -> tuple:
    return (-box.score, box.x_min, box.y_min, box.x_max, box.y_max, box.query_index)


def aggregate_boxes(boxes: Iterable[DetectionBox], target_query: int = 0,
                    mode: str = "max") -> float:
    """Collapse box confidences for ``target_query`` into one score in [0, 1].

    ``max`` is the default; ``sum`` is clamped to 1 and ``top3`` averages the
    three best boxes (fewer if fewer exist).  No matching box scores 0.
    """
    scores = sorted((b.score for b in boxes if b.query_index == target_query), reverse=True)
    if not scores:
        return 0.0
    if mode == "max":
        return float(scores[0])
    if mode == "sum":
        return float(min(1.0, sum(scores)))
    if mode == "top3":
        top = scores[:3]
        return float(sum(top) / len(top))
    raise ValueError(f"unknown aggregation {mode!r}; expected one of {AGGREGATIONS}")


@dataclass(frozen=True)
class ScoreRecord:
    image_id: str
    class_id: int
    score: float
    boxes: tuple[DetectionBox, ...]
    backend_id: str

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "class_id": self.class_id, "score": self.score,
                "boxes": [b.to_json() for b in self.boxes], "backend_id": self.backend_id}

    @classmethod
    def from_json(cls, obj: dict) -> "ScoreRecord":
        return cls(obj["image_id"], int(obj["class_id"]), float(obj["score"]),
                   tuple(DetectionBox.from_json(b) for b in obj["boxes"]), obj["backend_id"])


@dataclass(frozen=True)
class Skip:
    image_id: str
    reason: str


@dataclass
class ScoreTable:
    backend_id: str
    records: dict[str, ScoreRecord] = field(default_factory=dict)
    skips: list[Skip] = field(default_factory=list)
    template: str = DEFAULT_TEMPLATE
    aggregation: str = "max"

    def __post_init__(self):
        self.records = {k: self.records[k] for k in sorted(self.records)}
        self.skips = sorted(self.skips, key=lambda s: s.image_id)

    def scores(self) -> dict[str, float]:
        return {k: r.score for k, r in self.records.items()}

    def header(self) -> dict:
        return {"backend_id": self.backend_id, "template": self.template,
                "aggregation": self.aggregation}


def write_score_table(table: ScoreTable, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(table.header()) + "\n")
        for rec in table.records.values():
            fh.write(dumps(rec.to_json()) + "\n")
        for s in table.skips:
            fh.write(dumps({"skip": s.image_id, "reason": s.reason}) + "\n")
    os.replace(tmp, path)


def read_score_table(path: str | os.PathLike) -> ScoreTable:
    header = None
    records: dict[str, ScoreRecord] = {}
    skips: list[Skip] = []
    for lineno, obj in read_jsonl(path):
        if header is None:
            if "backend_id" not in obj:
                raise ScoreCacheError(f"{path}:{lineno}: missing backend_id header")
            header = obj
        elif "skip" in obj:
            skips.append(Skip(obj["skip"], obj["reason"]))
        else:
            rec = ScoreRecord.from_json(obj)
            records[rec.image_id] = rec
    if header is None:
        raise ScoreCacheError(f"{path}: empty score file")
    return ScoreTable(header["backend_id"], records, skips,
                      header.get("template", DEFAULT_TEMPLATE), header.get("aggregation", "max"))


# --------------------------------------------------------------------------
# backends

class DetectorBackend(Protocol):
    backend_id: str

    def detect(self, image_path: str | os.PathLike, queries: Sequence[str]) -> list[DetectionBox]:
        ...


class MockDetector:
    """Stand-in detector for the synthetic fixture.

    Reports one box, the glyph's rectangle, with confidence ``clamp(1 - o)``,
    where ``o`` is the image's ground-truth occlusion.  Images are looked up by
    file stem, which the fixture sets to the image_id.
    """

    backend_id = "mock-detector/v1"

    def __init__(self, truth: dict[str, SyntheticGroundTruth] | str | os.PathLike):
        if not isinstance(truth, dict):
            truth = load_ground_truth(truth)
        self.truth = truth
        self.calls = 0
        self._lock = threading.Lock()

    def detect(self, image_path, queries):
        with self._lock:
            self.calls += 1
        gt = self.truth.get(Path(image_path).stem)
        if gt is None:
            raise BackendError(f"no ground truth for {image_path}")
        score = min(1.0, max(0.0, 1.0 - gt.occlusion))
        if score <= 0.0:
            return []
        x0, y0, x1, y1 = gt.fg_box
        return [DetectionBox(float(x0), float(y0), float(x1), float(y1), score, 0)]


class SubprocessDetector:
    """Detector served by an external process over the line protocol."""

    def __init__(self, command: str, backend_id: str | None = None):
        self.command = command
        self.backend_id = backend_id or command
        self._lock = threading.Lock()
        self._next = 0
        self._proc = None
        self.calls = 0

    def _ensure(self):
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(shlex.split(self.command), stdin=subprocess.PIPE,
                                          stdout=subprocess.PIPE, text=True, bufsize=1)
        return self._proc

    def detect(self, image_path, queries):
        with self._lock:
            self.calls += 1
            self._next += 1
            req = {"request_id": self._next, "image_path": str(image_path),
                   "queries": list(queries)}
            proc = self._ensure()
            try:
                proc.stdin.write(json.dumps(req) + "\n")
                proc.stdin.flush()
                line = proc.stdout.readline()
            except (BrokenPipeError, OSError) as exc:
                self._proc = None
                raise BackendError(f"backend process failed: {exc}") from exc
        if not line:
            self._proc = None
            raise BackendError(f"backend process {self.command!r} closed its output")
        try:
            resp = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BackendError(f"malformed backend response: {line[:200]!r}") from exc
        if resp.get("request_id") != req["request_id"]:
            raise BackendError("backend response out of order")
        if "error" in resp:
            raise BackendError(str(resp["error"]))
        try:
            return [DetectionBox.from_json(b) for b in resp.get("boxes", [])]
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"invalid box in backend response: {exc}") from exc

    def close(self):
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)


def make_detector(spec: str, backend_id: str | None = None) -> DetectorBackend:
    """``mock:<ground_truth.jsonl>`` selects the in-process mock; otherwise a command line."""
    if spec.startswith("mock:"):
        return MockDetector(spec.split(":", 1)[1])
    return SubprocessDetector(spec, backend_id)


# --------------------------------------------------------------------------
# scoring

def _image_size(path: Path) -> tuple[int, int]:
    try:
        with Image.open(path) as im:
            im.load()
            return im.size
    except Exception as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from exc


def score_image(record: ImageRecord, image_path: str | os.PathLike, backend: DetectorBackend,
                prompt_template: str = DEFAULT_TEMPLATE, aggregation: str = "max") -> ScoreRecord:
    width, height = _image_size(Path(image_path))
    query = prompt_template.format(class_name=record.class_name)
    boxes = backend.detect(image_path, [query])
    for b in boxes:
        try:
            b.check_bounds(width, height)
        except ValueError as exc:
            raise BackendError(str(exc)) from None
    boxes = tuple(sorted(boxes, key=box_order))
    return ScoreRecord(record.image_id, record.class_id, aggregate_boxes(boxes, 0, aggregation),
                       boxes, backend.backend_id)


class ScoreCache:
    """Append-only JSONL cache; header line carries the backend identity."""

    def __init__(self, path: str | os.PathLike, header: dict):
        self.path = Path(path)
        self.header = header
        if self.path.exists() and self.path.stat().st_size > 0:
            got = next(iter(read_jsonl(self.path)), (0, None))[1]
            if got is None or got.get("backend_id") != header["backend_id"]:
                raise ScoreCacheError(
                    f"{self.path}: cache was written by backend "
                    f"{None if got is None else got.get('backend_id')!r}, not {header['backend_id']!r}")
            for key in ("template", "aggregation"):
                if got.get(key, header[key]) != header[key]:
                    raise ScoreCacheError(f"{self.path}: cache {key} {got.get(key)!r} "
                                          f"!= requested {header[key]!r}")
            truncate_torn_tail(self.path)
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            append_line(self.path, header)

    def load(self) -> dict[str, ScoreRecord]:
        out = {}
        for i, (_, obj) in enumerate(read_jsonl(self.path)):
            if i == 0:
                continue
            rec = ScoreRecord.from_json(obj)
            out[rec.image_id] = rec
        return out

    def append(self, rec: ScoreRecord) -> None:
        append_line(self.path, rec.to_json())


def batch_score(manifest: DatasetManifest, backend: DetectorBackend,
                cache_path: str | os.PathLike | None = None,
                prompt_template: str = DEFAULT_TEMPLATE, aggregation: str = "max",
                retries: int = 2, records: Sequence[ImageRecord] | None = None) -> ScoreTable:
    """Score every manifest record (or ``records``), reusing cached results.

    Unreadable images and backend failures that persist after ``retries``
    become Skip entries with a reason; they are never written to the cache.
    """
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    header = {"backend_id": backend.backend_id, "template": prompt_template,
              "aggregation": aggregation}
    cache = ScoreCache(cache_path, header) if cache_path else None
    done = cache.load() if cache else {}
    wanted = list(records) if records is not None else list(manifest.records)
    todo = [r for r in wanted if r.image_id not in done]

    def work(rec: ImageRecord):
        path = manifest.path_of(rec)
        last = None
        for attempt in range(retries + 1):
            try:
                out = score_image(rec, path, backend, prompt_template, aggregation)
            except ImageReadError as exc:
                return Skip(rec.image_id, f"unreadable image: {exc}")
            except BackendError as exc:
                last = exc
                log.warning("backend failed on %s (attempt %d): %s", rec.image_id, attempt + 1, exc)
                continue
            if cache:
                cache.append(out)
            return out
        return Skip(rec.image_id, f"backend failure after {retries + 1} attempts: {last}")

    threads = num_threads()
    if threads > 1 and len(todo) > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, todo))
    else:
        results = [work(r) for r in todo]

    recs = {r.image_id: done[r.image_id] for r in wanted if r.image_id in done}
    skips = []
    for res in results:
        if isinstance(res, Skip):
            skips.append(res)
        else:
            recs[res.image_id] = res
    return ScoreTable(backend.backend_id, recs, skips, prompt_template, aggregation)
