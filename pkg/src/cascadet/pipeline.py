"""Frame-sequence pipeline: read PPM frames, detect, classify, annotate.

Frames arrive as a manifest (one PPM path per line) rather than container
video; extraction from a video file is a one-liner with any external tool
(e.g. ``ffmpeg -i clip.mp4 frames/%04d.ppm``). Frames are processed by a
bounded worker pool over immutable shared networks and all outputs are
written in frame-index order, so results are byte-identical regardless of
worker count.
"""

from __future__ import annotations

import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import font
from .classifier import BackboneSpec, MaskLabel, build_classifier, classify_all
from .detector import (BoundingBox, CascadeConfig, CascadeNetworks,
                       detect_faces, frame_to_tensor)
from .tensor import Network
from .weights import load as load_archive

GREEN = (0, 255, 0)
RED = (255, 0, 0)
OUTLINE_THICKNESS = 2
LABEL_GAP = 2


class FrameReadError(Exception):
    """A manifest entry could not be turned into a frame."""


class ConfigError(Exception):
    """The run configuration file is malformed."""


@dataclass(frozen=True)
class Frame:
    index: int
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8 RGB
    source: str = ""

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width, 3):
            raise ValueError(
                f"frame {self.index}: pixel block {self.pixels.shape} does not "
                f"match {self.height}x{self.width}x3")


@dataclass(frozen=True)
class Detection:
    frame_index: int
    x1: int
    y1: int
    x2: int
    y2: int
    label: MaskLabel
    confidence: float
    face_score: float

    def to_json(self) -> str:
        return json.dumps({
            "frame": self.frame_index,
            "x1": self.x1, "y1": self.y1, "x2": self.x2, "y2": self.y2,
            "label": self.label.value,
            "confidence": self.confidence,
            "face_score": self.face_score,
        })


def parse_ppm(data: bytes, origin: str = "<bytes>") -> np.ndarray:
    """Binary PPM (P6, maxval 255) -> (H, W, 3) uint8 pixels."""
    pos = 0

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(data):
            if data[pos:pos + 1].isspace():
                pos += 1
            elif data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos:pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FrameReadError(f"{origin}: truncated PPM header")
        return data[start:pos]

    magic = next_token()
    if magic != b"P6":
        raise FrameReadError(f"{origin}: not a binary PPM (magic {magic!r})")
    try:
        width = int(next_token())
        height = int(next_token())
        maxval = int(next_token())
    except ValueError as exc:
        raise FrameReadError(f"{origin}: malformed PPM header") from exc
    if width < 1 or height < 1:
        raise FrameReadError(f"{origin}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise FrameReadError(f"{origin}: maxval {maxval} unsupported (need 255)")
    pos += 1  # single whitespace after maxval
    expected = width * height * 3
    body = data[pos:pos + expected]
    if len(body) != expected:
        raise FrameReadError(
            f"{origin}: pixel data truncated ({len(body)} of {expected} bytes)")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path: str | Path, pixels: np.ndarray) -> None:
    h, w = pixels.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(pixels).tobytes())


def list_manifest(manifest_path: str | Path) -> list[tuple[int, Path, str]]:
    """Manifest entries as (line number, resolved path, raw entry) tuples.

    Relative frame paths resolve against the manifest's directory; blank
    lines and '#' comments are skipped.
    """
    manifest_path = Path(manifest_path)
    try:
        lines = manifest_path.read_text().splitlines()
    except OSError as exc:
        raise FrameReadError(f"cannot read manifest {manifest_path}: {exc}")
    entries = []
    for lineno, raw in enumerate(lines, start=1):
        entry = raw.strip()
        if not entry or entry.startswith("#"):
            continue
        path = Path(entry)
        if not path.is_absolute():
            path = manifest_path.parent / path
        entries.append((lineno, path, entry))
    return entries


def _load_frame(index: int, lineno: int, path: Path, entry: str) -> Frame:
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FrameReadError(f"manifest line {lineno}: {exc}")
    pixels = parse_ppm(data, f"manifest line {lineno} ({entry})")
    h, w = pixels.shape[:2]
    return Frame(index=index, width=w, height=h, pixels=pixels, source=entry)


def read_frames(manifest_path: str | Path):
    """Yield frames listed in the manifest, indexed from 0 in file order.

    Errors name the offending manifest line. The stream stops at the first
    unreadable entry; the batch pipeline isolates such failures per frame
    instead via :func:`run`.
    """
    for index, (lineno, path, entry) in enumerate(list_manifest(manifest_path)):
        yield _load_frame(index, lineno, path, entry)


def process_frame(frame: Frame, networks: CascadeNetworks, classifier: Network,
                  cascade_config: CascadeConfig, backbone_spec: BackboneSpec,
                  timings: dict | None = None) -> list[Detection]:
    """Detect and classify every face in one frame.

    Boxes are clamped to the frame, rounded to integer pixels, and ordered
    by descending face score then detection index; boxes that collapse
    under rounding are dropped.
    """
    tensor = frame_to_tensor(frame.pixels)
    faces = detect_faces(tensor, networks, cascade_config, timings=timings)
    start = time.perf_counter()
    pairs = classify_all(classifier, tensor, faces,
                         input_extent=backbone_spec.input_extent)
    if timings is not None:
        timings["classifier"] = (timings.get("classifier", 0.0)
                                 + time.perf_counter() - start)
    detections = []
    for face, prediction in pairs:
        box = _round_box(face.box, frame.width, frame.height)
        if box is None:
            continue
        detections.append(Detection(
            frame_index=frame.index, x1=box[0], y1=box[1], x2=box[2], y2=box[3],
            label=prediction.label, confidence=prediction.confidence,
            face_score=face.score))
    return detections


def _round_box(box: BoundingBox, width: int,
               height: int) -> tuple[int, int, int, int] | None:
    x1 = max(0, min(width, math.floor(box.x1 + 0.5)))
    y1 = max(0, min(height, math.floor(box.y1 + 0.5)))
    x2 = max(0, min(width, math.floor(box.x2 + 0.5)))
    y2 = max(0, min(height, math.floor(box.y2 + 0.5)))
    if x2 <= x1 or y2 <= y1:
        return None
    return x1, y1, x2, y2


def annotate(frame: Frame, detections: list[Detection]) -> Frame:
    """New frame with a colored 2-pixel outline and label per detection.

    Mask boxes are pure green, NoMask pure red; the 5x7 bitmap label (class
    text plus confidence to two decimals) sits above the box, or just under
    the box's top border when the box touches the frame top. All drawing is
    clipped to the frame.
    """
    if not detections:
        return frame
    pixels = frame.pixels.copy()
    h, w = frame.height, frame.width
    for det in detections:
        color = GREEN if det.label is MaskLabel.MASK else RED
        _draw_rect(pixels, det.x1, det.y1, det.x2, det.y2, color)
        text = f"{det.label.display} {det.confidence:.2f}"
        ty = det.y1 - font.GLYPH_HEIGHT - LABEL_GAP
        if ty < 0:
            ty = det.y1 + OUTLINE_THICKNESS + 1
        for dx, dy in font.text_pixels(text):
            px, py = det.x1 + dx, ty + dy
            if 0 <= px < w and 0 <= py < h:
                pixels[py, px] = color
    return Frame(index=frame.index, width=frame.width, height=frame.height,
                 pixels=pixels, source=frame.source)


def _draw_rect(pixels: np.ndarray, x1: int, y1: int, x2: int, y2: int,
               color: tuple[int, int, int]):
    """2-pixel outline drawn just inside [x1, x2) x [y1, y2), clipped."""
    h, w = pixels.shape[:2]
    cx1, cy1 = max(0, x1), max(0, y1)
    cx2, cy2 = min(w, x2), min(h, y2)
    if cx2 <= cx1 or cy2 <= cy1:
        return
    t = OUTLINE_THICKNESS
    pixels[cy1:min(cy1 + t, cy2), cx1:cx2] = color
    pixels[max(cy2 - t, cy1):cy2, cx1:cx2] = color
    pixels[cy1:cy2, cx1:min(cx1 + t, cx2)] = color
    pixels[cy1:cy2, max(cx2 - t, cx1):cx2] = color


@dataclass
class RunConfig:
    manifest: Path
    output_dir: Path
    cascade_weights: Path
    classifier_weights: Path
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    workers: int = 1
    annotate: bool = True


_CASCADE_KEYS = {
    "min_face_size": int, "pyramid_factor": float,
    "threshold_pnet": float, "threshold_rnet": float, "threshold_onet": float,
    "nms_pyramid": float, "nms_stage1": float, "nms_stage2": float,
    "nms_stage3": float,
}
_BACKBONE_KEYS = {
    "classifier_extent": ("input_extent", int),
    "width_multiplier": ("width_multiplier", float),
    "head_hidden": ("head_hidden", int),
}


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


def parse_config(path: str | Path, env: dict | None = None) -> RunConfig:
    """key=value config file; CASCADET_<KEY> environment entries override."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    for key, value in (env or {}).items():
        if key.startswith("CASCADET_"):
            values[key[len("CASCADET_"):].lower()] = value

    required = ("manifest", "output_dir", "cascade_weights", "classifier_weights")
    missing = [key for key in required if key not in values]
    if missing:
        raise ConfigError(f"{path}: missing required keys: {', '.join(missing)}")

    known = set(required) | set(_CASCADE_KEYS) | set(_BACKBONE_KEYS)
    known |= {"workers", "annotate"}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"{path}: unknown keys: {', '.join(sorted(unknown))}")

    base = path.parent

    def as_path(value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else base / p

    try:
        cascade_kwargs = {key: conv(values[key])
                          for key, conv in _CASCADE_KEYS.items() if key in values}
        backbone_kwargs = {dest: conv(values[key])
                           for key, (dest, conv) in _BACKBONE_KEYS.items()
                           if key in values}
        return RunConfig(
            manifest=as_path(values["manifest"]),
            output_dir=as_path(values["output_dir"]),
            cascade_weights=as_path(values["cascade_weights"]),
            classifier_weights=as_path(values["classifier_weights"]),
            cascade=CascadeConfig(**cascade_kwargs),
            backbone=BackboneSpec(**backbone_kwargs),
            workers=int(values.get("workers", "1")),
            annotate=_parse_bool(values.get("annotate", "true")),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}")


@dataclass
class RunSummary:
    frames: int = 0
    failed_frames: int = 0
    detections: int = 0
    wall_time_s: float = 0.0
    stage_seconds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "frames": self.frames,
            "failed_frames": self.failed_frames,
            "detections": self.detections,
            "wall_time_s": round(self.wall_time_s, 3),
            "stage_seconds": {k: round(v, 3)
                              for k, v in sorted(self.stage_seconds.items())},
        }


def run(config: RunConfig) -> RunSummary:
    """Process the whole manifest; write annotated frames, a JSONL log and
    summary.json into the output directory.

    Raises FrameReadError when more than half the frames fail. Frame-level
    failures are reported to stderr and skipped.
    """
    for path in (config.manifest, config.cascade_weights,
                 config.classifier_weights):
        if not Path(path).exists():
            raise FrameReadError(f"required path does not exist: {path}")
    started = time.perf_counter()
    networks = CascadeNetworks.from_archive(load_archive(config.cascade_weights))
    clf = build_classifier(config.backbone, load_archive(config.classifier_weights))
    config.output_dir.mkdir(parents=True, exist_ok=True)

    entries = list_manifest(config.manifest)
    summary = RunSummary(frames=len(entries))

    def job(index: int, lineno: int, path: Path, entry: str):
        frame = _load_frame(index, lineno, path, entry)
        timings: dict = {}
        detections = process_frame(frame, networks, clf, config.cascade,
                                   config.backbone, timings=timings)
        annotated = annotate(frame, detections) if config.annotate else None
        return frame, detections, timings, annotated

    def collect(index: int, entry: str, resolve):
        try:
            return resolve()
        except Exception as exc:  # frame-level isolation
            print(f"frame {index} ({entry}): {exc}", file=sys.stderr)
            return None

    if config.workers <= 1:
        outcomes = [
            collect(i, entry, lambda i=i, ln=lineno, p=path, e=entry:
                    job(i, ln, p, e))
            for i, (lineno, path, entry) in enumerate(entries)]
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(job, i, lineno, path, entry)
                       for i, (lineno, path, entry) in enumerate(entries)]
            outcomes = [collect(i, entries[i][2], future.result)
                        for i, future in enumerate(futures)]

    log_path = config.output_dir / "detections.jsonl"
    with open(log_path, "w") as log:
        for outcome in outcomes:
            if outcome is None:
                summary.failed_frames += 1
                continue
            frame, detections, timings, annotated = outcome
            for det in detections:
                log.write(det.to_json() + "\n")
            summary.detections += len(detections)
            for stage, seconds in timings.items():
                summary.stage_seconds[stage] = (
                    summary.stage_seconds.get(stage, 0.0) + seconds)
            if annotated is not None:
                name = Path(frame.source).name or f"frame{frame.index:05d}.ppm"
                write_ppm(config.output_dir / name, annotated.pixels)

    summary.wall_time_s = time.perf_counter() - started
    (config.output_dir / "summary.json").write_text(
        json.dumps(summary.to_dict(), indent=2) + "\n")
    if summary.frames and summary.failed_frames * 2 > summary.frames:
        raise FrameReadError(
            f"{summary.failed_frames} of {summary.frames} frames failed")
    return summary
