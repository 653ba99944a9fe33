"""Three-stage cascaded face detector.

An image pyramid feeds a fully convolutional proposal network whose output
grid cells map to 12x12 windows at stride 2 in scaled coordinates. Two
refinement networks (24x24 and 48x48 crops) then re-score, regress and
finally localize five facial landmarks, with greedy non-maximum suppression
between every stage.

Pixel tensors entering the cascade are normalized as (v - 127.5) / 128;
:func:`frame_to_tensor` applies the convention.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from .tensor import (Network, Tensor, conv_layer, dense_layer, prelu_layer,
                     LayerSpec, parameter_shapes)

log = logging.getLogger(__name__)

PNET_EXTENT = 12
PNET_STRIDE = 2
RNET_EXTENT = 24
ONET_EXTENT = 48


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in original-frame pixels, origin top-left."""
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not all(np.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)):
            raise ValueError("bounding box coordinates must be finite")
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise ValueError(
                f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class RegressionOffsets:
    """Box corner offsets normalized by box width/height."""
    dx1: float
    dy1: float
    dx2: float
    dy2: float


ZERO_OFFSETS = RegressionOffsets(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Landmarks:
    """Five (x, y) frame-pixel points: eyes, nose, mouth corners."""
    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.points) != 5:
            raise ValueError(f"expected 5 landmark points, got {len(self.points)}")


@dataclass(frozen=True)
class FaceCandidate:
    box: BoundingBox
    score: float
    offsets: RegressionOffsets = ZERO_OFFSETS
    landmarks: Landmarks | None = None


@dataclass(frozen=True)
class PyramidLevel:
    scale: float
    image: Tensor


@dataclass(frozen=True)
class CascadeConfig:
    """Tunables the cascade depends on; defaults follow common practice."""
    min_face_size: int = 20
    pyramid_factor: float = 0.709
    threshold_pnet: float = 0.6
    threshold_rnet: float = 0.7
    threshold_onet: float = 0.7
    nms_pyramid: float = 0.5    # within one pyramid level, union mode
    nms_stage1: float = 0.7     # across levels, union mode
    nms_stage2: float = 0.7     # after refinement, union mode
    nms_stage3: float = 0.7     # after landmarks, min mode

    def __post_init__(self):
        if not 0 < self.pyramid_factor < 1:
            raise ValueError(
                f"pyramid_factor must be in (0, 1), got {self.pyramid_factor}")
        for name in ("threshold_pnet", "threshold_rnet", "threshold_onet",
                     "nms_pyramid", "nms_stage1", "nms_stage2", "nms_stage3"):
            value = getattr(self, name)
            if not 0 < value < 1:
                raise ValueError(f"{name} must be in (0, 1), got {value}")


def frame_to_tensor(pixels: np.ndarray) -> Tensor:
    """HxWx3 uint8 RGB -> normalized (1, 3, H, W) float32 tensor."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected HxWx3 pixels, got shape {arr.shape}")
    arr = (arr.astype(np.float32) - 127.5) / 128.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1)[None])


def bilinear_resize(image: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resample of an (N, C, H, W) tensor, edges clamped."""
    n, c, h, w = image.shape
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output extents must be positive, got {out_h}x{out_w}")
    src_y = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    src_x = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    src_y = np.clip(src_y, 0.0, h - 1.0)
    src_x = np.clip(src_x, 0.0, w - 1.0)
    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (src_y - y0).astype(np.float32)
    fx = (src_x - x0).astype(np.float32)

    rows0 = image[:, :, y0, :]
    rows1 = image[:, :, y1, :]
    top = rows0[:, :, :, x0] * (1 - fx) + rows0[:, :, :, x1] * fx
    bottom = rows1[:, :, :, x0] * (1 - fx) + rows1[:, :, :, x1] * fx
    out = top * (1 - fy)[None, None, :, None] + bottom * fy[None, None, :, None]
    return np.ascontiguousarray(out, dtype=np.float32)


def build_image_pyramid(frame: Tensor, config: CascadeConfig) -> list[PyramidLevel]:
    """Geometric pyramid with scales (12/min_face) * factor^k, all levels
    keeping min(H, W) * scale >= 12. Scaled extents are rounded up."""
    _, _, h, w = frame.shape
    if min(h, w) < config.min_face_size:
        log.warning("frame %dx%d smaller than min face size %d; empty pyramid",
                    w, h, config.min_face_size)
        return []
    levels = []
    scale = PNET_EXTENT / config.min_face_size
    while min(h, w) * scale >= PNET_EXTENT:
        sh = int(np.ceil(h * scale))
        sw = int(np.ceil(w * scale))
        levels.append(PyramidLevel(scale, bilinear_resize(frame, sh, sw)))
        scale *= config.pyramid_factor
    return levels


def build_pnet_layers() -> list[LayerSpec]:
    """Fully convolutional proposal network (12x12 receptive field).

    Output heads: ``pnet.prob`` is the 2-channel [not-face, face] softmax
    map and ``pnet.reg`` the 4-channel offset map; the effective window
    stride is 2 (one 2x2 stride-2 pool).
    """
    return [
        conv_layer("pnet.conv1", 3, 10, 3),
        prelu_layer("pnet.prelu1", 10),
        LayerSpec(kind="max-pool", name="pnet.pool1", kernel=2, stride=2),
        conv_layer("pnet.conv2", 10, 16, 3),
        prelu_layer("pnet.prelu2", 16),
        conv_layer("pnet.conv3", 16, 32, 3),
        prelu_layer("pnet.prelu3", 32),
        conv_layer("pnet.reg", 32, 4, 1, feeds_from="pnet.prelu3"),
        conv_layer("pnet.prob_conv", 32, 2, 1, feeds_from="pnet.prelu3"),
        LayerSpec(kind="softmax", name="pnet.prob"),
    ]


def build_rnet_layers() -> list[LayerSpec]:
    """Refinement network on 24x24 crops; heads ``rnet.prob``/``rnet.reg``."""
    return [
        conv_layer("rnet.conv1", 3, 28, 3),
        prelu_layer("rnet.prelu1", 28),
        LayerSpec(kind="max-pool", name="rnet.pool1", kernel=3, stride=2),
        conv_layer("rnet.conv2", 28, 48, 3),
        prelu_layer("rnet.prelu2", 48),
        LayerSpec(kind="max-pool", name="rnet.pool2", kernel=3, stride=2),
        conv_layer("rnet.conv3", 48, 64, 2),
        prelu_layer("rnet.prelu3", 64),
        dense_layer("rnet.fc", 64 * 2 * 2, 128),
        prelu_layer("rnet.prelu4", 128),
        dense_layer("rnet.reg", 128, 4, feeds_from="rnet.prelu4"),
        dense_layer("rnet.prob_fc", 128, 2, feeds_from="rnet.prelu4"),
        LayerSpec(kind="softmax", name="rnet.prob"),
    ]


def build_onet_layers() -> list[LayerSpec]:
    """Output network on 48x48 crops; heads prob/reg plus ``onet.landmarks``
    (10 values: five x coordinates then five y, normalized to the crop)."""
    return [
        conv_layer("onet.conv1", 3, 32, 3),
        prelu_layer("onet.prelu1", 32),
        LayerSpec(kind="max-pool", name="onet.pool1", kernel=3, stride=2),
        conv_layer("onet.conv2", 32, 64, 3),
        prelu_layer("onet.prelu2", 64),
        LayerSpec(kind="max-pool", name="onet.pool2", kernel=3, stride=2),
        conv_layer("onet.conv3", 64, 64, 3),
        prelu_layer("onet.prelu3", 64),
        LayerSpec(kind="max-pool", name="onet.pool3", kernel=2, stride=2),
        conv_layer("onet.conv4", 64, 128, 2),
        prelu_layer("onet.prelu4", 128),
        dense_layer("onet.fc", 128 * 2 * 2, 256),
        prelu_layer("onet.prelu5", 256),
        dense_layer("onet.reg", 256, 4, feeds_from="onet.prelu5"),
        dense_layer("onet.landmarks", 256, 10, feeds_from="onet.prelu5"),
        dense_layer("onet.prob_fc", 256, 2, feeds_from="onet.prelu5"),
        LayerSpec(kind="softmax", name="onet.prob"),
    ]


def cascade_parameter_shapes() -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    for layers in (build_pnet_layers(), build_rnet_layers(), build_onet_layers()):
        shapes.extend(parameter_shapes(layers))
    return shapes


@dataclass(frozen=True)
class CascadeNetworks:
    pnet: Network
    rnet: Network
    onet: Network

    @classmethod
    def from_archive(cls, archive) -> "CascadeNetworks":
        return cls(pnet=Network(build_pnet_layers(), archive),
                   rnet=Network(build_rnet_layers(), archive,
                                input_shape=(3, RNET_EXTENT, RNET_EXTENT)),
                   onet=Network(build_onet_layers(), archive,
                                input_shape=(3, ONET_EXTENT, ONET_EXTENT)))


def generate_proposals(level: PyramidLevel, pnet: Network,
                       threshold: float) -> list[FaceCandidate]:
    """Candidates from one pyramid level, in row-major grid order.

    Grid cell (r, c) corresponds to the 12x12 window at (2c, 2r) in scaled
    coordinates; boxes are mapped back to frame pixels by dividing by the
    level scale.
    """
    prob_map, taps = pnet.forward(level.image, taps=("pnet.reg",))
    reg_map = taps["pnet.reg"]
    face_prob = prob_map[0, 1]
    rows, cols = np.nonzero(face_prob >= threshold)
    candidates = []
    inv = 1.0 / level.scale
    for r, c in zip(rows.tolist(), cols.tolist()):
        box = BoundingBox(
            x1=PNET_STRIDE * c * inv,
            y1=PNET_STRIDE * r * inv,
            x2=(PNET_STRIDE * c + PNET_EXTENT) * inv,
            y2=(PNET_STRIDE * r + PNET_EXTENT) * inv)
        offsets = RegressionOffsets(*(float(v) for v in reg_map[0, :, r, c]))
        candidates.append(FaceCandidate(box=box, score=float(face_prob[r, c]),
                                        offsets=offsets))
    return candidates


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def _overlap(a: BoundingBox, b: BoundingBox, mode: str) -> float:
    if mode == "union":
        return iou(a, b)
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    return (ix * iy) / min(a.area, b.area)


def nms(candidates: list[FaceCandidate], threshold: float,
        mode: str = "union") -> list[FaceCandidate]:
    """Greedy suppression: keep the best-scoring candidate, drop everything
    overlapping it by more than ``threshold``, repeat.

    ``mode`` selects the overlap measure: IoU ("union") or intersection over
    the smaller area ("min"). Ties in score keep the lower original index.
    Survivors come back in descending score order.
    """
    if mode not in ("union", "min"):
        raise ValueError(f"unknown NMS mode {mode!r}")
    if not 0 < threshold < 1:
        raise ValueError(f"NMS threshold must be in (0, 1), got {threshold}")
    if not candidates:
        return []
    x1 = np.array([c.box.x1 for c in candidates])
    y1 = np.array([c.box.y1 for c in candidates])
    x2 = np.array([c.box.x2 for c in candidates])
    y2 = np.array([c.box.y2 for c in candidates])
    scores = np.array([c.score for c in candidates])
    areas = (x2 - x1) * (y2 - y1)
    # Descending score; ties keep the lower original index.
    order = np.lexsort((np.arange(len(candidates)), -scores))
    kept: list[int] = []
    while order.size:
        i = order[0]
        kept.append(int(i))
        rest = order[1:]
        ix = np.maximum(0.0, np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]))
        iy = np.maximum(0.0, np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]))
        inter = ix * iy
        if mode == "union":
            overlap = inter / (areas[i] + areas[rest] - inter)
        else:
            overlap = inter / np.minimum(areas[i], areas[rest])
        order = rest[overlap <= threshold]
    return [candidates[i] for i in kept]


def calibrate(box: BoundingBox,
              offsets: RegressionOffsets) -> BoundingBox | None:
    """Shift box corners by width/height-scaled offsets.

    Returns None (discard signal) when the shifted box would collapse.
    """
    w, h = box.width, box.height
    x1 = box.x1 + offsets.dx1 * w
    y1 = box.y1 + offsets.dy1 * h
    x2 = box.x2 + offsets.dx2 * w
    y2 = box.y2 + offsets.dy2 * h
    if x2 <= x1 or y2 <= y1:
        return None
    return BoundingBox(x1, y1, x2, y2)


def square_pad(box: BoundingBox) -> BoundingBox:
    """Smallest square with the same center and side max(width, height)."""
    side = max(box.width, box.height)
    cx = (box.x1 + box.x2) / 2.0
    cy = (box.y1 + box.y2) / 2.0
    half = side / 2.0
    return BoundingBox(cx - half, cy - half, cx + half, cy + half)


def crop_resize_batch(frame: Tensor, boxes: list[BoundingBox],
                      out_extent: int) -> Tensor:
    """Bilinearly sample each box region of the frame into an E x E crop.

    Returns a (len(boxes), C, E, E) batch. Sample points outside the frame
    contribute zero, so boxes hanging past the edges come back zero-padded.
    """
    if out_extent < 1:
        raise ValueError(f"out_extent must be positive, got {out_extent}")
    _, c, h, w = frame.shape
    e = out_extent
    if not boxes:
        return np.zeros((0, c, e, e), np.float32)
    x1 = np.array([b.x1 for b in boxes])[:, None]
    y1 = np.array([b.y1 for b in boxes])[:, None]
    bw = np.array([b.width for b in boxes])[:, None]
    bh = np.array([b.height for b in boxes])[:, None]
    grid = np.arange(e, dtype=np.float64)[None, :] + 0.5
    src_x = x1 + grid * (bw / e) - 0.5       # (N, E)
    src_y = y1 + grid * (bh / e) - 0.5
    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    fx = (src_x - x0).astype(np.float32)
    fy = (src_y - y0).astype(np.float32)

    image = frame[0]  # (C, H, W)

    def gather(yy: np.ndarray, xx: np.ndarray) -> Tensor:
        """Pixels at (yy[n, i], xx[n, j]) -> (C, N, E, E), zero outside."""
        valid = ((yy >= 0) & (yy < h))[:, :, None] & ((xx >= 0) & (xx < w))[:, None, :]
        vals = image[:, np.clip(yy, 0, h - 1)[:, :, None],
                     np.clip(xx, 0, w - 1)[:, None, :]]
        return vals * valid[None]

    wx0, wx1 = (1 - fx)[:, None, :], fx[:, None, :]
    top = gather(y0, x0) * wx0 + gather(y0, x0 + 1) * wx1
    bottom = gather(y0 + 1, x0) * wx0 + gather(y0 + 1, x0 + 1) * wx1
    out = top * (1 - fy)[:, :, None] + bottom * fy[:, :, None]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3), dtype=np.float32)


def crop_resize(frame: Tensor, box: BoundingBox, out_extent: int) -> Tensor:
    """Single-box variant of :func:`crop_resize_batch`: a (1, C, E, E) crop."""
    return crop_resize_batch(frame, [box], out_extent)


def _head_names(network: Network) -> tuple[str, str, str | None]:
    prefix = network.layers[0].name.split(".", 1)[0]
    landmarks = f"{prefix}.landmarks"
    has_landmarks = any(layer.name == landmarks for layer in network.layers)
    return f"{prefix}.prob", f"{prefix}.reg", landmarks if has_landmarks else None


def refine_stage(frame: Tensor, candidates: list[FaceCandidate],
                 network: Network, input_extent: int, threshold: float,
                 with_landmarks: bool = False) -> list[FaceCandidate]:
    """Re-score candidates on square crops; keep, calibrate and annotate.

    Each candidate is square-padded, cropped at ``input_extent`` and scored;
    survivors (score >= threshold) get their box recalibrated by the head's
    offsets. Landmarks, when requested, are mapped from crop-normalized
    coordinates back to the frame using the pre-calibration square box.
    """
    if not candidates:
        return []
    squares = [square_pad(cand.box) for cand in candidates]
    batch = crop_resize_batch(frame, squares, input_extent)
    _, reg_name, landmark_name = _head_names(network)
    taps = (reg_name,) + ((landmark_name,) if with_landmarks else ())
    probs, tapped = network.forward(batch, taps=taps)
    scores = probs[:, 1]
    regs = tapped[reg_name]
    lands = tapped.get(landmark_name) if with_landmarks else None

    refined = []
    for i, sq in enumerate(squares):
        score = float(scores[i])
        if score < threshold:
            continue
        offsets = RegressionOffsets(*(float(v) for v in regs[i]))
        box = calibrate(sq, offsets)
        if box is None:
            continue
        landmarks = None
        if lands is not None:
            pts = tuple(
                (sq.x1 + float(lands[i, k]) * sq.width,
                 sq.y1 + float(lands[i, k + 5]) * sq.height)
                for k in range(5))
            landmarks = Landmarks(points=pts)
        refined.append(FaceCandidate(box=box, score=score, offsets=offsets,
                                     landmarks=landmarks))
    return refined


def _clamp_to_frame(candidates: list[FaceCandidate], width: int,
                    height: int) -> list[FaceCandidate]:
    clamped = []
    for cand in candidates:
        x1 = min(max(cand.box.x1, 0.0), float(width))
        y1 = min(max(cand.box.y1, 0.0), float(height))
        x2 = min(max(cand.box.x2, 0.0), float(width))
        y2 = min(max(cand.box.y2, 0.0), float(height))
        if x2 <= x1 or y2 <= y1:
            continue
        clamped.append(replace(cand, box=BoundingBox(x1, y1, x2, y2)))
    return clamped


def detect_faces(frame: Tensor, networks: CascadeNetworks,
                 config: CascadeConfig, timings: dict | None = None,
                 trace: dict | None = None) -> list[FaceCandidate]:
    """Full cascade on one normalized frame tensor.

    Pipeline: pyramid -> proposals with per-level then cross-level NMS and
    calibration -> 24x24 refinement + NMS -> 48x48 refinement with landmarks
    + min-mode NMS -> clamp to frame, order by descending score then index.

    When ``timings`` is given, per-stage wall-clock seconds are accumulated
    into it under keys pyramid/stage1/stage2/stage3. When ``trace`` is
    given, per-stage candidate counts are recorded in it.
    """
    def tick(stage: str, since: float) -> float:
        now = time.perf_counter()
        if timings is not None:
            timings[stage] = timings.get(stage, 0.0) + (now - since)
        return now

    _, _, height, width = frame.shape
    t = time.perf_counter()
    pyramid = build_image_pyramid(frame, config)
    t = tick("pyramid", t)

    raw_proposals = 0
    stage1: list[FaceCandidate] = []
    for level in pyramid:
        proposals = generate_proposals(level, networks.pnet, config.threshold_pnet)
        raw_proposals += len(proposals)
        stage1.extend(nms(proposals, config.nms_pyramid, "union"))
    stage1 = nms(stage1, config.nms_stage1, "union")
    calibrated = []
    for cand in stage1:
        box = calibrate(cand.box, cand.offsets)
        if box is not None:
            calibrated.append(replace(cand, box=box))
    t = tick("stage1", t)

    stage2 = refine_stage(frame, calibrated, networks.rnet, RNET_EXTENT,
                          config.threshold_rnet)
    stage2 = nms(stage2, config.nms_stage2, "union")
    t = tick("stage2", t)

    stage3 = refine_stage(frame, stage2, networks.onet, ONET_EXTENT,
                          config.threshold_onet, with_landmarks=True)
    stage3 = nms(stage3, config.nms_stage3, "min")
    tick("stage3", t)

    final = _clamp_to_frame(stage3, width, height)
    order = sorted(range(len(final)), key=lambda i: (-final[i].score, i))
    if trace is not None:
        trace.update(levels=len(pyramid), proposals=raw_proposals,
                     stage1=len(calibrated), stage2=len(stage2),
                     stage3=len(stage3), final=len(final))
    return [final[i] for i in order]
