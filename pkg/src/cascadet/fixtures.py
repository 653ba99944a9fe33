"""Deterministic fixture weight archives for tests, demos and self-checks.

Archives start from the documented seeded generator and then get a fixed
set of adjustments that turn an arbitrary random network into a usable
test double:

* batch-norm variance entries are folded to ``|v| + 0.5`` (raw draws
  include negatives, which batch norm rejects);
* cascade weights are amplified (the raw ±0.1 draws attenuate to nothing
  over several layers) while the regression/landmark heads are scaled back
  down so predicted offsets stay small;
* stage class-head biases are pinned so each stage passes a trickle of
  windows rather than none or all of them.

Every adjustment is a fixed constant, so a fixture archive is a pure
function of its seed.
"""

from __future__ import annotations

import numpy as np

from .classifier import BackboneSpec, classifier_parameter_shapes
from .detector import cascade_parameter_shapes
from .weights import WeightArchive, random_init

CASCADE_SEED = 11
CLASSIFIER_SEED = 23

_CASCADE_GAIN = 4.0

# entry -> extra weight scale (applied after the global gain)
_HEAD_SCALES = {
    "pnet.reg.weight": 0.2,
    "rnet.prob_fc.weight": 0.11,
    "rnet.reg.weight": 0.015,
    "onet.prob_fc.weight": 0.05,
    "onet.reg.weight": 0.002,
    "onet.landmarks.weight": 0.0015,
}

# entry -> fixed bias vector ([not-face, face] for the class heads)
_HEAD_BIASES = {
    "pnet.prob_conv.bias": (-0.7, 0.7),
    "rnet.prob_fc.bias": (1.0, -1.0),
    "onet.prob_fc.bias": (0.6, -0.6),
    "pnet.reg.bias": (0.0,) * 4,
    "rnet.reg.bias": (0.0,) * 4,
    "onet.reg.bias": (0.0,) * 4,
    "onet.landmarks.bias": (0.5,) * 10,
}


def _fix_variances(archive: WeightArchive) -> None:
    for name in archive.names():
        if name.endswith("variance"):
            tensor = archive.get(name)
            tensor[...] = np.abs(tensor) + np.float32(0.5)


def fixture_cascade_archive(seed: int = CASCADE_SEED) -> WeightArchive:
    archive = random_init(
        cascade_parameter_shapes(), seed,
        metadata={"normalization": "(v - 127.5) / 128",
                  "stage_class_order": "nonface,face"})
    _fix_variances(archive)
    for name in archive.names():
        if name.endswith(".weight"):
            archive.get(name)[...] *= np.float32(_CASCADE_GAIN)
    for name, scale in _HEAD_SCALES.items():
        archive.get(name)[...] *= np.float32(scale)
    for name, bias in _HEAD_BIASES.items():
        archive.get(name)[...] = np.asarray(bias, dtype=np.float32)
    return archive


# Classifier fixture constants, tuned for the default backbone spec so the
# random network stays input-sensitive end to end: batch-norm gammas recenter
# to ~1 (raw +-0.1 draws squash signal tenfold per layer), depthwise filters
# get extra gain (only 9 taps each), and the recentered final-layer bias
# splits labels roughly evenly over textured crops.
_CLF_POINTWISE_GAIN = 1.5
_CLF_DEPTHWISE_GAIN = 3.0
_CLF_HEAD_GAIN = 10.0
_CLF_HEAD_BIAS = 45.95  # [Mask, NoMask] logit offsets +-this value


def fixture_classifier_archive(spec: BackboneSpec | None = None,
                               seed: int = CLASSIFIER_SEED) -> WeightArchive:
    spec = spec or BackboneSpec()
    archive = random_init(
        classifier_parameter_shapes(spec), seed,
        metadata={"normalization": "(v - 127.5) / 128",
                  "class_order": "Mask,NoMask",
                  "input_extent": str(spec.input_extent)})
    _fix_variances(archive)
    for name in archive.names():
        tensor = archive.get(name)
        if name.endswith("gamma"):
            tensor[...] = np.float32(1.0) + tensor
        elif "depthwise_weight" in name:
            tensor[...] *= np.float32(_CLF_DEPTHWISE_GAIN)
        elif name.startswith("head.") and name.endswith("weight"):
            tensor[...] *= np.float32(_CLF_HEAD_GAIN)
        elif name.endswith("weight"):
            tensor[...] *= np.float32(_CLF_POINTWISE_GAIN)
    archive.get("head.fc2.bias")[...] = np.array(
        [_CLF_HEAD_BIAS, -_CLF_HEAD_BIAS], dtype=np.float32)
    return archive


def synthetic_frame(seed: int, width: int = 640, height: int = 360) -> np.ndarray:
    """Deterministic (H, W, 3) uint8 test frame: a diagonal gradient with a
    dozen soft color blobs. Gives the fixture detector something textured to
    fire on without shipping binary image data."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    base = (xx * 0.3 + yy * 0.2) % 256
    blobs = np.zeros((height, width))
    margin_y = min(40, max(1, height // 3))
    margin_x = min(40, max(1, width // 3))
    for _ in range(12):
        cy = rng.integers(margin_y, max(height - margin_y, margin_y + 1))
        cx = rng.integers(margin_x, max(width - margin_x, margin_x + 1))
        radius = rng.integers(15, 50)
        blobs += 120 * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2)
                                / (2 * radius ** 2)))
    tint = np.array([1.0, 0.8, 0.6])
    img = base[..., None] + blobs[..., None] * tint
    return np.clip(img, 0, 255).astype(np.uint8)


def zeroed_classifier_archive(spec: BackboneSpec | None = None) -> WeightArchive:
    """All-zero parameters with unit variances: every residual-eligible block
    becomes an exact identity and the head emits [0.5, 0.5]."""
    spec = spec or BackboneSpec()
    archive = WeightArchive(metadata={"class_order": "Mask,NoMask"})
    for name, shape in classifier_parameter_shapes(spec):
        if name.endswith("variance"):
            archive.put(name, np.ones(shape, dtype=np.float32))
        else:
            archive.put(name, np.zeros(shape, dtype=np.float32))
    return archive
