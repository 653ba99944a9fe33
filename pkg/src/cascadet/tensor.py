"""Minimal deterministic tensor operators and a sequential network container.

Tensors are plain ``numpy.ndarray`` objects in float32, laid out
batch-channel-height-width (width fastest-varying). Every operator is a pure
function: inputs are never modified and repeated calls on identical inputs
return bit-identical results. Dense reductions go through single-threaded
BLAS (pinned in :mod:`cascadet`), which keeps the reduction order fixed
across runs and caller thread counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Tensor = np.ndarray


class NetworkError(ValueError):
    """Raised when a network cannot be constructed against its weights."""


def _as_f32(x) -> Tensor:
    return np.asarray(x, dtype=np.float32)


def _out_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def _check_conv_geometry(op: str, h: int, w: int, kh: int, kw: int,
                         stride: int, padding: int) -> tuple[int, int]:
    if stride < 1:
        raise ValueError(f"{op}: stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"{op}: padding must be non-negative, got {padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(
            f"{op}: padded input {h + 2 * padding}x{w + 2 * padding} is "
            f"smaller than the {kh}x{kw} kernel")
    return _out_extent(h, kh, stride, padding), _out_extent(w, kw, stride, padding)


def _pad_spatial(x: Tensor, padding: int) -> Tensor:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(x: Tensor, kh: int, kw: int, stride: int) -> Tensor:
    """View of all kernel-sized windows: (N, C, outH, outW, kH, kW)."""
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride, :, :]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2D convolution (cross-correlation) over an NCHW tensor.

    ``weight`` is (outC, inC, kH, kW); the optional ``bias`` is (outC,).
    Output spatial extent is floor((in + 2*padding - k)/stride) + 1.
    """
    x = _as_f32(x)
    weight = _as_f32(weight)
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be rank 4, got rank {x.ndim}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be rank 4, got rank {weight.ndim}")
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = weight.shape
    if c != in_c:
        raise ValueError(
            f"conv2d: input has {c} channels but weight expects {in_c}")
    out_h, out_w = _check_conv_geometry("conv2d", h, w, kh, kw, stride, padding)
    if bias is not None:
        bias = _as_f32(bias)
        if bias.shape != (out_c,):
            raise ValueError(
                f"conv2d: bias shape {bias.shape} does not match {out_c} "
                "output channels")

    win = _windows(_pad_spatial(x, padding), kh, kw, stride)
    # One GEMM: (N*outH*outW, C*kH*kW) x (C*kH*kW, outC).
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(n * out_h * out_w, c * kh * kw)
    out = cols @ weight.reshape(out_c, -1).T
    if bias is not None:
        out = out + bias
    return np.ascontiguousarray(
        out.reshape(n, out_h, out_w, out_c).transpose(0, 3, 1, 2))


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel 2D convolution; weight is (C, 1, kH, kW)."""
    x = _as_f32(x)
    weight = _as_f32(weight)
    if x.ndim != 4:
        raise ValueError(f"depthwise_conv2d: input must be rank 4, got {x.ndim}")
    if weight.ndim != 4 or weight.shape[1] != 1:
        raise ValueError(
            f"depthwise_conv2d: weight must be (C, 1, kH, kW), got {weight.shape}")
    n, c, h, w = x.shape
    wc, _, kh, kw = weight.shape
    if c != wc:
        raise ValueError(
            f"depthwise_conv2d: input has {c} channels but weight has {wc}")
    _check_conv_geometry("depthwise_conv2d", h, w, kh, kw, stride, padding)
    if bias is not None:
        bias = _as_f32(bias)
        if bias.shape != (c,):
            raise ValueError(
                f"depthwise_conv2d: bias shape {bias.shape} does not match "
                f"{c} channels")

    win = _windows(_pad_spatial(x, padding), kh, kw, stride)
    out = np.einsum("nchwij,cij->nchw", win, weight[:, 0], optimize=False)
    out = np.ascontiguousarray(out, dtype=np.float32)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


def pointwise_conv2d(x: Tensor, weight: Tensor,
                     bias: Tensor | None = None) -> Tensor:
    """1x1 convolution: a per-pixel linear map across channels."""
    x = _as_f32(x)
    weight = _as_f32(weight)
    if weight.ndim != 4 or weight.shape[2:] != (1, 1):
        raise ValueError(
            f"pointwise_conv2d: weight must be (outC, inC, 1, 1), got {weight.shape}")
    n, c, h, w = x.shape
    out_c, in_c = weight.shape[:2]
    if c != in_c:
        raise ValueError(
            f"pointwise_conv2d: input has {c} channels but weight expects {in_c}")
    out = np.matmul(weight[:, :, 0, 0], x.reshape(n, c, h * w))
    if bias is not None:
        bias = _as_f32(bias)
        if bias.shape != (out_c,):
            raise ValueError(
                f"pointwise_conv2d: bias shape {bias.shape} does not match "
                f"{out_c} output channels")
        out = out + bias[None, :, None]
    return np.ascontiguousarray(out.reshape(n, out_c, h, w))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mean: Tensor,
               variance: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Inference-mode batch normalization with stored per-channel statistics."""
    if epsilon < 0:
        raise ValueError(f"batch_norm: epsilon must be non-negative, got {epsilon}")
    x = _as_f32(x)
    gamma, beta = _as_f32(gamma), _as_f32(beta)
    mean, variance = _as_f32(mean), _as_f32(variance)
    if np.any(variance < 0):
        raise ValueError("batch_norm: variance must be non-negative")
    if np.any(variance + np.float32(epsilon) == 0):
        raise ValueError("batch_norm: variance + epsilon must be positive")
    c = x.shape[1]
    for name, v in (("gamma", gamma), ("beta", beta), ("mean", mean),
                    ("variance", variance)):
        if v.shape != (c,):
            raise ValueError(
                f"batch_norm: {name} shape {v.shape} does not match {c} channels")
    shape = (1, c) + (1,) * (x.ndim - 2)
    scale = (gamma / np.sqrt(variance + np.float32(epsilon))).reshape(shape)
    shift = beta.reshape(shape) - mean.reshape(shape) * scale
    return x * scale + shift


def relu6(x: Tensor) -> Tensor:
    """Clamp to [0, 6] elementwise."""
    return np.clip(_as_f32(x), 0.0, 6.0)


def relu(x: Tensor) -> Tensor:
    """Clamp negatives to zero elementwise."""
    return np.maximum(_as_f32(x), np.float32(0.0))


def prelu(x: Tensor, alpha: Tensor) -> Tensor:
    """Parametric ReLU with one slope per channel (axis 1)."""
    x = _as_f32(x)
    alpha = _as_f32(alpha)
    c = x.shape[1] if x.ndim > 1 else x.shape[0]
    if alpha.shape != (c,):
        raise ValueError(
            f"prelu: alpha shape {alpha.shape} does not match {c} channels")
    if x.ndim > 1:
        alpha = alpha.reshape((1, c) + (1,) * (x.ndim - 2))
    # max(x, 0) + alpha * min(x, 0): same values as the piecewise form,
    # without materializing a boolean mask.
    out = np.maximum(x, 0.0)
    neg = np.minimum(x, 0.0)
    neg *= alpha
    out += neg
    return out


def max_pool2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Max over kernel x kernel windows; no padding, floor output extents."""
    x = _as_f32(x)
    if x.ndim != 4:
        raise ValueError(f"max_pool2d: input must be rank 4, got {x.ndim}")
    h, w = x.shape[2:]
    out_h, out_w = _check_conv_geometry("max_pool2d", h, w, kernel, kernel,
                                        stride, 0)
    # Fold the k*k window offsets with elementwise maxima over strided
    # slices; far faster than reducing a 6-D window view.
    out = None
    for ky in range(kernel):
        for kx in range(kernel):
            patch = x[:, :, ky:ky + stride * out_h:stride,
                      kx:kx + stride * out_w:stride]
            out = patch.copy() if out is None else np.maximum(out, patch)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the full spatial extent per channel -> (N, C, 1, 1)."""
    x = _as_f32(x)
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool: input must be rank 4, got {x.ndim}")
    return x.mean(axis=(2, 3), keepdims=True, dtype=np.float32)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map weight @ x + bias; weight is (out, in).

    Rank-4 input is flattened channel-major to (N, C*H*W); rank-1 input maps
    to a rank-1 output.
    """
    x = _as_f32(x)
    weight = _as_f32(weight)
    if weight.ndim != 2:
        raise ValueError(f"dense: weight must be rank 2, got {weight.ndim}")
    single = x.ndim == 1
    if x.ndim == 4:
        x = x.reshape(x.shape[0], -1)
    elif single:
        x = x.reshape(1, -1)
    elif x.ndim != 2:
        raise ValueError(f"dense: input must be rank 1, 2 or 4, got {x.ndim}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"dense: input has {x.shape[1]} features but weight expects "
            f"{weight.shape[1]}")
    out = x @ weight.T
    if bias is not None:
        bias = _as_f32(bias)
        if bias.shape != (weight.shape[0],):
            raise ValueError(
                f"dense: bias shape {bias.shape} does not match "
                f"{weight.shape[0]} outputs")
        out = out + bias
    return out[0] if single else out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically guarded softmax along ``axis`` (max-subtracted)."""
    x = _as_f32(x)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    mean: Tensor
    variance: Tensor
    epsilon: float = 1e-5

    def apply(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.mean, self.variance,
                          self.epsilon)


@dataclass(frozen=True)
class BottleneckParams:
    """Parameters of one expand -> depthwise -> project unit.

    ``expand_weight``/``expand_norm`` are None when the expansion factor is 1
    (the unit then starts directly with the depthwise filter).
    """
    depthwise_weight: Tensor
    depthwise_norm: BatchNormParams
    project_weight: Tensor
    project_norm: BatchNormParams
    expand_weight: Tensor | None = None
    expand_norm: BatchNormParams | None = None


def bottleneck_block(x: Tensor, params: BottleneckParams, expansion: int,
                     stride: int, residual: bool) -> Tensor:
    """Inverted bottleneck: 1x1 expand, depthwise, 1x1 linear projection.

    Batch norm follows each convolution; ReLU6 follows the first two only.
    The projection output stays linear, and with ``residual`` the input is
    added to it (requires stride 1 and matching channel counts).
    """
    x = _as_f32(x)
    if stride not in (1, 2):
        raise ValueError(f"bottleneck_block: stride must be 1 or 2, got {stride}")
    if expansion < 1:
        raise ValueError(
            f"bottleneck_block: expansion must be positive, got {expansion}")
    h = x
    if expansion > 1:
        if params.expand_weight is None or params.expand_norm is None:
            raise ValueError(
                "bottleneck_block: expansion > 1 requires expand parameters")
        h = relu6(params.expand_norm.apply(pointwise_conv2d(h, params.expand_weight)))
    k = params.depthwise_weight.shape[2]
    h = depthwise_conv2d(h, params.depthwise_weight, stride=stride,
                         padding=(k - 1) // 2)
    h = relu6(params.depthwise_norm.apply(h))
    h = params.project_norm.apply(pointwise_conv2d(h, params.project_weight))
    if residual:
        if stride != 1 or h.shape != x.shape:
            raise ValueError(
                "bottleneck_block: residual requires stride 1 and matching "
                f"shapes, got stride {stride}, {x.shape} -> {h.shape}")
        h = h + x
    return h


LAYER_KINDS = frozenset({
    "conv", "depthwise-conv", "batch-norm", "relu6", "relu", "prelu",
    "max-pool", "global-avg-pool", "dense", "softmax", "bottleneck-block",
})


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer.

    ``params`` maps parameter roles (e.g. ``"weight"``) to weight-archive
    entry names. ``feeds_from`` names an earlier layer whose output this
    layer consumes instead of the immediately preceding one, which is how
    multi-head networks branch.
    """
    kind: str
    name: str
    params: dict = field(default_factory=dict)
    in_channels: int | None = None
    out_channels: int | None = None
    kernel: int | None = None
    stride: int = 1
    padding: int = 0
    expansion: int = 1
    residual: bool = False
    epsilon: float = 1e-5
    feeds_from: str | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise NetworkError(f"layer {self.name!r}: unknown kind {self.kind!r}")


def parameter_shapes(layers: list[LayerSpec]) -> list[tuple[str, tuple[int, ...]]]:
    """Every (archive entry name, shape) pair the layer list requires."""
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for layer in layers:
        p = layer.params
        if layer.kind in ("conv", "depthwise-conv"):
            in_c = 1 if layer.kind == "depthwise-conv" else layer.in_channels
            shapes.append((p["weight"],
                           (layer.out_channels, in_c, layer.kernel, layer.kernel)))
            if "bias" in p:
                shapes.append((p["bias"], (layer.out_channels,)))
        elif layer.kind == "batch-norm":
            shapes.extend((p[stat], (layer.out_channels,))
                          for stat in ("gamma", "beta", "mean", "variance"))
        elif layer.kind == "prelu":
            shapes.append((p["alpha"], (layer.out_channels,)))
        elif layer.kind == "dense":
            shapes.append((p["weight"], (layer.out_channels, layer.in_channels)))
            if "bias" in p:
                shapes.append((p["bias"], (layer.out_channels,)))
        elif layer.kind == "bottleneck-block":
            mid = layer.in_channels * layer.expansion
            stats = ("gamma", "beta", "mean", "variance")
            if layer.expansion > 1:
                shapes.append((p["expand_weight"], (mid, layer.in_channels, 1, 1)))
                shapes.extend((p[f"expand_norm.{s}"], (mid,)) for s in stats)
            shapes.append((p["depthwise_weight"], (mid, 1, 3, 3)))
            shapes.extend((p[f"depthwise_norm.{s}"], (mid,)) for s in stats)
            shapes.append((p["project_weight"], (layer.out_channels, mid, 1, 1)))
            shapes.extend((p[f"project_norm.{s}"], (layer.out_channels,))
                          for s in stats)
    return shapes


class Network:
    """Ordered layers bound to parameter tensors from a weight archive.

    Immutable after construction and safe to share across threads. The
    forward pass applies layers in order; each layer consumes the previous
    output unless its spec names an earlier layer via ``feeds_from``.

    ``input_shape`` optionally declares the expected per-sample input shape
    (channels, height, width); when set, forward rejects anything else.
    Fully convolutional networks leave it unset.
    """

    def __init__(self, layers: list[LayerSpec], archive=None,
                 input_shape: tuple[int, ...] | None = None):
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise NetworkError("duplicate layer names in network")
        self.layers = tuple(layers)
        self.input_shape = tuple(input_shape) if input_shape else None
        self._bound: list[dict] = []
        known = set()
        for layer in layers:
            if layer.feeds_from is not None and layer.feeds_from not in known:
                raise NetworkError(
                    f"layer {layer.name!r} feeds from unknown layer "
                    f"{layer.feeds_from!r}")
            known.add(layer.name)
            self._bound.append(self._bind(layer, archive))
        self._validate_residuals()

    @staticmethod
    def _fetch(archive, entry: str, shape: tuple[int, ...], layer: str) -> Tensor:
        if archive is None or entry not in archive:
            raise NetworkError(
                f"layer {layer!r}: parameter {entry!r} missing from archive")
        tensor = archive.get(entry)
        if tuple(tensor.shape) != shape:
            raise NetworkError(
                f"layer {layer!r}: parameter {entry!r} has shape "
                f"{tuple(tensor.shape)}, expected {shape}")
        return tensor

    def _bind(self, layer: LayerSpec, archive) -> dict:
        bound: dict = {}
        expected = dict((name, shape)
                        for name, shape in parameter_shapes([layer]))
        for role, entry in layer.params.items():
            bound[role] = self._fetch(archive, entry, expected[entry], layer.name)
        return bound

    def _validate_residuals(self):
        for layer in self.layers:
            if layer.kind == "bottleneck-block" and layer.residual:
                if layer.stride != 1 or layer.in_channels != layer.out_channels:
                    raise NetworkError(
                        f"layer {layer.name!r}: residual requires stride 1 and "
                        f"equal channel counts, got stride {layer.stride}, "
                        f"{layer.in_channels} -> {layer.out_channels}")

    def _apply(self, layer: LayerSpec, bound: dict, x: Tensor) -> Tensor:
        kind = layer.kind
        if kind == "conv":
            if layer.kernel == 1 and layer.stride == 1 and layer.padding == 0:
                return pointwise_conv2d(x, bound["weight"], bound.get("bias"))
            return conv2d(x, bound["weight"], bound.get("bias"),
                          layer.stride, layer.padding)
        if kind == "depthwise-conv":
            return depthwise_conv2d(x, bound["weight"], bound.get("bias"),
                                    layer.stride, layer.padding)
        if kind == "batch-norm":
            return batch_norm(x, bound["gamma"], bound["beta"], bound["mean"],
                              bound["variance"], layer.epsilon)
        if kind == "relu6":
            return relu6(x)
        if kind == "relu":
            return relu(x)
        if kind == "prelu":
            return prelu(x, bound["alpha"])
        if kind == "max-pool":
            return max_pool2d(x, layer.kernel, layer.stride)
        if kind == "global-avg-pool":
            return global_avg_pool(x)
        if kind == "dense":
            return dense(x, bound["weight"], bound.get("bias"))
        if kind == "softmax":
            return softmax(x, axis=1 if x.ndim == 4 else -1)
        if kind == "bottleneck-block":
            params = BottleneckParams(
                depthwise_weight=bound["depthwise_weight"],
                depthwise_norm=BatchNormParams(
                    *(bound[f"depthwise_norm.{s}"]
                      for s in ("gamma", "beta", "mean", "variance")),
                    epsilon=layer.epsilon),
                project_weight=bound["project_weight"],
                project_norm=BatchNormParams(
                    *(bound[f"project_norm.{s}"]
                      for s in ("gamma", "beta", "mean", "variance")),
                    epsilon=layer.epsilon),
                expand_weight=bound.get("expand_weight"),
                expand_norm=BatchNormParams(
                    *(bound[f"expand_norm.{s}"]
                      for s in ("gamma", "beta", "mean", "variance")),
                    epsilon=layer.epsilon) if layer.expansion > 1 else None)
            return bottleneck_block(x, params, layer.expansion, layer.stride,
                                    layer.residual)
        raise NetworkError(f"layer {layer.name!r}: unknown kind {kind!r}")

    def forward(self, x: Tensor, taps: tuple[str, ...] = ()):
        """Apply all layers; returns the final output.

        With ``taps`` the return value is ``(output, {name: tensor})`` for
        the named intermediate layers.
        """
        wanted = set(taps)
        feeds = {layer.feeds_from for layer in self.layers if layer.feeds_from}
        keep = wanted | feeds
        unknown = wanted - {layer.name for layer in self.layers}
        if unknown:
            raise NetworkError(f"unknown tap layers: {sorted(unknown)}")
        outputs: dict[str, Tensor] = {}
        current = _as_f32(x)
        if self.input_shape and tuple(current.shape[1:]) != self.input_shape:
            raise ValueError(
                f"input shape {tuple(current.shape[1:])} does not match the "
                f"network's declared {self.input_shape}")
        for layer, bound in zip(self.layers, self._bound):
            source = outputs[layer.feeds_from] if layer.feeds_from else current
            try:
                current = self._apply(layer, bound, source)
            except ValueError as exc:
                raise ValueError(f"layer {layer.name!r}: {exc}") from exc
            if layer.name in keep:
                outputs[layer.name] = current
        if taps:
            return current, {name: outputs[name] for name in taps}
        return current


def bn_layer(name: str, channels: int, prefix: str | None = None,
             epsilon: float = 1e-5) -> LayerSpec:
    """Batch-norm LayerSpec with the conventional four parameter entries."""
    prefix = prefix or name
    return LayerSpec(
        kind="batch-norm", name=name, out_channels=channels, epsilon=epsilon,
        params={stat: f"{prefix}.{stat}"
                for stat in ("gamma", "beta", "mean", "variance")})


def conv_layer(name: str, in_channels: int, out_channels: int, kernel: int,
               stride: int = 1, padding: int = 0, bias: bool = True,
               feeds_from: str | None = None) -> LayerSpec:
    params = {"weight": f"{name}.weight"}
    if bias:
        params["bias"] = f"{name}.bias"
    return LayerSpec(kind="conv", name=name, params=params,
                     in_channels=in_channels, out_channels=out_channels,
                     kernel=kernel, stride=stride, padding=padding,
                     feeds_from=feeds_from)


def prelu_layer(name: str, channels: int) -> LayerSpec:
    return LayerSpec(kind="prelu", name=name, out_channels=channels,
                     params={"alpha": f"{name}.alpha"})


def dense_layer(name: str, in_features: int, out_features: int,
                bias: bool = True, feeds_from: str | None = None) -> LayerSpec:
    params = {"weight": f"{name}.weight"}
    if bias:
        params["bias"] = f"{name}.bias"
    return LayerSpec(kind="dense", name=name, params=params,
                     in_channels=in_features, out_channels=out_features,
                     feeds_from=feeds_from)


def bottleneck_layer(name: str, in_channels: int, out_channels: int,
                     expansion: int, stride: int, residual: bool) -> LayerSpec:
    roles = ["depthwise_weight", "project_weight"]
    if expansion > 1:
        roles.append("expand_weight")
    params = {role: f"{name}.{role}" for role in roles}
    norms = ["depthwise_norm", "project_norm"]
    if expansion > 1:
        norms.append("expand_norm")
    for norm in norms:
        for stat in ("gamma", "beta", "mean", "variance"):
            params[f"{norm}.{stat}"] = f"{name}.{norm}.{stat}"
    return LayerSpec(kind="bottleneck-block", name=name, params=params,
                     in_channels=in_channels, out_channels=out_channels,
                     expansion=expansion, stride=stride, residual=residual)
