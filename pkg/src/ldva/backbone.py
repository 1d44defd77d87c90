"""Part-feature extractor: global conv features, channel grouping, per-part
attention maps, attended part features, and the attention shaping losses.

Feature maps are NCHW. Attention peaks are computed outside the autodiff
graph (argmax is treated as a constant during differentiation) with
row-major-first tie-breaking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ldva import tensorcore as tc
from ldva.tensorcore import ShapeError, Tensor


@dataclass(frozen=True)
class BackboneConfig:
    """Small conv stack standing in for a large pretrained backbone.

    Each stage is conv(kernel, pad kernel//2) -> ReLU -> max-pool(pool).
    A pool factor of 1 means the stage keeps its spatial size. Default:
    28 -> 14 -> 7 -> 7 with 32 output channels.
    """

    input_side: int = 28
    channels: tuple[int, ...] = (16, 32, 32)
    pools: tuple[int, ...] = (2, 2, 1)
    kernel: int = 3
    num_parts: int = 4
    zeta: float = 0.02
    lambda_div: float = 2.0

    def __post_init__(self):
        if self.num_parts < 1:
            raise ValueError("num_parts must be >= 1")
        if self.zeta < 0 or self.lambda_div < 0:
            raise ValueError("zeta and lambda_div must be >= 0")
        if len(self.channels) != len(self.pools) or not self.channels:
            raise ValueError("channels and pools must be equal-length, non-empty")
        side = self.input_side
        for p in self.pools:
            if side % p:
                raise ValueError(f"pool {p} does not divide spatial side {side}")
            side //= p
        if side < 2:
            raise ValueError("final feature map must be at least 2x2")
        if self.channels[-1] < self.num_parts:
            raise ValueError("final channel count must be >= num_parts")

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]

    @property
    def feature_side(self) -> int:
        side = self.input_side
        for p in self.pools:
            side //= p
        return side


def init_backbone_params(params: tc.ParamSet, config: BackboneConfig,
                         rng: np.random.Generator) -> None:
    """Register conv-stack weights (group backbone_E) and the channel-grouping
    affine layer (group grouping_G). Fan-in scaled Gaussian init, zero biases."""
    cin = 1
    k = config.kernel
    for i, cout in enumerate(config.channels):
        std = 1.0 / math.sqrt(cin * k * k)
        params.add(f"backbone.conv{i}.w",
                   Tensor(rng.normal(0.0, std, size=(cout, cin, k, k))), "backbone_E")
        params.add(f"backbone.conv{i}.b", Tensor(np.zeros(cout)), "backbone_E")
        cin = cout
    c = config.feature_channels
    m = config.num_parts
    std = 1.0 / math.sqrt(c)
    params.add("grouping.w", Tensor(rng.normal(0.0, std, size=(m * c, c))), "grouping_G")
    params.add("grouping.b", Tensor(np.zeros(m * c)), "grouping_G")


def extract_global_features(x: Tensor, params: tc.ParamSet,
                            config: BackboneConfig) -> Tensor:
    """Images (N, side, side) in [0,1] -> feature map E of shape (N, C, H, W)."""
    if x.ndim != 3 or x.shape[1] != config.input_side or x.shape[2] != config.input_side:
        raise ShapeError(
            f"extract_global_features: expected (N, {config.input_side}, "
            f"{config.input_side}), got {x.shape}")
    h = x.reshape((x.shape[0], 1, config.input_side, config.input_side))
    for i, pool in enumerate(config.pools):
        h = tc.conv2d(h, params[f"backbone.conv{i}.w"], params[f"backbone.conv{i}.b"],
                      stride=1, padding=config.kernel // 2)
        h = tc.relu(h)
        h = tc.max_pool2d(h, pool)
    return h


def channel_grouping(e: Tensor, params: tc.ParamSet, config: BackboneConfig) -> Tensor:
    """Feature map (N, C, H, W) -> grouping weights G in (0,1), shape (N, M, C).

    E is global-average-pooled to a C-vector before the affine layer; the
    sigmoid keeps grouping weights positive and bounded.
    """
    n, c, _, _ = e.shape
    pooled = e.mean(axis=(2, 3))
    g = tc.sigmoid(tc.linear(pooled, params["grouping.w"], params["grouping.b"]))
    return g.reshape((n, config.num_parts, c))


@dataclass
class AttentionMaps:
    """Per-part attention maps (N, M, H, W) with per-map peak coordinates.

    peaks[i, m] is the row-major-first argmax of maps[i, m], held constant
    under differentiation.
    """

    maps: Tensor
    peaks: np.ndarray

    @property
    def num_parts(self) -> int:
        return self.maps.shape[1]


def peak_coordinates(maps_data: np.ndarray) -> np.ndarray:
    """Row-major-first argmax coordinates for maps shaped (..., H, W)."""
    h, w = maps_data.shape[-2], maps_data.shape[-1]
    flat_idx = maps_data.reshape(maps_data.shape[:-2] + (h * w,)).argmax(axis=-1)
    return np.stack([flat_idx // w, flat_idx % w], axis=-1)


def attention_maps(g: Tensor, e: Tensor) -> AttentionMaps:
    """A_m = sigmoid(sum_c G_{m,c} * E_c), elementwise over the spatial grid."""
    if g.ndim != 3 or e.ndim != 4 or g.shape[0] != e.shape[0] or g.shape[2] != e.shape[1]:
        raise ShapeError(f"attention_maps: G {g.shape} vs E {e.shape}")
    n, m, c = g.shape
    _, _, h, w = e.shape
    logits = tc.matmul(g, e.reshape((n, c, h * w)))
    maps = tc.sigmoid(logits).reshape((n, m, h, w))
    return AttentionMaps(maps=maps, peaks=peak_coordinates(maps.data))


def part_features(attention: AttentionMaps, e: Tensor) -> Tensor:
    """z_{m,c} = sum_{w,h} A_m(w,h) * E_c(w,h); output (N, M, C)."""
    a = attention.maps
    if a.ndim != 4 or e.ndim != 4 or a.shape[0] != e.shape[0] \
            or a.shape[2:] != e.shape[2:]:
        raise ShapeError(f"part_features: A {a.shape} vs E {e.shape}")
    n, m, h, w = a.shape
    c = e.shape[1]
    e_flat = tc.transpose(e.reshape((n, c, h * w)), (0, 2, 1))
    return tc.matmul(a.reshape((n, m, h * w)), e_flat)


def _distance_field(peaks: np.ndarray, h: int, w: int) -> np.ndarray:
    """Squared coordinate distance to each peak; peaks (..., 2) -> (..., H, W).

    Coordinates are raw indices, not normalized by the map size.
    """
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    dr = (rows[:, None] - peaks[..., 0, None, None]) ** 2
    dc = (cols[None, :] - peaks[..., 1, None, None]) ** 2
    return dr + dc


def loss_dis(a_map: Tensor, peak=None) -> Tensor:
    """Compactness loss for one map (H, W): attention-weighted squared
    distance to the peak coordinate."""
    if a_map.ndim != 2:
        raise ShapeError(f"loss_dis: expected a single (H, W) map, got {a_map.shape}")
    if peak is None:
        peak = peak_coordinates(a_map.data)
    dist = _distance_field(np.asarray(peak, dtype=np.float64), *a_map.shape)
    return tc.tsum(tc.mul(a_map, Tensor(dist)))


def loss_div(maps: Tensor, m: int, zeta: float) -> Tensor:
    """Divergence loss for part m of a stack (M, H, W): attention mass weighted
    by the strongest competing map minus the margin. Unclamped; for M=1 the
    empty competitor max is 0."""
    if maps.ndim != 3:
        raise ShapeError(f"loss_div: expected (M, H, W) maps, got {maps.shape}")
    n_parts, h, w = maps.shape
    own = tc.take(maps, [m], axis=0).reshape((h, w))
    others = [i for i in range(n_parts) if i != m]
    if others:
        competitor = tc.amax(tc.take(maps, others, axis=0), axis=0)
    else:
        competitor = Tensor(np.zeros((h, w)))
    return tc.tsum(tc.mul(own, competitor - zeta))


def loss_part(maps: Tensor, zeta: float, lambda_div: float, peaks=None) -> Tensor:
    """Per-sample attention loss: sum_m (L_dis(A_m) + lambda * L_div(A_m))."""
    if maps.ndim != 3:
        raise ShapeError(f"loss_part: expected (M, H, W) maps, got {maps.shape}")
    if peaks is None:
        peaks = peak_coordinates(maps.data)
    n_parts, h, w = maps.shape
    total = None
    for m in range(n_parts):
        own = tc.take(maps, [m], axis=0).reshape((h, w))
        term = loss_dis(own, peaks[m]) + lambda_div * loss_div(maps, m, zeta)
        total = term if total is None else total + term
    return total


def mean_pairwise_overlap(maps_data: np.ndarray) -> float:
    """Mean over samples and unordered part pairs of the mass-normalized
    spatial overlap sum_{w,h} A_m A_n / (|A_m| |A_n|); 1.0 for identical maps."""
    a = np.asarray(maps_data, dtype=np.float64)
    if a.ndim == 3:
        a = a[None]
    n, n_parts = a.shape[0], a.shape[1]
    if n_parts < 2:
        raise ValueError("overlap needs at least two parts")
    flat = a.reshape(n, n_parts, -1)
    norms = np.linalg.norm(flat, axis=2)
    values = []
    for m in range(n_parts):
        for k in range(m + 1, n_parts):
            values.append((flat[:, m] * flat[:, k]).sum(axis=1)
                          / (norms[:, m] * norms[:, k]))
    return float(np.mean(values))


def attention_loss_batch(attention: AttentionMaps, zeta: float,
                         lambda_div: float) -> Tensor:
    """Vectorized per-sample attention losses for maps (N, M, H, W) -> (N,)."""
    a = attention.maps
    n, n_parts, h, w = a.shape
    dist = _distance_field(attention.peaks.astype(np.float64), h, w)
    dis = tc.tsum(tc.mul(a, Tensor(dist)), axis=(2, 3))
    if n_parts > 1:
        terms = []
        for m in range(n_parts):
            others = [i for i in range(n_parts) if i != m]
            competitor = tc.amax(tc.take(a, others, axis=1), axis=1)
            own = tc.take(a, [m], axis=1).reshape((n, h, w))
            terms.append(tc.tsum(tc.mul(own, competitor - zeta), axis=(1, 2)).reshape((n, 1)))
        div = tc.concat(terms, axis=1)
    else:
        div = Tensor(np.zeros((n, 1))) - zeta * tc.tsum(a, axis=(2, 3))
    return tc.tsum(dis + lambda_div * div, axis=1)
