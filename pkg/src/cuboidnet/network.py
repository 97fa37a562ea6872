"""The multi-branch space-time super-resolution network.

Pipeline: slice the input cuboid along its three axes; enhance every slice
with a shared-weight multi-feature branch (bicubic base plus a learned
residual built from densely connected blocks); stack each branch back into a
volume and let a reconstruction block upsample its one remaining axis with a
transposed 3-D convolution; fuse the three canonical volumes; then polish
frames with a per-frame enhancement stage and a cross-frame attention stage
that rewrites only the interpolated frames.

Branch geometry for an (N, H, W) input with spatial factor 4:

    branch 1: N slices (H, W) -> (4H, 4W),   volume depth N -> 2N-1
    branch 2: W slices (H, N) -> (4H, 2N-1), volume depth W -> 4W
    branch 3: H slices (W, N) -> (4W, 2N-1), volume depth H -> 4H

so every branch reaches (2N-1, 4H, 4W); the slice-plane bicubic supplies the
temporal interpolation for branches 2 and 3.

All slices within a branch share weights, so the per-slice and per-frame
stages run batched over one extra leading axis.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import bicubic
from . import tensor as tz
from .cuboid import VideoCuboid, slice_cuboid
from .errors import ContractError
from .tensor import Tensor

_TRANSPOSE_GEOMETRY = {
    # branch -> (stride, kernel, padding) on the volume depth axis
    1: (2, 3, 1),  # N -> (N-1)*2 - 2 + 3 = 2N - 1
    2: (4, 8, 2),  # L -> (L-1)*4 - 4 + 8 = 4L
    3: (4, 8, 2),
}


@dataclass
class NetworkConfig:
    """Architecture hyperparameters; defaults are the full-scale settings."""

    base_channels: int = 64
    resdb_count: int = 9
    resdb_growth: int = 32
    conv3d_count: int = 5
    enable_qe: bool = True
    enable_cfqe: bool = True
    cbam_reduction: int = 16
    cbam_spatial_kernel: int = 7
    spatial_factor: int = 4
    leaky_slope: float = 0.1
    skip_grounded_fusion: bool = True

    def __post_init__(self):
        if self.resdb_count < 1:
            raise ContractError(f"resdb_count must be >= 1, got {self.resdb_count}")
        if self.conv3d_count < 1:
            raise ContractError(f"conv3d_count must be >= 1, got {self.conv3d_count}")
        if self.base_channels % self.cbam_reduction:
            raise ContractError(
                f"cbam_reduction {self.cbam_reduction} must divide "
                f"base_channels {self.base_channels}"
            )
        if self.cbam_spatial_kernel % 2 == 0:
            raise ContractError(
                f"cbam_spatial_kernel must be odd, got {self.cbam_spatial_kernel}"
            )
        if self.spatial_factor != 4:
            raise ContractError(
                f"spatial_factor is fixed at 4 by the reconstruction geometry, "
                f"got {self.spatial_factor}"
            )

    @classmethod
    def toy(cls, **overrides) -> "NetworkConfig":
        """Desk-scale configuration used by the fast tests."""
        base = dict(base_channels=16, resdb_count=2, resdb_growth=8,
                    conv3d_count=2, cbam_reduction=4)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"NetworkConfig: unknown keys {sorted(unknown)}")
        return cls(**d)


class ParameterStore:
    """Named map from hierarchical parameter path to tensor."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractError(f"ParameterStore: duplicate parameter {name!r}")
        t = Tensor(array, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ContractError(f"ParameterStore: no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def breakdown(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for name, t in self._params.items():
            top = name.split(".", 1)[0]
            out[top] = out.get(top, 0) + t.size
        return out


def param_count(params: ParameterStore) -> int:
    return sum(t.size for _, t in params.items())


def param_breakdown(params: ParameterStore) -> dict[str, int]:
    return params.breakdown()


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _init_conv(store, rng, name, co, ci, ksize, zero=False):
    fan_in = ci * int(np.prod(ksize))
    w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(co, ci) + tuple(ksize))
    if zero:
        w = np.zeros_like(w)
    store.add(name + ".weight", w)
    store.add(name + ".bias", np.zeros(co))


def _init_transpose(store, rng, name, ci, co, ksize):
    fan_in = ci * int(np.prod(ksize))
    w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(ci, co) + tuple(ksize))
    store.add(name + ".weight", w)


def _init_dense(store, rng, name, out_n, in_n):
    w = rng.normal(0.0, 1.0 / np.sqrt(in_n), size=(out_n, in_n))
    store.add(name + ".weight", w)
    store.add(name + ".bias", np.zeros(out_n))


def init_parameters(cfg: NetworkConfig, seed: int = 0,
                    zero_residual_heads: bool = True) -> ParameterStore:
    """Create all weights.

    Conv kernels are fan-in-scaled normal, biases zero, PReLU slopes 0.25.
    The final residual convs (branch heads, fusion head, enhancement heads)
    start at zero so the untrained network reduces to the bicubic baseline;
    pass ``zero_residual_heads=False`` to randomize them too. The random
    draws are identical either way, so both modes share all other weights.
    """
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    c = cfg.base_channels
    g = cfg.resdb_growth

    for m in (1, 2, 3):
        p = f"mbfe.branch{m}"
        _init_conv(store, rng, f"{p}.shallow1", c, 1, (3, 3))
        _init_conv(store, rng, f"{p}.shallow2", c, c, (3, 3))
        for i in range(1, cfg.resdb_count + 1):
            for j in range(1, 4):
                _init_conv(store, rng, f"{p}.resdb{i}.layer{j}", g, c + (j - 1) * g, (3, 3))
            _init_conv(store, rng, f"{p}.resdb{i}.reduce", c, 3 * g, (1, 1))
        _init_conv(store, rng, f"{p}.compress", c, cfg.resdb_count * c, (1, 1))
        _init_conv(store, rng, f"{p}.refine", c, c, (3, 3))
        _init_conv(store, rng, f"{p}.residual", 1, c, (3, 3), zero=zero_residual_heads)

    for m in (1, 2, 3):
        p = f"mbr.rb{m}"
        for i in range(1, cfg.conv3d_count + 1):
            ci = 1 if i == 1 else c
            _init_conv(store, rng, f"{p}.conv{i}", c, ci, (3, 3, 3))
        _, kd, _ = _TRANSPOSE_GEOMETRY[m]
        _init_transpose(store, rng, f"{p}.upsample", c, c, (kd, 1, 1))
        _init_conv(store, rng, f"{p}.project", 1, c, (3, 3, 3))
    _init_conv(store, rng, "mbr.fusion.conv1", c, 3, (3, 3, 3))
    _init_conv(store, rng, "mbr.fusion.conv2", 1, c, (3, 3, 3), zero=zero_residual_heads)

    if cfg.enable_qe:
        _init_conv(store, rng, "qe.conv1", c, 1, (3, 3))
        _init_conv(store, rng, "qe.conv2", c, c, (3, 3))
        _init_conv(store, rng, "qe.conv3", c, c, (3, 3))
        _init_conv(store, rng, "qe.conv4", 1, c, (3, 3), zero=zero_residual_heads)
        for i in (1, 2, 3):
            store.add(f"qe.prelu{i}.alpha", np.full(c, 0.25))

    if cfg.enable_cfqe:
        k = cfg.cbam_spatial_kernel
        _init_conv(store, rng, "cfqe.conv1", c, 3, (3, 3))
        for i in range(2, 7):
            _init_conv(store, rng, f"cfqe.conv{i}", c, c, (3, 3))
        _init_conv(store, rng, "cfqe.conv7", 1, c, (3, 3), zero=zero_residual_heads)
        for j in (1, 2):
            p = f"cfqe.cbam{j}"
            _init_dense(store, rng, f"{p}.channel_fc1", c // cfg.cbam_reduction, c)
            _init_dense(store, rng, f"{p}.channel_fc2", c, c // cfg.cbam_reduction)
            _init_conv(store, rng, f"{p}.spatial", 1, 2, (k, k))

    return store


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _conv(x, params, name, stride=1, pad=1):
    return tz.conv2d(x, params[name + ".weight"], params[name + ".bias"], stride, pad)


def _conv3(x, params, name, pad=1):
    return tz.conv3d(x, params[name + ".weight"], params[name + ".bias"], 1, pad)


def _ch_axis(x: Tensor) -> int:
    return x.ndim - 3


def resdb_forward(f_prev: Tensor, params: ParameterStore, prefix: str) -> Tensor:
    """Residual dense block: three densely connected convs, 1x1 reduce, skip."""
    ch = _ch_axis(f_prev)
    feats = [f_prev]
    for j in (1, 2, 3):
        inp = feats[0] if j == 1 else tz.concat(feats, axis=ch)
        feats.append(tz.relu(_conv(inp, params, f"{prefix}.layer{j}")))
    reduced = _conv(tz.concat(feats[1:], axis=ch), params, f"{prefix}.reduce", pad=0)
    return tz.add(f_prev, reduced)


def _mfb_batch(slices: np.ndarray, target: tuple[int, int], params: ParameterStore,
               prefix: str, cfg: NetworkConfig) -> Tensor:
    """Run the multi-feature block on a (B, a, b) stack of raw slices."""
    b = slices.shape[0]
    wy = bicubic.weight_matrix(slices.shape[1], target[0])
    wx = bicubic.weight_matrix(slices.shape[2], target[1])
    imr = np.einsum("oh,bhw,pw->bop", wy, slices, wx)[:, None]  # (B,1,a',b')
    imr_t = Tensor(imr)  # constant base: no parameters feed it

    x = tz.relu(_conv(imr_t, params, f"{prefix}.shallow1"))
    x = tz.relu(_conv(x, params, f"{prefix}.shallow2"))
    deep = []
    for i in range(1, cfg.resdb_count + 1):
        x = resdb_forward(x, params, f"{prefix}.resdb{i}")
        deep.append(x)
    fused = _conv(tz.concat(deep, axis=1), params, f"{prefix}.compress", pad=0)
    fused = tz.leaky_relu(fused, cfg.leaky_slope)
    res = tz.relu(_conv(fused, params, f"{prefix}.refine"))
    res = _conv(res, params, f"{prefix}.residual")
    return tz.add(imr_t, res)


def mfb_forward(slice_img, upsample_target: tuple[int, int], params: ParameterStore,
                cfg: NetworkConfig, branch: int = 1) -> Tensor:
    """Enhance one slice image (1, a, b) to (1, a', b')."""
    data = slice_img.data if isinstance(slice_img, Tensor) else np.asarray(slice_img)
    if data.ndim != 3 or data.shape[0] != 1:
        raise ContractError(f"mfb_forward: expected a (1, a, b) slice, got {data.shape}")
    out = _mfb_batch(data, upsample_target, params, f"mbfe.branch{branch}", cfg)
    return tz.index_axis(out, 0, 0)


@dataclass
class EnhancedSlices:
    """Batched enhanced slices of one branch, plus origin geometry."""

    branch: int
    stack: Tensor  # (slice_count, 1, a, b)
    source_dims: tuple[int, int, int]

    def slices(self) -> list[Tensor]:
        return [tz.index_axis(self.stack, 0, i) for i in range(self.stack.shape[0])]


def mbfe_forward(v_in: VideoCuboid, params: ParameterStore,
                 cfg: NetworkConfig) -> tuple[EnhancedSlices, EnhancedSlices, EnhancedSlices]:
    """Slice along all three axes and enhance every slice (shared weights per branch)."""
    n, h, w = v_in.shape
    if n < 2:
        raise ContractError(f"mbfe_forward: need at least 2 frames, got {n}")
    f = cfg.spatial_factor
    targets = {1: (f * h, f * w), 2: (f * h, 2 * n - 1), 3: (f * w, 2 * n - 1)}
    out = []
    for m in (1, 2, 3):
        stack = np.stack(slice_cuboid(v_in, m).slices)
        enhanced = _mfb_batch(stack, targets[m], params, f"mbfe.branch{m}", cfg)
        out.append(EnhancedSlices(m, enhanced, (n, h, w)))
    return tuple(out)


def rb_forward(volume: Tensor, branch: int, params: ParameterStore,
               cfg: NetworkConfig) -> Tensor:
    """Reconstruction block: 3-D convs, depth-axis transposed conv, projection.

    ``volume`` is (1, D, a, b) with the branch's un-upsampled axis as depth;
    the result is re-oriented to canonical (1, frames, rows, columns).
    """
    if volume.ndim != 4 or volume.shape[0] != 1:
        raise ContractError(f"rb_forward: expected (1, D, a, b), got {volume.shape}")
    if branch not in _TRANSPOSE_GEOMETRY:
        raise ContractError(f"rb_forward: branch must be 1, 2, or 3, got {branch}")
    p = f"mbr.rb{branch}"
    x = volume
    for i in range(1, cfg.conv3d_count + 1):
        x = tz.relu(_conv3(x, params, f"{p}.conv{i}"))
    stride, kd, pad = _TRANSPOSE_GEOMETRY[branch]
    d = x.shape[1]
    target = ((d - 1) * stride - 2 * pad + kd, x.shape[2], x.shape[3])
    x = tz.conv_transpose3d(x, params[f"{p}.upsample.weight"],
                            (stride, 1, 1), (pad, 0, 0), target)
    x = tz.leaky_relu(x, cfg.leaky_slope)
    x = _conv3(x, params, f"{p}.project")
    if branch == 2:
        x = tz.permute(x, (0, 3, 2, 1))  # (1, x, y, t) -> (1, t, y, x)
    elif branch == 3:
        x = tz.permute(x, (0, 3, 1, 2))  # (1, y, x, t) -> (1, t, y, x)
    return x


def _branch_volume(v: EnhancedSlices) -> Tensor:
    # (slice_count, 1, a, b) -> (1, slice_count, a, b)
    return tz.permute(v.stack, (1, 0, 2, 3))


def _skip_volume(v: EnhancedSlices, cfg: NetworkConfig) -> Tensor:
    """Complete a branch volume to (1, 2N-1, 4H, 4W) by resampling its raw axis."""
    n, h, w = v.source_dims
    f = cfg.spatial_factor
    vol = _branch_volume(v)
    if v.branch == 1:
        m = bicubic.weight_matrix(n, 2 * n - 1)
        return tz.axis_matmul(vol, m, axis=1)
    if v.branch == 2:
        m = bicubic.weight_matrix(w, f * w)
        return tz.permute(tz.axis_matmul(vol, m, axis=1), (0, 3, 2, 1))
    m = bicubic.weight_matrix(h, f * h)
    return tz.permute(tz.axis_matmul(vol, m, axis=1), (0, 3, 1, 2))


def mbr_forward(v1: EnhancedSlices, v2: EnhancedSlices, v3: EnhancedSlices,
                params: ParameterStore, cfg: NetworkConfig) -> Tensor:
    """Reconstruct each branch, fuse across branches; optionally skip-ground.

    In skip-grounded mode the mean of the three bicubic-completed branch
    volumes anchors the fusion output, so zeroed residual heads reduce the
    whole network to the deterministic bicubic baseline.
    """
    recon = [rb_forward(_branch_volume(v), v.branch, params, cfg)
             for v in (v1, v2, v3)]
    cat = tz.concat(recon, axis=0)  # (3, T, 4H, 4W)
    x = tz.relu(_conv3(cat, params, "mbr.fusion.conv1"))
    x = _conv3(x, params, "mbr.fusion.conv2")
    if cfg.skip_grounded_fusion:
        skips = [_skip_volume(v, cfg) for v in (v1, v2, v3)]
        skip = tz.scale(tz.add(tz.add(skips[0], skips[1]), skips[2]), 1.0 / 3.0)
        x = tz.add(x, skip)
    return x


def _add_vector(x: Tensor, vec: Tensor) -> Tensor:
    shape = (1,) * (x.ndim - 1) + (vec.shape[0],)
    return tz.add(x, tz.reshape(vec, shape))


def qe_forward(frame: Tensor, params: ParameterStore) -> Tensor:
    """Per-frame enhancement: three conv+PReLU layers, linear head, input skip."""
    x = tz.prelu(_conv(frame, params, "qe.conv1"), params["qe.prelu1.alpha"])
    x = tz.prelu(_conv(x, params, "qe.conv2"), params["qe.prelu2.alpha"])
    x = tz.prelu(_conv(x, params, "qe.conv3"), params["qe.prelu3.alpha"])
    res = _conv(x, params, "qe.conv4")
    return tz.add(frame, res)


def _dense(x: Tensor, w: Tensor) -> Tensor:
    """(..., n) @ w.T with gradients flowing to both operands."""
    xe = tz.reshape(x, x.shape + (1, 1))  # (..., n, 1, 1)
    we = tz.reshape(w, w.shape + (1, 1))  # (out, n, 1, 1)
    out = tz.conv2d(xe, we, Tensor(np.zeros(w.shape[0])))
    return tz.reshape(out, x.shape[:-1] + (w.shape[0],))


def cbam_forward(f: Tensor, params: ParameterStore, cfg: NetworkConfig,
                 prefix: str = "cfqe.cbam1") -> Tensor:
    """Sequential channel-then-spatial attention multiplied into the features."""
    ch = _ch_axis(f)
    c = f.shape[ch]
    if c % cfg.cbam_reduction:
        raise ContractError(
            f"cbam_forward: channels {c} not divisible by reduction {cfg.cbam_reduction}"
        )
    w1, b1 = params[f"{prefix}.channel_fc1.weight"], params[f"{prefix}.channel_fc1.bias"]
    w2, b2 = params[f"{prefix}.channel_fc2.weight"], params[f"{prefix}.channel_fc2.bias"]
    avg, mx = tz.pool_channel_stats(f)

    def mlp(stat: Tensor) -> Tensor:  # shared bottleneck for both statistics
        hidden = tz.relu(_add_vector(_dense(stat, w1), b1))
        return _add_vector(_dense(hidden, w2), b2)

    gate = tz.sigmoid(tz.add(mlp(avg), mlp(mx)))
    gate = tz.reshape(gate, gate.shape + (1, 1))
    x = tz.multiply(f, gate)

    savg, smx = tz.pool_spatial_stats(x)
    smap = tz.concat([savg, smx], axis=ch)
    k = cfg.cbam_spatial_kernel
    smap = tz.conv2d(smap, params[f"{prefix}.spatial.weight"],
                     params[f"{prefix}.spatial.bias"], 1, (k - 1) // 2)
    smap = tz.sigmoid(smap)
    return tz.multiply(x, smap)


def cfqe_forward(prev: Tensor, cur: Tensor, nxt: Tensor, params: ParameterStore,
                 cfg: NetworkConfig) -> Tensor:
    """Cross-frame enhancement of an interpolated frame from its neighbors."""
    ch = _ch_axis(cur)
    x = tz.concat([prev, cur, nxt], axis=ch)
    x = tz.relu(_conv(x, params, "cfqe.conv1"))
    x = tz.relu(_conv(x, params, "cfqe.conv2"))
    x = cbam_forward(x, params, cfg, "cfqe.cbam1")
    x = tz.relu(_conv(x, params, "cfqe.conv3"))
    x = tz.relu(_conv(x, params, "cfqe.conv4"))
    x = cbam_forward(x, params, cfg, "cfqe.cbam2")
    x = tz.relu(_conv(x, params, "cfqe.conv5"))
    x = tz.relu(_conv(x, params, "cfqe.conv6"))
    res = _conv(x, params, "cfqe.conv7")
    return tz.add(cur, res)


def cuboidnet_forward(v_in: VideoCuboid, params: ParameterStore,
                      cfg: NetworkConfig) -> Tensor:
    """Full network: (N, H, W) cuboid in, (2N-1, 4H, 4W) tensor out (unclamped).

    Values are normalized to [0, 1] internally and rescaled on the way out;
    clamping to the value range happens only at final emission, never here.
    """
    n, h, w = v_in.shape
    if n < 2:
        raise ContractError(f"cuboidnet_forward: need at least 2 frames, got {n}")
    norm = VideoCuboid(v_in.values / v_in.value_max, 1.0)
    v1, v2, v3 = mbfe_forward(norm, params, cfg)
    out = mbr_forward(v1, v2, v3, params, cfg)  # (1, T, 4H, 4W)
    frames = tz.permute(out, (1, 0, 2, 3))  # (T, 1, 4H, 4W)
    if cfg.enable_qe:
        frames = qe_forward(frames, params)
    t_out = frames.shape[0]
    if cfg.enable_cfqe and t_out >= 3:
        odd = list(range(1, t_out - 1, 2))
        prev = tz.stack([tz.index_axis(frames, 0, t - 1) for t in odd], axis=0)
        cur = tz.stack([tz.index_axis(frames, 0, t) for t in odd], axis=0)
        nxt = tz.stack([tz.index_axis(frames, 0, t + 1) for t in odd], axis=0)
        enhanced = cfqe_forward(prev, cur, nxt, params, cfg)
        pieces = []
        for t in range(t_out):
            if t % 2 == 0:
                pieces.append(tz.index_axis(frames, 0, t))
            else:
                pieces.append(tz.index_axis(enhanced, 0, odd.index(t)))
        frames = tz.stack(pieces, axis=0)
    result = tz.reshape(frames, (t_out, cfg.spatial_factor * h, cfg.spatial_factor * w))
    return tz.scale(result, v_in.value_max)


def super_resolve(v_in: VideoCuboid, params: ParameterStore,
                  cfg: NetworkConfig) -> VideoCuboid:
    """Inference wrapper: no gradients, output clamped to the value range."""
    with tz.no_grad():
        out = cuboidnet_forward(v_in, params, cfg)
    return VideoCuboid(np.clip(out.data, 0.0, v_in.value_max), v_in.value_max)
