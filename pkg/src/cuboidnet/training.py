"""Training protocol: L2 loss, Adam, step decay, checkpoints, ablation sweeps.

Determinism contract: given (seed, clip order, single-threaded math) two runs
produce bit-identical loss traces and checkpoints. To make save/load/resume
exact under 32-bit checkpoint storage, the live parameters and optimizer
moments are rounded to float32-representable values at every checkpoint
event, so the serialized state and the in-memory state never diverge.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import tensor as tz
from .cuboid import PatchPair, VideoCuboid, crop_patch_pair, degrade
from .errors import ContractError, FormatError, NumericalError
from .network import (
    NetworkConfig,
    ParameterStore,
    cuboidnet_forward,
    init_parameters,
    param_count,
    super_resolve,
)
from .quality import evaluate
from .tensor import ComputationTape, Tensor


@dataclass
class TrainConfig:
    max_epochs: int = 1
    batch_size: int = 8
    lr0: float = 1e-4
    lr_decay: float = 0.5
    lr_decay_every: int = 60
    beta1: float = 0.5
    beta2: float = 0.99
    epsilon: float = 1e-8
    seed: int = 0
    patch_size: int = 128
    crops_per_clip: int = 1
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only
    grad_clip: float = 0.0  # global-norm clip; 0 disables
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr0 <= 0:
            raise ContractError(f"lr0 must be positive, got {self.lr0}")
        for name, beta in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= beta < 1.0:
                raise ContractError(f"{name} must be in [0, 1), got {beta}")
        if isinstance(self.network, dict):
            self.network = NetworkConfig.from_dict(self.network)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"] = self.network.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"TrainConfig: unknown keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: ParameterStore) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params.items()},
            v={name: np.zeros_like(t.data) for name, t in params.items()},
            step=0,
        )


def l2_loss(pred: Tensor, target) -> Tensor:
    """Mean squared difference over all elements (differentiable)."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target))
    if pred.shape != target.shape:
        raise ContractError(f"l2_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = tz.subtract(pred, target)
    return tz.reduce_mean(tz.multiply(diff, diff))


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ContractError(f"lr_at_epoch: epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


def adam_step(params: ParameterStore, state: OptimizerState, lr: float,
              cfg: TrainConfig) -> None:
    """Bias-corrected Adam update over every parameter, in insertion order."""
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise ContractError(f"adam_step: parameter {name!r} has no gradient")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)


def _grad_global_norm(params: ParameterStore) -> float:
    total = 0.0
    for _, p in params.items():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def _largest_grad_param(params: ParameterStore) -> str:
    best, best_val = "<none>", -1.0
    for name, p in params.items():
        if p.grad is None:
            continue
        mag = float(np.max(np.abs(p.grad)))
        if mag > best_val:
            best, best_val = name, mag
    return best


def _quantize_to_f32(params: ParameterStore, opt: OptimizerState | None) -> None:
    # live state must round-trip bit-exactly through f32 checkpoint storage
    for _, p in params.items():
        p.data = p.data.astype("<f4").astype(np.float64)
    if opt is not None:
        for d in (opt.m, opt.v):
            for name in d:
                d[name] = d[name].astype("<f4").astype(np.float64)


@dataclass
class TrainResult:
    params: ParameterStore
    opt: OptimizerState
    loss_trace: list[float]
    epoch: int
    cfg: TrainConfig


def train(clips: list[VideoCuboid], cfg: TrainConfig, out_path=None,
          resume=None, log=None) -> TrainResult:
    """Run the full training loop over high-resolution clips.

    Each epoch draws fresh patch offsets from the seeded generator, shuffles,
    and walks mini-batches: forward each sample, average the L2 losses,
    backpropagate, apply one Adam step. A non-finite loss aborts with the
    batch index and the parameter carrying the largest gradient.
    """
    if not clips:
        raise ContractError("train: dataset must not be empty")
    if resume is not None:
        ck = load_checkpoint(resume)
        params, opt = ck.params, ck.opt
        if opt is None:
            raise ContractError("train: checkpoint has no optimizer state to resume")
        rng = np.random.Generator(np.random.PCG64())
        if ck.rng_state is None:
            raise ContractError("train: checkpoint has no rng state to resume")
        rng.bit_generator.state = ck.rng_state
        start_epoch = ck.epoch
    else:
        params = init_parameters(cfg.network, cfg.seed)
        opt = OptimizerState.fresh(params)
        rng = np.random.default_rng(cfg.seed)
        start_epoch = 0

    trace: list[float] = []
    for epoch in range(start_epoch, cfg.max_epochs):
        lr = lr_at_epoch(epoch, cfg)
        pairs: list[PatchPair] = []
        for clip in clips:
            for _ in range(cfg.crops_per_clip):
                pairs.append(crop_patch_pair(clip, rng=rng, label_size=cfg.patch_size))
        order = rng.permutation(len(pairs))
        for b0 in range(0, len(order), cfg.batch_size):
            batch = order[b0:b0 + cfg.batch_size]
            params.zero_grads()
            batch_loss = 0.0
            for si in batch:
                pair = pairs[int(si)]
                with ComputationTape() as tape:
                    pred = cuboidnet_forward(pair.input_patch, params, cfg.network)
                    loss = l2_loss(pred, pair.label_patch.values)
                    value = float(loss.data)
                    if not math.isfinite(value):
                        raise NumericalError(
                            f"non-finite loss in batch {len(trace)}; largest gradient "
                            f"on {_largest_grad_param(params)!r}"
                        )
                    tape.backward(tz.scale(loss, 1.0 / len(batch)))
                batch_loss += value / len(batch)
            if cfg.grad_clip > 0.0:
                norm = _grad_global_norm(params)
                if norm > cfg.grad_clip:
                    factor = cfg.grad_clip / norm
                    for _, p in params.items():
                        if p.grad is not None:
                            p.grad = p.grad * factor
            adam_step(params, opt, lr, cfg)
            trace.append(batch_loss)
            if log is not None:
                log(epoch, len(trace) - 1, batch_loss)
        if (cfg.checkpoint_every and out_path is not None
                and (epoch + 1) % cfg.checkpoint_every == 0):
            save_checkpoint(out_path, cfg, params, opt, epoch + 1,
                            rng.bit_generator.state)
    if out_path is not None:
        save_checkpoint(out_path, cfg, params, opt, cfg.max_epochs,
                        rng.bit_generator.state)
    return TrainResult(params, opt, trace, cfg.max_epochs, cfg)


# ---------------------------------------------------------------------------
# checkpoint container (.cbck)
# ---------------------------------------------------------------------------

_MAGIC = b"CBCK"


def _pack_tensors(entries: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [struct.pack("<I", len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        for ext in arr.shape:
            parts.append(struct.pack("<I", ext))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes, offset: int = 0):
        self.raw = raw
        self.pos = offset

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=self.pos)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def _unpack_tensors(r: _Reader) -> list[tuple[str, np.ndarray]]:
    count = r.u32("tensor count")
    out = []
    for _ in range(count):
        nlen = r.u16("tensor name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        rank = r.u8("tensor rank")
        shape = tuple(r.u32("tensor extent") for _ in range(rank))
        numel = int(np.prod(shape)) if rank else 1
        payload = r.take(4 * numel, f"tensor {name!r} payload")
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
        out.append((name, arr))
    return out


@dataclass
class Checkpoint:
    network: NetworkConfig
    train_cfg: TrainConfig | None
    params: ParameterStore
    opt: OptimizerState | None
    epoch: int
    rng_state: dict | None


def save_checkpoint(path, cfg: TrainConfig, params: ParameterStore,
                    opt: OptimizerState | None, epoch: int,
                    rng_state: dict | None) -> None:
    """Serialize config, parameters, and optimizer state with a trailing CRC32.

    The live parameters (and moments) are rounded to f32 first so the file is
    a bit-exact image of the state that training continues from.
    """
    _quantize_to_f32(params, opt)
    meta = {
        "network": cfg.network.to_dict(),
        "train": cfg.to_dict(),
        "epoch": int(epoch),
        "rng": rng_state,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_MAGIC, struct.pack("<B", 1), struct.pack("<I", len(blob)), blob]
    parts.append(_pack_tensors([(name, t.data) for name, t in params.items()]))
    if opt is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<B", 1))
        entries = [("step", np.array(float(opt.step)))]
        for name in opt.m:
            entries.append((name + "#m", opt.m[name]))
            entries.append((name + "#v", opt.v[name]))
        parts.append(_pack_tensors(entries))
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 + 1 + 4 + 4:
        raise FormatError("checkpoint too short", offset=len(raw))
    body, crc_bytes = raw[:-4], raw[-4:]
    if struct.unpack("<I", crc_bytes)[0] != zlib.crc32(body):
        raise FormatError("checkpoint CRC mismatch", offset=len(body))
    r = _Reader(body)
    if r.take(4, "magic") != _MAGIC:
        raise FormatError(f"bad magic, expected {_MAGIC!r}", offset=0)
    version = r.u8("version")
    if version != 1:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    blob = r.take(r.u32("config length"), "config json")
    meta = json.loads(blob.decode("utf-8"))
    network = NetworkConfig.from_dict(meta["network"])
    train_cfg = TrainConfig.from_dict(meta["train"]) if meta.get("train") else None
    store = ParameterStore()
    for name, arr in _unpack_tensors(r):
        store.add(name, arr)
    opt = None
    if r.u8("optimizer flag"):
        entries = dict(_unpack_tensors(r))
        step = int(entries.pop("step"))
        m = {k[:-2]: v for k, v in entries.items() if k.endswith("#m")}
        v = {k[:-2]: v2 for k, v2 in entries.items() if k.endswith("#v")}
        opt = OptimizerState(m=m, v=v, step=step)
    return Checkpoint(network, train_cfg, store, opt, int(meta["epoch"]),
                      meta.get("rng"))


# ---------------------------------------------------------------------------
# ablation sweeps
# ---------------------------------------------------------------------------

MODULE_VARIANTS = {
    "MBFE+MBR": dict(enable_qe=False, enable_cfqe=False),
    "MBFE+MBR+QE": dict(enable_qe=True, enable_cfqe=False),
    "MBFE+MBR+QE+CFQE": dict(enable_qe=True, enable_cfqe=True),
}

_ABLATION_FOOTNOTES = [
    "# full-scale reference (Vimeo-90K, 9 ResDBs): ST-SR 31.08 dB / 0.931",
    "# full-scale reference (Vid4, 9 ResDBs): ST-SR 29.69 dB / 0.882",
    "# full-scale module sweep best: MBFE+MBR+QE+CFQE",
]


@dataclass
class AblationRow:
    variant: str
    parameters: int
    stsr_psnr: float
    stsr_ssim: float
    ssr_psnr: float
    ssr_ssim: float
    tsr_psnr: float
    tsr_ssim: float


def ablate(base_cfg: TrainConfig, axis: str, values,
           train_clips: list[VideoCuboid],
           eval_clips: list[VideoCuboid] | None = None) -> tuple[list[AblationRow], str]:
    """Train and evaluate one variant per value under an identical seed/budget.

    ``axis`` is ``resdb_count``, ``conv3d_count``, or ``modules`` (values are
    the module-stack labels). Returns the rows and a CSV shaped like the
    published ablation tables, with full-scale reference values as comment
    footnotes.
    """
    eval_clips = train_clips if eval_clips is None else eval_clips
    rows: list[AblationRow] = []
    for value in values:
        if axis in ("resdb_count", "conv3d_count"):
            net = replace(base_cfg.network, **{axis: int(value)})
            label = str(value)
        elif axis == "modules":
            if value not in MODULE_VARIANTS:
                raise ContractError(
                    f"ablate: unknown module variant {value!r}; "
                    f"expected one of {sorted(MODULE_VARIANTS)}"
                )
            net = replace(base_cfg.network, **MODULE_VARIANTS[value])
            label = value
        else:
            raise ContractError(
                f"ablate: axis must be resdb_count, conv3d_count, or modules, got {axis!r}"
            )
        cfg = replace(base_cfg, network=net)
        result = train(train_clips, cfg)
        reports = []
        for clip in eval_clips:
            sr = super_resolve(degrade(clip, net.spatial_factor), result.params, net)
            reports.append(evaluate(clip, sr))
        rows.append(AblationRow(
            variant=label,
            parameters=param_count(result.params),
            stsr_psnr=float(np.mean([r.stsr_psnr for r in reports])),
            stsr_ssim=float(np.mean([r.stsr_ssim for r in reports])),
            ssr_psnr=float(np.mean([r.ssr_psnr for r in reports])),
            ssr_ssim=float(np.mean([r.ssr_ssim for r in reports])),
            tsr_psnr=float(np.mean([r.tsr_psnr for r in reports])),
            tsr_ssim=float(np.mean([r.tsr_ssim for r in reports])),
        ))
    lines = ["variant,parameters,stsr_psnr,stsr_ssim,ssr_psnr,ssr_ssim,tsr_psnr,tsr_ssim"]
    for row in rows:
        lines.append(
            f"{row.variant},{row.parameters},{row.stsr_psnr:.4f},{row.stsr_ssim:.4f},"
            f"{row.ssr_psnr:.4f},{row.ssr_ssim:.4f},{row.tsr_psnr:.4f},{row.tsr_ssim:.4f}"
        )
    lines.extend(_ABLATION_FOOTNOTES)
    return rows, "\n".join(lines) + "\n"
