"""The single-shot phase-retrieval network: architecture, loss, training and checkpoints.

Layout (defaults in brackets)::

    input [B,1,k,k] / cap
      -> flatten -> FC(k^2 -> w) -> PReLU -> dropout -> FC(w -> w) -> PReLU -> FC(w -> w)
      -> reshape [B,1,sqrt(w),sqrt(w)]
      -> UR block x ur_blocks:
           (first block only) 3x3 lift conv 1 -> C
           residual unit x residual_units_per_ur:
               h + [conv block -> attention -> conv block -> attention] -> PReLU
           3x3 conv C -> C, pixel shuffle r (channels / r^2, extent * r)
      -> 3x3 conv -> PReLU -> 3x3 conv -> 2 channels (re, im)

A conv block is 3x3 conv, instance norm, per-channel PReLU. Attention is a
non-local block with 1x1 key/query/value projections of width
``C // attn_reduction`` and a zero-initialised 1x1 output projection.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NonFiniteError, Tensor

INPUT_CAP = 4095.0


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    input_crop: int = 128
    fc_width: int = 1024
    fc_count: int = 3
    dropout_count: int = 1
    dropout_rate: float = 0.2
    ur_blocks: int = 2
    attention_per_ur: int = 2
    residual_units_per_ur: int = 1
    conv_channels: int = 128
    shuffle_factor: int = 2
    output_extent: int = 128
    attn_reduction: int = 16
    upsample_blocks: int | None = None
    post_channels: int | None = None

    def __post_init__(self):
        side = math.isqrt(self.fc_width)
        if side * side != self.fc_width:
            raise ValueError(f"fc_width {self.fc_width} is not a perfect square")
        if self.fc_count < 1:
            raise ValueError("fc_count must be >= 1")
        if not 0 <= self.dropout_count <= self.fc_count:
            raise ValueError("dropout_count must lie in [0, fc_count]")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.ur_blocks < 1:
            raise ValueError("ur_blocks must be >= 1")
        if not 0 <= self.attention_per_ur <= 2:
            raise ValueError("attention_per_ur must be 0, 1 or 2")
        if self.residual_units_per_ur < 0:
            raise ValueError("residual_units_per_ur must be >= 0")
        if self.shuffle_factor < 1 or self.input_crop < 1 or self.attn_reduction < 1:
            raise ValueError("shuffle_factor, input_crop and attn_reduction must be >= 1")
        n_up = self.n_upsample
        if not 0 <= n_up <= self.ur_blocks:
            raise ValueError("upsample_blocks must lie in [0, ur_blocks]")
        if side * self.shuffle_factor ** n_up != self.output_extent:
            raise ValueError(f"sqrt(fc_width) * r^{n_up} = {side * self.shuffle_factor ** n_up} "
                             f"!= output extent {self.output_extent}")
        widths = self.block_channels()
        if min(widths) < 1 or any(c % self.shuffle_factor ** 2 for c, up in
                                   zip(widths[:-1], self.upsampling()) if up):
            raise ValueError("conv_channels must stay divisible by r^2 at every shuffle")

    @property
    def side(self) -> int:
        return math.isqrt(self.fc_width)

    @property
    def n_upsample(self) -> int:
        return self.ur_blocks if self.upsample_blocks is None else self.upsample_blocks

    def upsampling(self) -> list[bool]:
        """Which UR blocks end with a shuffle; the first ``n_upsample`` do."""
        return [i < self.n_upsample for i in range(self.ur_blocks)]

    def block_channels(self) -> list[int]:
        """Channel width entering each UR block, plus the width after the last one."""
        c, out = self.conv_channels, [self.conv_channels]
        for up in self.upsampling():
            if up:
                c //= self.shuffle_factor ** 2
            out.append(c)
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        return cls(**d)


FULL_MODEL = ModelConfig()
DESK_MODEL = ModelConfig(input_crop=32, fc_width=256, ur_blocks=1, output_extent=32, conv_channels=32)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch: int = 32
    lr: float = 1e-4
    lr_step: int = 100
    gamma: float = 0.9
    alpha_tv: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1 or self.lr_step < 1:
            raise ValueError("epochs, batch and lr_step must be >= 1")
        if self.lr <= 0 or self.alpha_tv < 0 or self.checkpoint_every < 0:
            raise ValueError("lr must be > 0, alpha_tv and checkpoint_every >= 0")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> TrainConfig:
        return cls(**d)


DESK_TRAIN = TrainConfig(epochs=300, batch=4, lr=3e-3)


def step_lr(base: float, epoch: int, step: int, gamma: float) -> float:
    """Learning rate used during 0-based ``epoch``."""
    return base * gamma ** (epoch // step)


# -- layer plan (shared by build and the analytic counters) ------------------

@dataclass(frozen=True)
class Layer:
    """One parameterised layer: its groups' shapes and its MAC count at batch 1."""

    name: str
    kind: str
    shapes: tuple[tuple[str, tuple[int, ...]], ...]
    macs: int = 0

    @property
    def params(self) -> int:
        return sum(math.prod(s) for _, s in self.shapes)


def _conv(name, cin, cout, k, positions) -> Layer:
    return Layer(name, "conv", (("W", (cout, cin, k, k)), ("b", (cout,))), cout * cin * k * k * positions)


def _conv_block(name, c, positions) -> list[Layer]:
    return [_conv(f"{name}.conv", c, c, 3, positions),
            Layer(f"{name}.norm", "norm", (("gamma", (c,)), ("beta", (c,)))),
            Layer(f"{name}.act", "prelu", (("a", (c,)),))]


def _attention(name, c, d, n) -> list[Layer]:
    proj = [_conv(f"{name}.{p}", c, d, 1, n) for p in ("theta", "phi", "g")]
    core = Layer(f"{name}.matmul", "attention", (), 2 * n * n * d)
    return proj + [core, _conv(f"{name}.out", d, c, 1, n)]


def layer_plan(cfg: ModelConfig) -> list[Layer]:
    plan: list[Layer] = []
    width_in = cfg.input_crop ** 2
    for i in range(cfg.fc_count):
        plan.append(Layer(f"fc.{i}", "fc", (("W", (width_in, cfg.fc_width)), ("b", (cfg.fc_width,))),
                          width_in * cfg.fc_width))
        if i < cfg.fc_count - 1:
            plan.append(Layer(f"fc_act.{i}", "prelu", (("a", (1,)),)))
        width_in = cfg.fc_width
    ext, chans = cfg.side, cfg.block_channels()
    r = cfg.shuffle_factor
    for i, up in enumerate(cfg.upsampling()):
        c, n = chans[i], ext * ext
        if i == 0:
            plan.append(_conv("ur.0.lift", 1, c, 3, n))
        d = max(1, c // cfg.attn_reduction)
        for u in range(cfg.residual_units_per_ur):
            base = f"ur.{i}.res.{u}"
            for j in range(2):
                plan += _conv_block(f"{base}.block.{j}", c, n)
                if j < cfg.attention_per_ur:
                    plan += _attention(f"{base}.attn.{j}", c, d, n)
            plan.append(Layer(f"{base}.out_act", "prelu", (("a", (c,)),)))
        plan.append(_conv(f"ur.{i}.up", c, c, 3, n))
        if up:
            ext *= r
    c, n = chans[-1], ext * ext
    p = cfg.post_channels or c
    plan += [_conv("post.0", c, p, 3, n), Layer("post.act", "prelu", (("a", (p,)),)),
             _conv("post.1", p, 2, 3, n)]
    return plan


def count_params(cfg: ModelConfig) -> dict[str, int]:
    """Analytic parameter counts: ``fc``, ``ur``, ``post`` subtotals and ``total``."""
    out = {"fc": 0, "ur": 0, "post": 0}
    for layer in layer_plan(cfg):
        out[layer.name.split(".")[0].replace("fc_act", "fc")] += layer.params
    out["total"] = sum(out.values())
    return out


def fc_param_count(cfg: ModelConfig) -> int:
    """Weights and biases of the FC stack only (slopes excluded)."""
    return sum(layer.params for layer in layer_plan(cfg) if layer.kind == "fc")


# -- parameters --------------------------------------------------------------

class ModelParams:
    """Named parameter tensors of one network instance."""

    def __init__(self, cfg: ModelConfig, tensors: "OrderedDict[str, Tensor]"):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def numel(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def groups(self) -> dict[str, dict[str, Tensor]]:
        """Tensors keyed by layer name, e.g. ``groups()["fc.0"]["W"]``."""
        out: dict[str, dict[str, Tensor]] = {}
        for name, t in self.tensors.items():
            layer, _, leaf = name.rpartition(".")
            out.setdefault(layer, {})[leaf] = t
        return out

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> ModelParams:
    """Allocate and initialise every parameter listed by :func:`layer_plan`."""
    rng = np.random.default_rng(seed)
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    for layer in layer_plan(cfg):
        for leaf, shape in layer.shapes:
            name = f"{layer.name}.{leaf}"
            if leaf == "W":
                fan_in = shape[0] if layer.kind == "fc" else math.prod(shape[1:])
                if layer.name.endswith(".out") and ".attn." in layer.name:
                    arr = np.zeros(shape, dtype=dtype)
                else:
                    arr = _kaiming_uniform(rng, shape, fan_in, dtype)
            elif leaf == "gamma":
                arr = np.ones(shape, dtype=dtype)
            elif leaf == "a":
                arr = np.full(shape, 0.25, dtype=dtype)
            else:
                arr = np.zeros(shape, dtype=dtype)
            tensors[name] = Tensor(arr, requires_grad=True, name=name)
    return ModelParams(cfg, tensors)


# -- forward -------------------------------------------------------------------

def _guard(name: str, fn: Callable[..., Tensor], *args, **kw) -> Tensor:
    try:
        return fn(*args, **kw)
    except NonFiniteError as e:
        raise NonFiniteError(f"layer {name} ({e.where})") from None


def _conv_layer(p: Mapping[str, Tensor], name: str, x: Tensor) -> Tensor:
    return _guard(name, ad.conv2d, x, p[f"{name}.W"], p[f"{name}.b"])


def self_attention(x: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    """Non-local block: ``x + out(value . softmax(query^T key)^T)``.

    Scores ``S[n, m] = sum_c query[c, n] key[c, m]`` are normalised over the
    key position ``m``.
    """
    B, C, H, W = x.shape
    N = H * W
    key = _conv_layer(p, f"{name}.theta", x)
    query = _conv_layer(p, f"{name}.phi", x)
    value = _conv_layer(p, f"{name}.g", x)
    d = key.shape[1]
    q = ad.transpose(ad.reshape(query, (B, d, N)), (0, 2, 1))
    k = ad.reshape(key, (B, d, N))
    v = ad.reshape(value, (B, value.shape[1], N))
    scores = _guard(name, ad.batched_matmul, q, k)
    attn = _guard(name, ad.softmax, scores, axis=-1)
    mixed = _guard(name, ad.batched_matmul, v, ad.transpose(attn, (0, 2, 1)))
    out = _conv_layer(p, f"{name}.out", ad.reshape(mixed, (B, v.shape[1], H, W)))
    return ad.add(x, out)


def _conv_block_fwd(p, name, x):
    y = _conv_layer(p, f"{name}.conv", x)
    y = _guard(f"{name}.norm", ad.instance_norm, y, p[f"{name}.norm.gamma"], p[f"{name}.norm.beta"])
    return _guard(f"{name}.act", ad.prelu, y, p[f"{name}.act.a"])


def forward(params: ModelParams, x: Tensor | np.ndarray, mode: str = "eval",
            rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Map ``[B,1,k,k]`` raw intensity crops to ``(re, im)``, each ``[B,1,out,out]``.

    ``mode="train"`` enables dropout, which then needs ``rng``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg, p = params.cfg, params.tensors
    x = x if isinstance(x, Tensor) else Tensor(x)
    k = cfg.input_crop
    if x.data.ndim != 4 or x.shape[1:] != (1, k, k):
        raise ValueError(f"input must be [B,1,{k},{k}], got {x.shape}")
    B = x.shape[0]
    dtype = p["fc.0.W"].dtype
    h = Tensor(x.data.astype(dtype, copy=False) * (1.0 / INPUT_CAP)) if not x.requires_grad \
        else ad.scale(x, 1.0 / INPUT_CAP)
    h = ad.reshape(h, (B, k * k))
    train = mode == "train"
    for i in range(cfg.fc_count):
        h = _guard(f"fc.{i}", ad.fc, h, p[f"fc.{i}.W"], p[f"fc.{i}.b"])
        if i < cfg.fc_count - 1:
            h = _guard(f"fc_act.{i}", ad.prelu, h, p[f"fc_act.{i}.a"])
        if i < cfg.dropout_count:
            h = ad.dropout(h, cfg.dropout_rate, train, rng)
    h = ad.reshape(h, (B, 1, cfg.side, cfg.side))
    r = cfg.shuffle_factor
    for i, up in enumerate(cfg.upsampling()):
        if i == 0:
            h = _conv_layer(p, "ur.0.lift", h)
        for u in range(cfg.residual_units_per_ur):
            base = f"ur.{i}.res.{u}"
            y = h
            for j in range(2):
                y = _conv_block_fwd(p, f"{base}.block.{j}", y)
                if j < cfg.attention_per_ur:
                    y = self_attention(y, p, f"{base}.attn.{j}")
            h = _guard(f"{base}.out_act", ad.prelu, ad.add(h, y), p[f"{base}.out_act.a"])
        h = _conv_layer(p, f"ur.{i}.up", h)
        if up:
            h = ad.pixel_shuffle(h, r)
    h = _conv_layer(p, "post.0", h)
    h = _guard("post.act", ad.prelu, h, p["post.act.a"])
    out = _conv_layer(p, "post.1", h)
    return out[:, 0:1], out[:, 1:2]


def predict(params: ModelParams, inputs: np.ndarray, batch: int = 32) -> np.ndarray:
    """Eval-mode complex predictions ``[B, out, out]`` without recording a graph."""
    res = []
    with ad.no_grad():
        for s in range(0, len(inputs), batch):
            re, im = forward(params, inputs[s:s + batch], "eval")
            res.append(re.data[:, 0] + 1j * im.data[:, 0])
    return np.concatenate(res) if res else np.zeros((0, params.cfg.output_extent,) * 2, complex)


# -- loss ----------------------------------------------------------------------

def total_variation(x: Tensor) -> Tensor:
    """Mean of |forward differences| over both axes of ``x[..., H, W]``, no wraparound."""
    dh = ad.absolute(ad.sub(x[..., :, 1:], x[..., :, :-1]))
    dv = ad.absolute(ad.sub(x[..., 1:, :], x[..., :-1, :]))
    n = dh.size + dv.size
    return ad.scale(ad.add(ad.sum_all(dh), ad.sum_all(dv)), 1.0 / n)


def loss(re: Tensor, im: Tensor, target_re, target_im, alpha: float = 1.0) -> Tensor:
    """``mean|re - t_re| + mean|im - t_im| + alpha * (TV(re) + TV(im))``."""
    tr = target_re if isinstance(target_re, Tensor) else Tensor(target_re)
    ti = target_im if isinstance(target_im, Tensor) else Tensor(target_im)
    if re.shape != tr.shape or im.shape != ti.shape or re.shape != im.shape:
        raise ValueError(f"loss: shape mismatch {re.shape}/{im.shape} vs {tr.shape}/{ti.shape}")
    l1 = ad.add(ad.mean_all(ad.absolute(ad.sub(re, tr))), ad.mean_all(ad.absolute(ad.sub(im, ti))))
    if alpha == 0:
        return l1
    return ad.add(l1, ad.scale(ad.add(total_variation(re), total_variation(im)), alpha))


# -- training ----------------------------------------------------------------

class TrainingError(RuntimeError):
    """Non-finite loss or gradient during training."""


@dataclass
class TrainData:
    inputs: np.ndarray       # [n, 1, k, k] raw counts
    target_re: np.ndarray    # [n, 1, s, s]
    target_im: np.ndarray

    def __post_init__(self):
        if len(self.inputs) == 0:
            raise ValueError("training set is empty")
        if not (len(self.inputs) == len(self.target_re) == len(self.target_im)):
            raise ValueError("inputs and targets differ in length")

    def __len__(self):
        return len(self.inputs)

    @classmethod
    def from_samples(cls, samples: Sequence) -> TrainData:
        return cls(np.stack([s.input for s in samples])[:, None].astype(np.float64),
                   np.stack([s.target_re for s in samples])[:, None].astype(np.float64),
                   np.stack([s.target_im for s in samples])[:, None].astype(np.float64))

    @property
    def targets(self) -> np.ndarray:
        return self.target_re[:, 0] + 1j * self.target_im[:, 0]


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    eval_psnr: float


@dataclass
class TrainResult:
    params: ModelParams
    state: AdamState
    history: list[EpochRecord] = field(default_factory=list)
    epochs_done: int = 0


def mean_phase_psnr(params: ModelParams, data: TrainData) -> float:
    from .metrics import phase_psnr
    pred = predict(params, data.inputs)
    return math.fsum(phase_psnr(p, t) for p, t in zip(pred, data.targets)) / len(data)


def batch_loss(params: ModelParams, data: TrainData, idx, alpha: float, mode: str = "eval",
               rng: np.random.Generator | None = None) -> Tensor:
    re, im = forward(params, data.inputs[idx], mode, rng)
    return loss(re, im, data.target_re[idx], data.target_im[idx], alpha)


def train(params: ModelParams, data: TrainData, tcfg: TrainConfig, state: AdamState | None = None,
          start_epoch: int = 0, eval_data: TrainData | None = None,
          checkpoint: Callable[[int, ModelParams, AdamState], None] | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Adam with a step schedule, from ``start_epoch`` (0-based) to ``tcfg.epochs``.

    Shuffling and dropout draw from generators keyed by ``(seed, epoch[, batch])``
    so a resumed run replays exactly what an uninterrupted one would.
    """
    state = state if state is not None else AdamState(lr=tcfg.lr)
    eval_data = eval_data or data
    history = []
    n = len(data)
    for epoch in range(start_epoch, tcfg.epochs):
        state.lr = step_lr(tcfg.lr, epoch, tcfg.lr_step, tcfg.gamma)
        order = np.random.default_rng([tcfg.seed, epoch]).permutation(n)
        total = 0.0
        for b, s in enumerate(range(0, n, tcfg.batch)):
            idx = order[s:s + tcfg.batch]
            drop_rng = np.random.default_rng([tcfg.seed, epoch, b, 1])
            params.zero_grad()
            try:
                L = batch_loss(params, data, idx, tcfg.alpha_tv, "train", drop_rng)
                L.backward()
                ad.adam_step(params.tensors, state)
            except NonFiniteError as e:
                raise TrainingError(f"epoch {epoch + 1} batch {b}: {e}") from e
            total += float(L.data) * len(idx)
        rec = EpochRecord(epoch + 1, state.lr, total / n, mean_phase_psnr(params, eval_data))
        history.append(rec)
        if on_epoch:
            on_epoch(rec)
        if checkpoint and tcfg.checkpoint_every and (epoch + 1) % tcfg.checkpoint_every == 0:
            checkpoint(epoch + 1, params, state)
    params.zero_grad()
    return TrainResult(params, state, history, max(start_epoch, tcfg.epochs))


HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "eval_psnr")


def write_history(history: Sequence[EpochRecord], path, append: bool = False) -> None:
    new = not append or not Path(path).exists()
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(HISTORY_COLUMNS)
        for r in history:
            w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.eval_psnr)])


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"SPRC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Bad magic, unsupported version, truncation, or parameter mismatch."""


@dataclass
class Checkpoint:
    epoch: int
    state: AdamState
    arrays: "OrderedDict[str, np.ndarray]"
    config: dict


def save_checkpoint(params: ModelParams, state: AdamState, epoch: int, path,
                    extra_config: Mapping | None = None) -> None:
    """Layout::

        b"SPRC", u16 version, u32 epoch, u64 adam step, f64 lr, beta1, beta2, eps,
        u32 config length, UTF-8 JSON config, u32 group count, then per group:
        u16 name length, name, u8 ndim, u32 dims, f64 values, u8 has moments,
        [f64 m, f64 v]
    """
    cfg = {"model": params.cfg.to_dict(), **(extra_config or {})}
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HIQdddd", CKPT_VERSION, epoch, state.t, state.lr, state.beta1, state.beta2, state.eps))
    buf.write(struct.pack("<I", len(blob)) + blob)
    buf.write(struct.pack("<I", len(params)))
    for name, t in params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        has = name in state.m
        buf.write(struct.pack("<B", int(has)))
        if has:
            buf.write(np.ascontiguousarray(state.m[name], dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(state.v[name], dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = raw[pos:pos + n]
        pos += n
        return out

    def unpack(fmt):
        return struct.unpack(fmt, take(struct.calcsize(fmt)))

    if take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an SPRC checkpoint")
    version, epoch, t, lr, b1, b2, eps = unpack("<HIQdddd")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (clen,) = unpack("<I")
    config = json.loads(take(clen).decode("utf-8"))
    (count,) = unpack("<I")
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, t=t)
    for _ in range(count):
        (nl,) = unpack("<H")
        name = take(nl).decode("utf-8")
        (ndim,) = unpack("<B")
        shape = unpack(f"<{ndim}I")
        size = 8 * math.prod(shape)
        arrays[name] = np.frombuffer(take(size), dtype="<f8").reshape(shape).copy()
        (has,) = unpack("<B")
        if has:
            state.m[name] = np.frombuffer(take(size), dtype="<f8").reshape(shape).copy()
            state.v[name] = np.frombuffer(take(size), dtype="<f8").reshape(shape).copy()
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return Checkpoint(epoch, state, arrays, config)


def restore(params: ModelParams, ckpt: Checkpoint) -> None:
    """Copy checkpoint arrays into ``params``, checking names and shapes."""
    missing = [n for n in params if n not in ckpt.arrays]
    extra = [n for n in ckpt.arrays if n not in params.tensors]
    if missing or extra:
        raise CheckpointError(f"parameter groups differ: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, t in params.items():
        a = ckpt.arrays[name]
        if a.shape != t.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {a.shape}, model {t.shape}")
        t.data = a.astype(t.dtype, copy=True)


def from_checkpoint(ckpt: Checkpoint) -> ModelParams:
    params = build(ModelConfig.from_dict(ckpt.config["model"]))
    restore(params, ckpt)
    return params


def config_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]
