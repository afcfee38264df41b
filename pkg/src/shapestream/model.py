"""Two-tower voxel encoder / sequence block / decoder, in four variants.

One tower embeds only the current frame; the other embeds the frame, adds a
sinusoidal positional encoding and runs the variant's sequence block so the
token can attend to everything seen so far. Both embeddings are summed and
decoded to an r^3 sigmoid occupancy grid in the current camera frame.

Variants differ only in the sequence block:
  * mvp         - kernelized linear attention over the constant-size
                  associative memory (softmax random features or relu)
  * mvt         - exact quadratic attention over the stored key/value history
  * lstm        - an LSTM cell in place of the attention sublayer
  * single_view - a history-free dense sublayer (baseline floor)

Block layers are pre-normalized (RMS scale) with residual attention/recurrent
and MLP sublayers. Attention is single-head by default; extra heads split the
query/key and value widths, each head owning its own memory. Intermediate
activations are ReLU; the output activation is a sigmoid, so predictions
always lie in (0, 1).

``sequence_predictions`` runs the whole gradient-tracked unroll used in
training; ``forward_step`` advances one frame at a time with per-variant
streaming state (constant-size for mvp, growing for mvt) and produces the
same numbers as the unrolled pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import attention as attn
from .autograd import Tensor, concat, conv3d, conv_transpose3d, no_grad
from .voxel import VoxelGrid

logger = logging.getLogger(__name__)

VARIANTS = ("mvp", "mvt", "lstm", "single_view")
TRAIN_VIEW_CHOICES = (3, 6, 12)

ENC_KERNEL, ENC_STRIDE, ENC_PAD = 3, 2, 1
DEC_KERNEL, DEC_STRIDE, DEC_PAD = 4, 2, 1
RMS_EPS = 1e-6
BCE_EPS = 1e-7
OUTPUT_BIAS_INIT = -2.0  # sparse-occupancy prior on the sigmoid head


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "mvp"
    resolution: int = 16
    latent_dim: int = 128
    qk_dim: int = 32
    feature_count: int = 64          # softmax kernel only, per head
    kernel: str = "relu"             # attention kernel for mvp/mvt
    performer_layers: int = 2
    attention_heads: int = 1
    conv_channels: tuple = (8, 16, 32)
    mlp_ratio: int = 2
    train_views: int = 12
    max_views: int = 64              # positional-encoding table length
    share_towers: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))

    def validate(self) -> "ModelConfig":
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.train_views not in TRAIN_VIEW_CHOICES:
            raise ValueError(
                f"train_views must be one of {TRAIN_VIEW_CHOICES}, got {self.train_views}")
        if self.kernel not in attn.KERNEL_KINDS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if not self.conv_channels:
            raise ValueError("invalid channel schedule: empty")
        r = self.resolution
        for _ in self.conv_channels:
            if r % 2 != 0:
                raise ValueError(
                    f"invalid channel schedule: resolution {self.resolution} does not "
                    f"halve through {len(self.conv_channels)} conv stages")
            r //= 2
        if r < 1:
            raise ValueError("invalid channel schedule: spatial size collapses below 1")
        if min(self.latent_dim, self.qk_dim, self.feature_count,
               self.performer_layers, self.attention_heads, self.max_views) < 1:
            raise ValueError("model dimensions must be positive")
        if self.qk_dim % self.attention_heads or self.latent_dim % self.attention_heads:
            raise ValueError(
                f"qk_dim {self.qk_dim} and latent_dim {self.latent_dim} must be "
                f"divisible by attention_heads {self.attention_heads}")
        return self

    @property
    def bottleneck_spatial(self) -> int:
        return self.resolution // (2 ** len(self.conv_channels))

    @property
    def bottleneck_flat(self) -> int:
        return self.conv_channels[-1] * self.bottleneck_spatial ** 3

    @property
    def head_qk_dim(self) -> int:
        return self.qk_dim // self.attention_heads

    @property
    def head_value_dim(self) -> int:
        return self.latent_dim // self.attention_heads

    def feature_maps(self) -> list[attn.KernelFeatureMap]:
        """One feature map per attention head; softmax heads draw distinct
        projections."""
        if self.kernel == "relu":
            return [attn.feature_map("relu", d_qk=self.head_qk_dim)
                    for _ in range(self.attention_heads)]
        return [attn.feature_map("softmax", d_qk=self.head_qk_dim,
                                 m=self.feature_count, seed=self.seed + head)
                for head in range(self.attention_heads)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        raw["conv_channels"] = tuple(raw["conv_channels"])
        return cls(**raw).validate()


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos table over frame index, shape (length, dim)."""
    pos = np.arange(length)[:, None]
    idx = np.arange(dim)[None, :]
    angles = pos / np.power(10000.0, (2 * (idx // 2)) / dim)
    table = np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))
    return table


# ---------------------------------------------------------------------------
# model and parameters
# ---------------------------------------------------------------------------


class MvpModel:
    """Parameter container plus the per-variant forward machinery."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.pos_table = sinusoidal_positions(config.max_views, config.latent_dim)
        self.fmaps = config.feature_maps()

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def init_state(self) -> "SequenceState":
        return SequenceState.fresh(self)


@dataclass
class SequenceState:
    """Per-sequence streaming state; constant-size for mvp, growing for mvt."""

    variant: str
    frame_index: int = 0
    layers: list = field(default_factory=list)

    @classmethod
    def fresh(cls, model: MvpModel) -> "SequenceState":
        cfg = model.config
        layers: list = []
        for _ in range(cfg.performer_layers):
            if cfg.variant == "mvp":
                layers.append([attn.AssociativeMemory.fresh(fmap, cfg.head_value_dim)
                               for fmap in model.fmaps])
            elif cfg.variant == "mvt":
                layers.append([{"keys": [], "values": []}
                               for _ in range(cfg.attention_heads)])
            elif cfg.variant == "lstm":
                layers.append({"h": np.zeros((1, cfg.latent_dim)),
                               "c": np.zeros((1, cfg.latent_dim))})
        return cls(variant=cfg.variant, layers=layers)

    @property
    def nbytes(self) -> int:
        total = 0
        for layer in self.layers:
            if self.variant == "mvp":
                total += sum(mem.nbytes for mem in layer)
            elif self.variant == "mvt":
                for hist in layer:
                    total += sum(a.nbytes for a in hist["keys"])
                    total += sum(a.nbytes for a in hist["values"])
            else:
                total += layer["h"].nbytes + layer["c"].nbytes
        return total


def _he(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _linear_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(1.0 / fan_in)


def build_model(config: ModelConfig) -> MvpModel:
    """Deterministic He-style initialization under config.seed."""
    config = config.validate()
    rng = np.random.default_rng(config.seed)
    d = config.latent_dim
    k3 = ENC_KERNEL ** 3
    params: dict[str, Tensor] = {}

    def add(name: str, value: np.ndarray):
        params[name] = Tensor(value, requires_grad=True)

    towers = ("frame",) if config.share_towers else ("frame", "ctx")
    for tower in towers:
        in_ch = 1
        for li, out_ch in enumerate(config.conv_channels):
            add(f"{tower}.conv{li}",
                _he(rng, (out_ch, in_ch, ENC_KERNEL, ENC_KERNEL, ENC_KERNEL), in_ch * k3))
            in_ch = out_ch
        add(f"{tower}.dense.w", _he(rng, (config.bottleneck_flat, d), config.bottleneck_flat))
        add(f"{tower}.dense.b", np.zeros(d))

    hidden = config.mlp_ratio * d
    for l in range(config.performer_layers):
        add(f"blk{l}.norm1.scale", np.ones(d))
        if config.variant in ("mvp", "mvt"):
            add(f"blk{l}.wq", _linear_init(rng, (d, config.qk_dim), d))
            add(f"blk{l}.wk", _linear_init(rng, (d, config.qk_dim), d))
            add(f"blk{l}.wv", _linear_init(rng, (d, d), d))
            add(f"blk{l}.wo", _linear_init(rng, (d, d), d))
        elif config.variant == "lstm":
            add(f"blk{l}.lstm.wx", _linear_init(rng, (d, 4 * d), d))
            add(f"blk{l}.lstm.wh", _linear_init(rng, (d, 4 * d), d))
            bias = np.zeros(4 * d)
            bias[d : 2 * d] = 1.0  # forget-gate bias
            add(f"blk{l}.lstm.b", bias)
        else:  # single_view
            add(f"blk{l}.dense.w", _he(rng, (d, d), d))
            add(f"blk{l}.dense.b", np.zeros(d))
        add(f"blk{l}.norm2.scale", np.ones(d))
        add(f"blk{l}.mlp.w1", _he(rng, (d, hidden), d))
        add(f"blk{l}.mlp.b1", np.zeros(hidden))
        add(f"blk{l}.mlp.w2", _linear_init(rng, (hidden, d), hidden))
        add(f"blk{l}.mlp.b2", np.zeros(d))

    add("dec.dense.w", _he(rng, (d, config.bottleneck_flat), d))
    add("dec.dense.b", np.zeros(config.bottleneck_flat))
    dk3 = DEC_KERNEL ** 3
    dec_channels = list(reversed(config.conv_channels)) + [1]
    for li in range(len(dec_channels) - 1):
        in_ch, out_ch = dec_channels[li], dec_channels[li + 1]
        add(f"dec.convt{li}",
            _he(rng, (in_ch, out_ch, DEC_KERNEL, DEC_KERNEL, DEC_KERNEL), in_ch * dk3))
    add("dec.out_bias", np.array(OUTPUT_BIAS_INIT))

    model = MvpModel(config, params)
    logger.info("built %s model: %d parameters", config.variant, model.parameter_count)
    return model


# ---------------------------------------------------------------------------
# forward pieces (shared by training unroll and streaming inference)
# ---------------------------------------------------------------------------


def _tower_prefix(model: MvpModel, tower: str) -> str:
    return "frame" if model.config.share_towers else tower


def _encode(model: MvpModel, tower: str, values: np.ndarray) -> Tensor:
    cfg = model.config
    prefix = _tower_prefix(model, tower)
    x = Tensor(values.reshape(1, 1, *values.shape))
    for li in range(len(cfg.conv_channels)):
        x = conv3d(x, model.params[f"{prefix}.conv{li}"], ENC_STRIDE, ENC_PAD).relu()
    flat = x.reshape(1, cfg.bottleneck_flat)
    return (flat @ model.params[f"{prefix}.dense.w"] + model.params[f"{prefix}.dense.b"]).relu()


def _decode(model: MvpModel, embedding: Tensor) -> Tensor:
    cfg = model.config
    z = (embedding @ model.params["dec.dense.w"] + model.params["dec.dense.b"]).relu()
    s = cfg.bottleneck_spatial
    x = z.reshape(1, cfg.conv_channels[-1], s, s, s)
    n_stages = len(cfg.conv_channels)
    for li in range(n_stages):
        x = conv_transpose3d(x, model.params[f"dec.convt{li}"], DEC_STRIDE, DEC_PAD)
        if li < n_stages - 1:
            x = x.relu()
    x = x + model.params["dec.out_bias"]
    r = cfg.resolution
    return x.sigmoid().reshape(r, r, r)


def _rms_norm(x: Tensor, scale: Tensor) -> Tensor:
    ms = (x * x).mean(axis=1, keepdims=True) + RMS_EPS
    return x * ms.pow(-0.5) * scale


def _mlp(model: MvpModel, l: int, x: Tensor) -> Tensor:
    p = model.params
    h = (x @ p[f"blk{l}.mlp.w1"] + p[f"blk{l}.mlp.b1"]).relu()
    return h @ p[f"blk{l}.mlp.w2"] + p[f"blk{l}.mlp.b2"]


def _lstm_cell(model: MvpModel, l: int, x: Tensor, h: Tensor, c: Tensor
               ) -> tuple[Tensor, Tensor]:
    p = model.params
    d = model.config.latent_dim
    gates = x @ p[f"blk{l}.lstm.wx"] + h @ p[f"blk{l}.lstm.wh"] + p[f"blk{l}.lstm.b"]
    i = gates.narrow(1, 0, d).sigmoid()
    f = gates.narrow(1, d, d).sigmoid()
    g = gates.narrow(1, 2 * d, d).tanh()
    o = gates.narrow(1, 3 * d, d).sigmoid()
    c_new = f * c + i * g
    h_new = o * c_new.tanh()
    return h_new, c_new


def _head_slices(cfg: ModelConfig, qs, ks, vs, head: int):
    hq, hv = cfg.head_qk_dim, cfg.head_value_dim
    return ([q.narrow(1, head * hq, hq) for q in qs],
            [k.narrow(1, head * hq, hq) for k in ks],
            [v.narrow(1, head * hv, hv) for v in vs])


def _attend_sequence(model: MvpModel, qs, ks, vs) -> list[Tensor]:
    """Per-head causal attention over the whole token sequence."""
    cfg = model.config
    if cfg.attention_heads == 1:
        if cfg.variant == "mvp":
            return attn.causal_linear_attention_t(qs, ks, vs, model.fmaps[0])
        return attn.exact_causal_attention_t(qs, ks, vs, cfg.kernel)
    per_head = []
    for head in range(cfg.attention_heads):
        hq, hk, hv = _head_slices(cfg, qs, ks, vs, head)
        if cfg.variant == "mvp":
            per_head.append(attn.causal_linear_attention_t(hq, hk, hv,
                                                           model.fmaps[head]))
        else:
            per_head.append(attn.exact_causal_attention_t(hq, hk, hv, cfg.kernel))
    return [concat([per_head[h][i] for h in range(cfg.attention_heads)], axis=1)
            for i in range(len(qs))]


def _block_sequence(model: MvpModel, tokens: list[Tensor]) -> list[Tensor]:
    """Full-sequence pass through the block stack (gradient-tracked)."""
    cfg = model.config
    p = model.params
    for l in range(cfg.performer_layers):
        if cfg.variant in ("mvp", "mvt"):
            normed = [_rms_norm(t, p[f"blk{l}.norm1.scale"]) for t in tokens]
            qs = [n @ p[f"blk{l}.wq"] for n in normed]
            ks = [n @ p[f"blk{l}.wk"] for n in normed]
            vs = [n @ p[f"blk{l}.wv"] for n in normed]
            att = _attend_sequence(model, qs, ks, vs)
            tokens = [t + a @ p[f"blk{l}.wo"] for t, a in zip(tokens, att)]
        elif cfg.variant == "lstm":
            h = Tensor(np.zeros((1, cfg.latent_dim)))
            c = Tensor(np.zeros((1, cfg.latent_dim)))
            new_tokens = []
            for t in tokens:
                h, c = _lstm_cell(model, l, _rms_norm(t, p[f"blk{l}.norm1.scale"]), h, c)
                new_tokens.append(t + h)
            tokens = new_tokens
        else:  # single_view: history-free dense sublayer
            tokens = [
                t + ((_rms_norm(t, p[f"blk{l}.norm1.scale"]) @ p[f"blk{l}.dense.w"]
                      + p[f"blk{l}.dense.b"]).relu())
                for t in tokens
            ]
        tokens = [t + _mlp(model, l, _rms_norm(t, p[f"blk{l}.norm2.scale"]))
                  for t in tokens]
    return tokens


def _block_step(model: MvpModel, state: SequenceState, token: Tensor) -> Tensor:
    """One streaming step through the block stack, updating state in place."""
    cfg = model.config
    p = model.params
    for l in range(cfg.performer_layers):
        if cfg.variant in ("mvp", "mvt"):
            normed = _rms_norm(token, p[f"blk{l}.norm1.scale"])
            q = (normed @ p[f"blk{l}.wq"]).data[0]
            k = (normed @ p[f"blk{l}.wk"]).data[0]
            v = (normed @ p[f"blk{l}.wv"]).data[0]
            hq, hv = cfg.head_qk_dim, cfg.head_value_dim
            outs = []
            for head in range(cfg.attention_heads):
                kh = k[head * hq : (head + 1) * hq]
                qh = q[head * hq : (head + 1) * hq]
                vh = v[head * hv : (head + 1) * hv]
                if cfg.variant == "mvp":
                    mem: attn.AssociativeMemory = state.layers[l][head]
                    attn.memory_update(mem, kh, vh)
                    outs.append(attn.memory_query(mem, qh, fallback=vh))
                else:
                    hist = state.layers[l][head]
                    hist["keys"].append(kh)
                    hist["values"].append(vh)
                    outs.append(_exact_attention_row(qh, hist["keys"], hist["values"],
                                                     cfg.kernel))
            out = np.concatenate(outs)
            token = token + Tensor(out[None, :]) @ p[f"blk{l}.wo"]
        elif cfg.variant == "lstm":
            layer = state.layers[l]
            h, c = Tensor(layer["h"]), Tensor(layer["c"])
            h, c = _lstm_cell(model, l, _rms_norm(token, p[f"blk{l}.norm1.scale"]), h, c)
            layer["h"], layer["c"] = h.data, c.data
            token = token + h
        else:
            token = token + ((_rms_norm(token, p[f"blk{l}.norm1.scale"])
                              @ p[f"blk{l}.dense.w"] + p[f"blk{l}.dense.b"]).relu())
        token = token + _mlp(model, l, _rms_norm(token, p[f"blk{l}.norm2.scale"]))
    return token


def _exact_attention_row(q: np.ndarray, keys: list, values: list, kernel: str) -> np.ndarray:
    """Newest row of exact attention over the stored history (mvt step)."""
    K = np.stack(keys)
    V = np.stack(values)
    if kernel == "softmax":
        logits = K @ q
        w = np.exp(logits - logits.max())
    else:
        w = np.maximum(K, 0.0) @ np.maximum(q, 0.0)
    total = w.sum()
    if total <= attn.EPS_DENOM:
        return values[-1].copy()
    return (w @ V) / total


def _frame_values(frame) -> np.ndarray:
    return frame.values if isinstance(frame, VoxelGrid) else np.asarray(frame, dtype=np.float64)


# ---------------------------------------------------------------------------
# public forward / loss
# ---------------------------------------------------------------------------


def sequence_predictions(model: MvpModel, frames: list) -> list[Tensor]:
    """Gradient-tracked predictions for every frame of a sequence."""
    cfg = model.config
    if len(frames) > cfg.max_views:
        raise ValueError(f"sequence length {len(frames)} exceeds max_views {cfg.max_views}")
    values = [_frame_values(f) for f in frames]
    for v in values:
        if v.shape != (cfg.resolution,) * 3:
            raise ValueError(
                f"frame shape {v.shape} does not match model resolution {cfg.resolution}")
    frame_emb = [_encode(model, "frame", v) for v in values]
    tokens = [_encode(model, "ctx", v) + Tensor(model.pos_table[i : i + 1])
              for i, v in enumerate(values)]
    context = _block_sequence(model, tokens)
    return [_decode(model, e + c) for e, c in zip(frame_emb, context)]


def forward_step(model: MvpModel, state: SequenceState, frame: VoxelGrid
                 ) -> tuple[VoxelGrid, SequenceState]:
    """Absorb one frame and predict the full occupancy in its camera frame."""
    cfg = model.config
    if state.variant != cfg.variant:
        raise ValueError(f"state variant {state.variant!r} does not match model "
                         f"variant {cfg.variant!r}")
    if frame.resolution != cfg.resolution:
        raise ValueError(f"frame resolution {frame.resolution} does not match "
                         f"model resolution {cfg.resolution}")
    if state.frame_index >= cfg.max_views:
        raise ValueError(f"sequence exceeds max_views {cfg.max_views}")
    with no_grad():
        e = _encode(model, "frame", frame.values)
        token = (_encode(model, "ctx", frame.values)
                 + Tensor(model.pos_table[state.frame_index : state.frame_index + 1]))
        token = _block_step(model, state, token)
        pred = _decode(model, e + token)
    state.frame_index += 1
    return VoxelGrid(pred.data, frame.origin, frame.voxel_size), state


def bce_from_predictions(preds: list[Tensor], targets: list) -> Tensor:
    """Mean BCE over frames and voxels; predictions clamped to [eps, 1-eps]."""
    if len(preds) != len(targets):
        raise ValueError(f"{len(preds)} predictions vs {len(targets)} targets")
    target_values = [_frame_values(t) for t in targets]
    for t in target_values:
        if t.min() < 0.0 or t.max() > 1.0:
            raise ValueError("target values outside [0, 1]")
    total = None
    for pred, t in zip(preds, target_values):
        p = pred.clip(BCE_EPS, 1.0 - BCE_EPS)
        tt = Tensor(t)
        bce = -(tt * p.log() + (1.0 - tt) * (1.0 - p).log()).mean()
        total = bce if total is None else total + bce
    return total * (1.0 / len(preds))


def sequence_loss(model: MvpModel, frames: list, targets: list) -> Tensor:
    """Mean binary cross-entropy over frames and voxels, clamped at 1e-7."""
    if len(frames) != len(targets):
        raise ValueError(f"{len(frames)} frames vs {len(targets)} targets")
    return bce_from_predictions(sequence_predictions(model, frames), targets)
