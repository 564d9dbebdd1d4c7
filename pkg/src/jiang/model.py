"""Decoder architecture: RMSNorm, rotary positions, attention with biases
only on the Q/K/V projections, gated FFN, pre-norm residual blocks.

Forward passes with frozen weights are safe to run from multiple threads
(weights are never mutated, activations are per-call); training mutates
weights and is single-writer.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor

BIAS_POLICIES = ("qkv_only", "none", "all")


@dataclass
class ModelConfig:
    d_model: int
    n_layers: int
    n_heads: int
    vocab_size: int
    ffn_ratio: float = 2.4
    max_seq_len: int = 256
    rope_base: float = 10000.0
    rmsnorm_eps: float = 1e-5
    bias_policy: str = "qkv_only"
    gated: bool = True
    tied_head: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.ffn_ratio <= 0 or self.rmsnorm_eps <= 0 or self.rope_base <= 1:
            raise ValueError("ffn_ratio and rmsnorm_eps must be > 0, rope_base > 1")
        if self.bias_policy not in BIAS_POLICIES:
            raise ValueError(f"bias_policy must be one of {BIAS_POLICIES}")
        if min(self.d_model, self.n_layers, self.n_heads, self.vocab_size, self.max_seq_len) < 1:
            raise ValueError("all dimensions must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ffn_hidden(self) -> int:
        # ratio * d_model rounded to the nearest multiple of 8
        return max(8, int(round(self.ffn_ratio * self.d_model / 8.0)) * 8)

    def to_kv_block(self) -> str:
        lines = []
        for k in ("d_model", "n_layers", "n_heads", "vocab_size", "ffn_ratio", "max_seq_len",
                  "rope_base", "rmsnorm_eps", "bias_policy", "gated", "tied_head"):
            lines.append(f"{k}={getattr(self, k)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv_block(cls, text: str) -> "ModelConfig":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            kv[key] = value
        return cls(
            d_model=int(kv["d_model"]),
            n_layers=int(kv["n_layers"]),
            n_heads=int(kv["n_heads"]),
            vocab_size=int(kv["vocab_size"]),
            ffn_ratio=float(kv["ffn_ratio"]),
            max_seq_len=int(kv["max_seq_len"]),
            rope_base=float(kv["rope_base"]),
            rmsnorm_eps=float(kv["rmsnorm_eps"]),
            bias_policy=kv["bias_policy"],
            gated=kv["gated"] == "True",
            tied_head=kv["tied_head"] == "True",
        )


def preset_400m() -> ModelConfig:
    """The deep-narrow 400M ablation configuration (d=1024, 22 layers,
    FFN ratio 2.4, 65600-token vocabulary, untied head)."""
    return ModelConfig(
        d_model=1024,
        n_layers=22,
        n_heads=16,
        vocab_size=65600,
        ffn_ratio=2.4,
        max_seq_len=4096,
        tied_head=False,
    )


@dataclass
class DecoderWeights:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def named(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def copy(self) -> "DecoderWeights":
        out = DecoderWeights(self.config)
        for name, p in self.params.items():
            out.params[name] = Tensor(p.data.copy(), requires_grad=p.requires_grad)
        return out


def _param_spec(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) for every parameter, in serialization order.

    init kinds: "embed"/"proj" normal(0, 0.02), "resid" the depth-scaled
    residual-output variant, "ones"/"zeros" constants.
    """
    d, h = config.d_model, config.ffn_hidden
    qkv_bias = config.bias_policy in ("qkv_only", "all")
    all_bias = config.bias_policy == "all"
    spec: list[tuple[str, tuple[int, ...], str]] = [("embed.weight", (config.vocab_size, d), "embed")]
    for i in range(config.n_layers):
        pre = f"layers.{i}"
        spec.append((f"{pre}.attn_norm.gain", (d,), "ones"))
        for proj in ("wq", "wk", "wv"):
            spec.append((f"{pre}.attn.{proj}.weight", (d, d), "proj"))
            if qkv_bias:
                spec.append((f"{pre}.attn.{proj}.bias", (d,), "zeros"))
        spec.append((f"{pre}.attn.wo.weight", (d, d), "resid"))
        if all_bias:
            spec.append((f"{pre}.attn.wo.bias", (d,), "zeros"))
        spec.append((f"{pre}.ffn_norm.gain", (d,), "ones"))
        if config.gated:
            spec.append((f"{pre}.ffn.w_gate.weight", (d, h), "proj"))
            if all_bias:
                spec.append((f"{pre}.ffn.w_gate.bias", (h,), "zeros"))
        spec.append((f"{pre}.ffn.w_up.weight", (d, h), "proj"))
        if all_bias:
            spec.append((f"{pre}.ffn.w_up.bias", (h,), "zeros"))
        spec.append((f"{pre}.ffn.w_down.weight", (h, d), "resid"))
        if all_bias:
            spec.append((f"{pre}.ffn.w_down.bias", (d,), "zeros"))
    spec.append(("final_norm.gain", (d,), "ones"))
    if not config.tied_head:
        spec.append(("head.weight", (d, config.vocab_size), "proj"))
    return spec


def init_weights(config: ModelConfig, seed: int = 0, dtype=np.float32) -> DecoderWeights:
    rng = np.random.default_rng(seed)
    std = 0.02
    resid_std = 0.02 / math.sqrt(2.0 * config.n_layers)
    weights = DecoderWeights(config)
    for name, shape, kind in _param_spec(config):
        if kind == "ones":
            arr = np.ones(shape, dtype=dtype)
        elif kind == "zeros":
            arr = np.zeros(shape, dtype=dtype)
        elif kind == "resid":
            arr = rng.normal(0.0, resid_std, size=shape).astype(dtype)
        else:
            arr = rng.normal(0.0, std, size=shape).astype(dtype)
        weights.params[name] = Tensor(arr, requires_grad=True)
    return weights


def param_count(config: ModelConfig) -> int:
    """Exact parameter total; tied head weights are counted once."""
    return sum(int(np.prod(shape)) for _, shape, _ in _param_spec(config))


# ---------------------------------------------------------------------------
# building blocks

def rms_norm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    """gain * x / sqrt(mean(x^2) + eps); no centering, no bias."""
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"rms_norm: gain {gain.shape} vs feature dim {x.shape[-1]}")
    ms = ag.mean(ag.mul(x, x), axis=-1, keepdims=True)
    inv = ag.power(ag.add(ms, eps), -0.5)
    return ag.mul(ag.mul(x, inv), gain)


def rope_tables(positions, d_head: int, base: float, dtype=np.float64):
    """cos/sin of position * base^(-2i/d_head) for each coordinate pair i."""
    positions = np.asarray(positions, dtype=np.float64)
    freqs = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    angles = positions[:, None] * freqs[None, :]  # [T, d_head/2]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope_apply(x: Tensor, positions, base: float) -> Tensor:
    """Rotate adjacent coordinate pairs (x_{2i}, x_{2i+1}) by their
    position-proportional angles. Position 0 is the identity."""
    if x.shape[-1] % 2 != 0:
        raise ShapeError(f"rope_apply: head dim {x.shape[-1]} must be even")
    if len(positions) != x.shape[-2]:
        raise ShapeError(f"rope_apply: {len(positions)} positions for {x.shape[-2]} rows")
    cos, sin = rope_tables(positions, x.shape[-1], base, dtype=x.dtype)

    def rotate(arr, c, s):
        even, odd = arr[..., 0::2], arr[..., 1::2]
        out = np.empty_like(arr)
        out[..., 0::2] = even * c - odd * s
        out[..., 1::2] = even * s + odd * c
        return out

    def bwd(g):
        # inverse rotation (transpose of an orthogonal map)
        return (rotate(g, cos, -sin),)

    return ag.record_op("rope", (x,), rotate(x.data, cos, sin), bwd)


def causal_mask(t_count: int) -> np.ndarray:
    """True where key position j may attend from query position i (j <= i)."""
    return np.tril(np.ones((t_count, t_count), dtype=bool))


def attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = True) -> Tensor:
    """softmax(q k^T / sqrt(d_head) + mask) v over [heads, T, d_head]."""
    if not (q.shape == k.shape == v.shape) or q.ndim != 3:
        raise ShapeError(f"attention: shapes {q.shape}, {k.shape}, {v.shape} must match [H,T,D]")
    d_head = q.shape[-1]
    scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d_head))
    mask = causal_mask(q.shape[1]) if causal else None
    probs = ag.softmax(scores, axis=-1, mask=mask)
    return ag.matmul(probs, v)


def gated_ffn(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor,
              b_gate: Tensor | None = None, b_up: Tensor | None = None,
              b_down: Tensor | None = None) -> Tensor:
    """w_down( silu(x w_gate) * (x w_up) )."""
    gate = ag.matmul(x, w_gate)
    if b_gate is not None:
        gate = ag.add(gate, b_gate)
    up = ag.matmul(x, w_up)
    if b_up is not None:
        up = ag.add(up, b_up)
    out = ag.matmul(ag.mul(ag.silu(gate), up), w_down)
    if b_down is not None:
        out = ag.add(out, b_down)
    return out


def plain_ffn(x: Tensor, w_up: Tensor, w_down: Tensor,
              b_up: Tensor | None = None, b_down: Tensor | None = None) -> Tensor:
    """Ungated two-layer variant used by the gated=False ablation."""
    up = ag.matmul(x, w_up)
    if b_up is not None:
        up = ag.add(up, b_up)
    out = ag.matmul(ag.silu(up), w_down)
    if b_down is not None:
        out = ag.add(out, b_down)
    return out


def _project(x: Tensor, weights: DecoderWeights, name: str) -> Tensor:
    y = ag.matmul(x, weights[f"{name}.weight"])
    bias_name = f"{name}.bias"
    if bias_name in weights:
        y = ag.add(y, weights[bias_name])
    return y


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    t_count, d = x.shape
    return ag.transpose(ag.reshape(x, (t_count, n_heads, d // n_heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    n_heads, t_count, d_head = x.shape
    return ag.reshape(ag.transpose(x, (1, 0, 2)), (t_count, n_heads * d_head))


def decoder_forward(tokens, config: ModelConfig, weights: DecoderWeights,
                    use_tiled: bool = False) -> Tensor:
    """Logits [T, vocab] for a token id sequence.

    ``use_tiled`` routes attention through the memory-bounded kernel;
    that path is forward-only and refuses to run while gradients are
    being recorded.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ShapeError("decoder_forward: tokens must be a non-empty 1-D id sequence")
    if ids.size > config.max_seq_len:
        raise ShapeError(f"sequence length {ids.size} exceeds max_seq_len {config.max_seq_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ShapeError(f"token id {ids.max()} outside vocabulary of {config.vocab_size}")
    if use_tiled and ag.tape().enabled and any(p.requires_grad for p in weights.params.values()):
        raise ag.GraphError("tiled attention is forward-only; wrap the call in no_grad()")

    positions = np.arange(ids.size)
    x = ag.gather_rows(weights["embed.weight"], ids)
    for i in range(config.n_layers):
        pre = f"layers.{i}"
        h = rms_norm(x, weights[f"{pre}.attn_norm.gain"], config.rmsnorm_eps)
        q = _split_heads(_project(h, weights, f"{pre}.attn.wq"), config.n_heads)
        k = _split_heads(_project(h, weights, f"{pre}.attn.wk"), config.n_heads)
        v = _split_heads(_project(h, weights, f"{pre}.attn.wv"), config.n_heads)
        q = rope_apply(q, positions, config.rope_base)
        k = rope_apply(k, positions, config.rope_base)
        if use_tiled:
            from .flash_attention import tiled_attention
            attn = Tensor(tiled_attention(q.data, k.data, v.data, causal=True))
        else:
            attn = attention(q, k, v, causal=True)
        x = ag.add(x, _project(_merge_heads(attn), weights, f"{pre}.attn.wo"))
        h2 = rms_norm(x, weights[f"{pre}.ffn_norm.gain"], config.rmsnorm_eps)
        if config.gated:
            ffn = gated_ffn(
                h2,
                weights[f"{pre}.ffn.w_gate.weight"],
                weights[f"{pre}.ffn.w_up.weight"],
                weights[f"{pre}.ffn.w_down.weight"],
                weights.params.get(f"{pre}.ffn.w_gate.bias"),
                weights.params.get(f"{pre}.ffn.w_up.bias"),
                weights.params.get(f"{pre}.ffn.w_down.bias"),
            )
        else:
            ffn = plain_ffn(
                h2,
                weights[f"{pre}.ffn.w_up.weight"],
                weights[f"{pre}.ffn.w_down.weight"],
                weights.params.get(f"{pre}.ffn.w_up.bias"),
                weights.params.get(f"{pre}.ffn.w_down.bias"),
            )
        x = ag.add(x, ffn)
    x = rms_norm(x, weights["final_norm.gain"], config.rmsnorm_eps)
    if config.tied_head:
        head = ag.transpose(weights["embed.weight"], (1, 0))
    else:
        head = weights["head.weight"]
    return ag.matmul(x, head)


# ---------------------------------------------------------------------------
# checkpoint file: "JCKP" header with the config block and a tokens-seen
# counter, then named tensor records

CHECKPOINT_MAGIC = b"JCKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, weights: DecoderWeights, tokens_seen: int = 0,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """Extra records (optimizer state, counters) are stored after the
    model parameters under their own names."""
    records: list[tuple[str, np.ndarray]] = [(n, p.data) for n, p in weights.named()]
    if extra:
        records.extend(sorted(extra.items()))
    config_block = weights.config.to_kv_block().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(config_block)))
        fh.write(config_block)
        fh.write(struct.pack("<Q", int(tokens_seen)))
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            ag.write_tensor(fh, arr)


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], int]:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (config_len,) = struct.unpack("<I", fh.read(4))
        config = ModelConfig.from_kv_block(fh.read(config_len).decode("utf-8"))
        (tokens_seen,) = struct.unpack("<Q", fh.read(8))
        (n_records,) = struct.unpack("<I", fh.read(4))
        records: dict[str, np.ndarray] = {}
        for _ in range(n_records):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            records[name] = ag.read_tensor(fh)
    return config, records, tokens_seen


def weights_from_records(config: ModelConfig, records: dict[str, np.ndarray],
                         dtype=np.float32) -> DecoderWeights:
    weights = DecoderWeights(config)
    for name, shape, _ in _param_spec(config):
        if name not in records:
            raise ValueError(f"checkpoint is missing parameter {name}")
        arr = records[name]
        if arr.shape != shape:
            raise ValueError(f"parameter {name}: shape {arr.shape} != expected {shape}")
        weights.params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return weights


def load_weights(path) -> tuple[DecoderWeights, int, dict[str, np.ndarray]]:
    """Load a checkpoint into model weights plus any extra records."""
    config, records, tokens_seen = load_checkpoint(path)
    weights = weights_from_records(config, records)
    extra = {n: a for n, a in records.items() if n not in weights.params}
    return weights, tokens_seen, extra


__all__ = [
    "ModelConfig", "DecoderWeights", "preset_400m", "init_weights", "param_count",
    "rms_norm", "rope_tables", "rope_apply", "causal_mask", "attention", "gated_ffn",
    "plain_ffn", "decoder_forward", "save_checkpoint", "load_checkpoint",
    "weights_from_records", "load_weights", "replace",
]
