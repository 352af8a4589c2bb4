"""Toy trainable ASR backbone.

Structure: two stride-2 convolutions (4x time downsampling), a one-hot
language embedding concatenated per frame, a linear input projection,
pre-norm self-attention blocks whose attention is restricted to fixed
chunks of frames, and a decoder projection to per-frame log posteriors.
All gradients flow through the minimal autodiff tape and are validated
against finite differences in the test suite.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad

ALWAYS_TRAINED_PREFIXES = ("conv1/", "conv2/", "input_proj/", "decoder/")
DOWNSAMPLE_FACTOR = 4


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    n_languages: int
    model_dim: int
    n_layers: int
    n_heads: int
    chunk_frames: int
    vocab_size: int
    seed: int = 0
    conv_channels: tuple[int, int] = (8, 8)
    ff_dim: int | None = None

    def __post_init__(self):
        if self.model_dim % self.n_heads != 0:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.chunk_frames < 1:
            raise ValueError("chunk_frames must be at least 1")
        if self.n_layers < 1:
            raise ValueError("n_layers must be at least 1")
        if self.input_dim < 1 or self.vocab_size < 2 or self.n_languages < 1:
            raise ValueError("bad model dimensions")
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))

    @property
    def hidden_ff_dim(self) -> int:
        return self.ff_dim if self.ff_dim else 4 * self.model_dim

    @property
    def conv_out_dim(self) -> int:
        freq = -(-self.input_dim // 2)
        freq = -(-freq // 2)
        return freq * self.conv_channels[1]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "n_languages": self.n_languages,
            "model_dim": self.model_dim,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "chunk_frames": self.chunk_frames,
            "vocab_size": self.vocab_size,
            "seed": self.seed,
            "conv_channels": list(self.conv_channels),
            "ff_dim": self.ff_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["conv_channels"] = tuple(d.get("conv_channels", (8, 8)))
        return cls(**d)


def downsampled_len(T: int) -> int:
    """Output frame count of the two stride-2 convolutions."""
    return -(-(-(-T // 2)) // 2)


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = math.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def layer_names(i: int) -> str:
    return f"layer{i:02d}"


def init_decoder_parameters(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {
        "decoder/ln_g": np.ones(config.model_dim),
        "decoder/ln_b": np.zeros(config.model_dim),
        "decoder/w": _uniform(rng, (config.model_dim, config.vocab_size), config.model_dim),
        "decoder/b": np.zeros(config.vocab_size),
    }


def init_parameters(config: ModelConfig) -> dict[str, np.ndarray]:
    """Seeded fan-in-scaled uniform initialization for every weight;
    biases start at zero and layer-norm gains at one. Insertion order is
    fixed so checkpoints serialize identically across runs."""
    rng = np.random.default_rng(config.seed)
    c1, c2 = config.conv_channels
    dm, ff = config.model_dim, config.hidden_ff_dim
    p: dict[str, np.ndarray] = {}
    p["conv1/w"] = _uniform(rng, (3, 3, 1, c1), 9)
    p["conv1/b"] = np.zeros(c1)
    p["conv2/w"] = _uniform(rng, (3, 3, c1, c2), 9 * c1)
    p["conv2/b"] = np.zeros(c2)
    in_dim = config.conv_out_dim + config.n_languages
    p["input_proj/w"] = _uniform(rng, (in_dim, dm), in_dim)
    p["input_proj/b"] = np.zeros(dm)
    for i in range(config.n_layers):
        base = layer_names(i)
        p[f"{base}/ln1/g"] = np.ones(dm)
        p[f"{base}/ln1/b"] = np.zeros(dm)
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{base}/attn/{name}"] = _uniform(rng, (dm, dm), dm)
        p[f"{base}/attn/bo"] = np.zeros(dm)
        p[f"{base}/ln2/g"] = np.ones(dm)
        p[f"{base}/ln2/b"] = np.zeros(dm)
        p[f"{base}/ff/w1"] = _uniform(rng, (dm, ff), dm)
        p[f"{base}/ff/b1"] = np.zeros(ff)
        p[f"{base}/ff/w2"] = _uniform(rng, (ff, dm), ff)
        p[f"{base}/ff/b2"] = np.zeros(dm)
    p.update(init_decoder_parameters(config, seed=config.seed + 1))
    return p


def make_leaves(params: dict[str, np.ndarray], trainable: dict[str, bool] | None = None) -> dict[str, ad.Tensor]:
    """Wrap parameter arrays as autodiff leaves (no copies, so in-place
    optimizer updates are visible on the next forward pass)."""
    return {
        name: ad.Tensor(arr, requires_grad=(trainable is None or trainable.get(name, False)))
        for name, arr in params.items()
    }


def _as_tensor(x) -> ad.Tensor:
    return x if isinstance(x, ad.Tensor) else ad.Tensor(np.asarray(x, dtype=np.float64))


def feature_encoder(leaves: dict[str, ad.Tensor], x) -> ad.Tensor:
    """Two stride-2 ReLU convolutions; flattens channels x frequency into
    the per-frame hidden dimension. Quadruples the frame shift."""
    x = _as_tensor(x)
    T, D = x.shape
    if T < 4:
        raise ValueError(f"too few frames: need at least 4, got {T}")
    h = ad.reshape(x, (T, D, 1))
    h = ad.relu(ad.conv2d(h, leaves["conv1/w"], leaves["conv1/b"], stride=2))
    h = ad.relu(ad.conv2d(h, leaves["conv2/w"], leaves["conv2/b"], stride=2))
    t_out = downsampled_len(T)
    return ad.reshape(h, (t_out, -1))


def one_hot_language(t: int, language_id: int, n_languages: int) -> np.ndarray:
    if not 0 <= language_id < n_languages:
        raise ValueError(f"language_id {language_id} out of range [0, {n_languages})")
    onehot = np.zeros((t, n_languages))
    onehot[:, language_id] = 1.0
    return onehot


def attach_language(leaves: dict[str, ad.Tensor], hidden: ad.Tensor, language_id: int, n_languages: int) -> ad.Tensor:
    """Concatenate the one-hot language vector to every frame, then apply
    the linear input projection."""
    hidden = _as_tensor(hidden)
    onehot = one_hot_language(hidden.shape[0], language_id, n_languages)
    z = ad.concat([hidden, ad.Tensor(onehot)], axis=1)
    return ad.add(ad.matmul(z, leaves["input_proj/w"]), leaves["input_proj/b"])


def _chunked_attention(leaves, base: str, x: ad.Tensor, n_heads: int, chunk_frames: int) -> ad.Tensor:
    t, dm = x.shape
    dh = dm // n_heads
    scale = 1.0 / math.sqrt(dh)
    q = ad.matmul(x, leaves[f"{base}/attn/wq"])
    k = ad.matmul(x, leaves[f"{base}/attn/wk"])
    v = ad.matmul(x, leaves[f"{base}/attn/wv"])
    chunks = []
    for c0 in range(0, t, chunk_frames):
        rows = slice(c0, min(c0 + chunk_frames, t))
        heads = []
        for h in range(n_heads):
            cols = (rows, slice(h * dh, (h + 1) * dh))
            qc, kc, vc = ad.index(q, cols), ad.index(k, cols), ad.index(v, cols)
            att = ad.softmax(ad.mul(ad.matmul(qc, ad.transpose(kc)), scale))
            heads.append(ad.matmul(att, vc))
        chunks.append(ad.concat(heads, axis=1))
    merged = ad.concat(chunks, axis=0) if len(chunks) > 1 else chunks[0]
    return ad.add(ad.matmul(merged, leaves[f"{base}/attn/wo"]), leaves[f"{base}/attn/bo"])


def encoder_forward(leaves: dict[str, ad.Tensor], frames, config: ModelConfig,
                    chunk_frames: int | None = None) -> ad.Tensor:
    """Pre-norm attention + feed-forward blocks with residual connections.

    Attention is evaluated chunk by chunk (frame i only sees frames with
    the same floor(i / chunk_frames)), so outputs inside a chunk depend
    only on inputs inside that chunk.
    """
    h = _as_tensor(frames)
    chunk = config.chunk_frames if chunk_frames is None else chunk_frames
    for i in range(config.n_layers):
        base = layer_names(i)
        a = ad.layer_norm(h, leaves[f"{base}/ln1/g"], leaves[f"{base}/ln1/b"])
        h = ad.add(h, _chunked_attention(leaves, base, a, config.n_heads, chunk))
        f = ad.layer_norm(h, leaves[f"{base}/ln2/g"], leaves[f"{base}/ln2/b"])
        f = ad.relu(ad.add(ad.matmul(f, leaves[f"{base}/ff/w1"]), leaves[f"{base}/ff/b1"]))
        f = ad.add(ad.matmul(f, leaves[f"{base}/ff/w2"]), leaves[f"{base}/ff/b2"])
        h = ad.add(h, f)
    return h


def decoder_projection(leaves: dict[str, ad.Tensor], hidden: ad.Tensor) -> ad.Tensor:
    """Final norm + linear map + per-frame log-softmax; every output row
    log-sum-exps to zero."""
    n = ad.layer_norm(hidden, leaves["decoder/ln_g"], leaves["decoder/ln_b"])
    return ad.log_softmax(ad.add(ad.matmul(n, leaves["decoder/w"]), leaves["decoder/b"]))


def forward_log_posteriors(leaves: dict[str, ad.Tensor], config: ModelConfig, feats,
                           language_id: int) -> ad.Tensor:
    h = feature_encoder(leaves, feats)
    h = attach_language(leaves, h, language_id, config.n_languages)
    h = encoder_forward(leaves, h, config)
    return decoder_projection(leaves, h)


def infer_log_posteriors(params: dict[str, np.ndarray], config: ModelConfig, feats,
                         language_id: int) -> np.ndarray:
    """Forward pass without gradient tracking; returns the (T', V) array."""
    leaves = {name: ad.Tensor(arr) for name, arr in params.items()}
    return forward_log_posteriors(leaves, config, feats, language_id).data


_FREEZE_RE = re.compile(r"^(first|last|first_and_last)_(\d+)$")


def select_trainable(params: dict[str, np.ndarray], spec: str, n_layers: int) -> dict[str, bool]:
    """Per-tensor trainable flags for fine-tuning.

    ``spec`` is "all", "first_K", "last_K", or "first_and_last_K". The
    feature encoder, input projection, and decoder projection are always
    trainable; encoder layers follow the selection.
    """
    if spec == "all":
        selected = set(range(n_layers))
    else:
        m = _FREEZE_RE.match(spec)
        if not m:
            raise ValueError(f"bad trainable spec {spec!r}")
        kind, k = m.group(1), int(m.group(2))
        if k > n_layers:
            raise ValueError(f"trainable spec {spec!r} asks for {k} layers but the model has {n_layers}")
        selected = set()
        if kind in ("first", "first_and_last"):
            selected.update(range(k))
        if kind in ("last", "first_and_last"):
            selected.update(range(n_layers - k, n_layers))
    mask = {}
    for name in params:
        if name.startswith("layer"):
            mask[name] = int(name[5:7]) in selected
        else:
            mask[name] = True
    return mask


def trainable_layer_indices(mask: dict[str, bool]) -> set[int]:
    return {int(n[5:7]) for n, flag in mask.items() if flag and n.startswith("layer")}


def new_config_for_vocab(config: ModelConfig, vocab_size: int) -> ModelConfig:
    return replace(config, vocab_size=vocab_size)
