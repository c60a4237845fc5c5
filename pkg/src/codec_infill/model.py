"""Decoder-only transformer over [text; stacked tokens] with K output heads.

The model consumes one position stream: the transcript tokens followed by
the delay-stacked codec items.  A frame step embeds as the sum of its K
codebook embeddings (EMPTY slots draw one shared learned vector), marker
steps draw a single learned vector each, and a shared sinusoidal position
encoding is added over the whole concatenation.  The final hidden state
at every position feeds K separate MLP heads, one per codebook, whose
vocabularies append the marker/EMPTY ids so targets can be scored
uniformly.

Training minimizes sum_k alpha_k * L_k where L_k is the mean masked
cross-entropy of head k; positions whose target is a mask marker or the
EMPTY filler carry no loss.

Everything is plain numpy with hand-written reverse-mode gradients; the
forward pass records the intermediates the backward pass needs.  All
functions are deterministic given their inputs.

Architecture choices not pinned elsewhere, recorded here: pre-norm
blocks, exact (erf-based) GELU in the FFN and heads, LayerNorm eps 1e-5,
normal(0, init_scale) weight init with zero biases, no dropout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import CapacityError, InvalidInputError, VocabularyError
from .tokens import EMPTY, SpecialToken

# position-stream kinds
KIND_PAD = 0
KIND_TEXT = 1
KIND_FRAME = 2
KIND_MARKER = 3

_LN_EPS = 1e-5
_SQRT_2PI = float(np.sqrt(2.0 * np.pi))


@dataclass
class ModelConfig:
    num_layers: int = 2
    hidden_dim: int = 128
    ffn_dim: int = 512
    num_heads: int = 4
    num_codebooks: int = 4
    codebook_sizes: tuple[int, ...] = (256, 256, 256, 256)
    text_vocab_size: int = 30
    max_positions: int = 2048
    loss_weights: tuple[float, ...] = (5.0, 1.0, 0.5, 0.1)
    head_mlp_layers: int = 2
    max_mask_spans: int = 3
    init_scale: float = 0.02
    dtype: str = "float32"

    def __post_init__(self):
        self.codebook_sizes = tuple(self.codebook_sizes)
        self.loss_weights = tuple(self.loss_weights)
        if self.num_codebooks < 1:
            raise InvalidInputError("num_codebooks must be >= 1")
        if len(self.codebook_sizes) != self.num_codebooks:
            raise InvalidInputError("codebook_sizes length must equal num_codebooks")
        if len(self.loss_weights) != self.num_codebooks:
            raise InvalidInputError("loss_weights length must equal num_codebooks")
        if any(w <= 0 for w in self.loss_weights):
            raise InvalidInputError("loss_weights must all be positive")
        if self.hidden_dim % self.num_heads != 0:
            raise InvalidInputError("hidden_dim must be divisible by num_heads")
        if self.head_mlp_layers < 1:
            raise InvalidInputError("head_mlp_layers must be >= 1")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def head_vocab_size(self, k: int) -> int:
        return self.codebook_sizes[k] + self.max_mask_spans + 3

    def special_output_id(self, k: int, kind: str, index: int = 0) -> int:
        """Id of a marker/EMPTY token inside head k's output vocabulary."""
        base = self.codebook_sizes[k]
        if kind == "mask":
            if not (1 <= index <= self.max_mask_spans):
                raise VocabularyError(f"mask index {index} exceeds max_mask_spans")
            return base + index - 1
        if kind == "eos":
            return base + self.max_mask_spans
        if kind == "eou":
            return base + self.max_mask_spans + 1
        if kind == "empty":
            return base + self.max_mask_spans + 2
        raise VocabularyError(f"unknown special kind {kind!r}")

    def marker_embedding_index(self, token: SpecialToken) -> int:
        if token.kind == "mask":
            if token.index > self.max_mask_spans:
                raise VocabularyError(f"mask index {token.index} exceeds max_mask_spans")
            return token.index - 1
        if token.kind == "eos":
            return self.max_mask_spans
        if token.kind == "eou":
            return self.max_mask_spans + 1
        raise VocabularyError(f"{token} has no marker embedding")


@dataclass
class ModelState:
    """Parameters plus the configuration that shapes them."""

    params: dict
    config: ModelConfig
    step: int = 0


def parameter_names(cfg: ModelConfig) -> list[str]:
    """Canonical parameter order; checkpoints serialize tensors this way."""
    names = ["text_emb"]
    names += [f"codebook_emb_{k}" for k in range(cfg.num_codebooks)]
    names += ["empty_emb", "marker_emb"]
    for i in range(cfg.num_layers):
        names += [
            f"layer{i}.ln1.gain", f"layer{i}.ln1.bias",
            f"layer{i}.attn.wq", f"layer{i}.attn.bq",
            f"layer{i}.attn.wk", f"layer{i}.attn.bk",
            f"layer{i}.attn.wv", f"layer{i}.attn.bv",
            f"layer{i}.attn.wo", f"layer{i}.attn.bo",
            f"layer{i}.ln2.gain", f"layer{i}.ln2.bias",
            f"layer{i}.ffn.w1", f"layer{i}.ffn.b1",
            f"layer{i}.ffn.w2", f"layer{i}.ffn.b2",
        ]
    names += ["final_ln.gain", "final_ln.bias"]
    for k in range(cfg.num_codebooks):
        for j in range(cfg.head_mlp_layers):
            names += [f"head{k}.w{j}", f"head{k}.b{j}"]
    return names


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    d, f = cfg.hidden_dim, cfg.ffn_dim
    dt = cfg.np_dtype
    s = cfg.init_scale

    def w(*shape):
        return (rng.standard_normal(shape) * s).astype(dt)

    def zeros(*shape):
        return np.zeros(shape, dtype=dt)

    params: dict[str, np.ndarray] = {}
    params["text_emb"] = w(cfg.text_vocab_size, d)
    for k in range(cfg.num_codebooks):
        params[f"codebook_emb_{k}"] = w(cfg.codebook_sizes[k], d)
    params["empty_emb"] = w(1, d)
    params["marker_emb"] = w(cfg.max_mask_spans + 2, d)
    for i in range(cfg.num_layers):
        p = f"layer{i}"
        params[f"{p}.ln1.gain"] = np.ones(d, dtype=dt)
        params[f"{p}.ln1.bias"] = zeros(d)
        params[f"{p}.attn.wq"] = w(d, d)
        params[f"{p}.attn.bq"] = zeros(d)
        params[f"{p}.attn.wk"] = w(d, d)
        params[f"{p}.attn.bk"] = zeros(d)
        params[f"{p}.attn.wv"] = w(d, d)
        params[f"{p}.attn.bv"] = zeros(d)
        params[f"{p}.attn.wo"] = w(d, d)
        params[f"{p}.attn.bo"] = zeros(d)
        params[f"{p}.ln2.gain"] = np.ones(d, dtype=dt)
        params[f"{p}.ln2.bias"] = zeros(d)
        params[f"{p}.ffn.w1"] = w(d, f)
        params[f"{p}.ffn.b1"] = zeros(f)
        params[f"{p}.ffn.w2"] = w(f, d)
        params[f"{p}.ffn.b2"] = zeros(d)
    params["final_ln.gain"] = np.ones(d, dtype=dt)
    params["final_ln.bias"] = zeros(d)
    for k in range(cfg.num_codebooks):
        dims = [d] * cfg.head_mlp_layers + [cfg.head_vocab_size(k)]
        for j in range(cfg.head_mlp_layers):
            params[f"head{k}.w{j}"] = w(dims[j], dims[j + 1])
            params[f"head{k}.b{j}"] = zeros(dims[j + 1])
    assert list(params) == parameter_names(cfg)
    return params


def new_model(cfg: ModelConfig, seed: int = 0) -> ModelState:
    return ModelState(init_params(cfg, np.random.default_rng(seed)), cfg)


# ---------------------------------------------------------------------------
# Position encoding and input encoding
# ---------------------------------------------------------------------------


def sinusoidal_positions(length: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Classic sin/cos table: pe[p, 2i] = sin(p * r_i), pe[p, 2i+1] = cos."""
    positions = np.arange(length, dtype=np.float64)[:, None]
    half = np.arange(dim // 2, dtype=np.float64)
    rates = np.power(10000.0, -2.0 * half / dim)
    pe = np.zeros((length, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(positions * rates)
    pe[:, 1::2] = np.cos(positions * rates)
    return pe.astype(dtype)


@dataclass
class EncodedSequence:
    """One utterance's [text; stacked items] stream as parallel id arrays."""

    kind: np.ndarray        # (L,) int8
    text_ids: np.ndarray    # (L,) int64
    frame_ids: np.ndarray   # (L, K) int64, EMPTY slots hold -1
    marker_ids: np.ndarray  # (L,) int64

    def __len__(self):
        return len(self.kind)


def encode_sequence(text_ids, items, cfg: ModelConfig) -> EncodedSequence:
    """Turn transcript ids plus stacked items into model input arrays."""
    length = len(text_ids) + len(items)
    if length > cfg.max_positions:
        raise CapacityError(f"sequence length {length} exceeds max_positions {cfg.max_positions}")
    kind = np.zeros(length, dtype=np.int8)
    text = np.zeros(length, dtype=np.int64)
    frames = np.full((length, cfg.num_codebooks), EMPTY, dtype=np.int64)
    markers = np.zeros(length, dtype=np.int64)
    for i, t in enumerate(text_ids):
        if not (0 <= t < cfg.text_vocab_size):
            raise VocabularyError(f"text id {t} out of range")
        kind[i] = KIND_TEXT
        text[i] = t
    for j, item in enumerate(items):
        pos = len(text_ids) + j
        if isinstance(item, SpecialToken):
            kind[pos] = KIND_MARKER
            markers[pos] = cfg.marker_embedding_index(item)
        else:
            if len(item) != cfg.num_codebooks:
                raise InvalidInputError(f"frame step has {len(item)} slots, expected {cfg.num_codebooks}")
            kind[pos] = KIND_FRAME
            for k, v in enumerate(item):
                if v != EMPTY and not (0 <= v < cfg.codebook_sizes[k]):
                    raise VocabularyError(f"codebook {k + 1} token {v} out of range")
                frames[pos, k] = v
    return EncodedSequence(kind, text, frames, markers)


@dataclass
class EncodedBatch:
    """Padded batch of encoded sequences."""

    kind: np.ndarray        # (B, L)
    text_ids: np.ndarray    # (B, L)
    frame_ids: np.ndarray   # (B, L, K)
    marker_ids: np.ndarray  # (B, L)
    lengths: np.ndarray     # (B,)

    @property
    def batch_size(self):
        return self.kind.shape[0]

    @property
    def max_length(self):
        return self.kind.shape[1]


def pad_sequences(seqs: list[EncodedSequence], cfg: ModelConfig) -> EncodedBatch:
    if not seqs:
        raise InvalidInputError("cannot batch zero sequences")
    b = len(seqs)
    length = max(len(s) for s in seqs)
    k = cfg.num_codebooks
    kind = np.zeros((b, length), dtype=np.int8)
    text = np.zeros((b, length), dtype=np.int64)
    frames = np.full((b, length, k), EMPTY, dtype=np.int64)
    markers = np.zeros((b, length), dtype=np.int64)
    lengths = np.zeros(b, dtype=np.int64)
    for i, s in enumerate(seqs):
        n = len(s)
        kind[i, :n] = s.kind
        text[i, :n] = s.text_ids
        frames[i, :n] = s.frame_ids
        markers[i, :n] = s.marker_ids
        lengths[i] = n
    return EncodedBatch(kind, text, frames, markers, lengths)


def embed_step(item, position: int, params: dict, cfg: ModelConfig) -> np.ndarray:
    """Embed one input item at an absolute position.

    ``item`` is an int (text token), a K-tuple (frame step; EMPTY slots
    allowed), or a SpecialToken marker.  Frame steps sum their per-codebook
    embeddings, with every EMPTY slot contributing the shared EMPTY vector.
    """
    if position >= cfg.max_positions:
        raise CapacityError(f"position {position} exceeds max_positions")
    pe = sinusoidal_positions(position + 1, cfg.hidden_dim, cfg.np_dtype)[position]
    if isinstance(item, SpecialToken):
        return params["marker_emb"][cfg.marker_embedding_index(item)] + pe
    if isinstance(item, (tuple, list, np.ndarray)):
        out = pe.copy()
        for k, v in enumerate(item):
            v = int(v)
            if v == EMPTY:
                out = out + params["empty_emb"][0]
            else:
                if not (0 <= v < cfg.codebook_sizes[k]):
                    raise VocabularyError(f"codebook {k + 1} token {v} out of range")
                out = out + params[f"codebook_emb_{k}"][v]
        return out
    t = int(item)
    if not (0 <= t < cfg.text_vocab_size):
        raise VocabularyError(f"text id {t} out of range")
    return params["text_emb"][t] + pe


def _embed_batch(params: dict, cfg: ModelConfig, batch: EncodedBatch) -> np.ndarray:
    b, length = batch.kind.shape
    d = cfg.hidden_dim
    emb = np.zeros((b, length, d), dtype=cfg.np_dtype)
    text_mask = batch.kind == KIND_TEXT
    if text_mask.any():
        emb[text_mask] = params["text_emb"][batch.text_ids[text_mask]]
    frame_mask = batch.kind == KIND_FRAME
    if frame_mask.any():
        for k in range(cfg.num_codebooks):
            ids = batch.frame_ids[:, :, k]
            real = frame_mask & (ids >= 0)
            if real.any():
                emb[real] += params[f"codebook_emb_{k}"][ids[real]]
        empty_count = ((batch.frame_ids < 0) & frame_mask[:, :, None]).sum(axis=2)
        emb += empty_count[:, :, None].astype(cfg.np_dtype) * params["empty_emb"][0]
    marker_mask = batch.kind == KIND_MARKER
    if marker_mask.any():
        emb[marker_mask] = params["marker_emb"][batch.marker_ids[marker_mask]]
    emb += sinusoidal_positions(length, d, cfg.np_dtype)[None, :, :]
    return emb


def _embed_backward(params: dict, cfg: ModelConfig, batch: EncodedBatch, d_emb, grads: dict):
    text_mask = batch.kind == KIND_TEXT
    if text_mask.any():
        np.add.at(grads["text_emb"], batch.text_ids[text_mask], d_emb[text_mask])
    frame_mask = batch.kind == KIND_FRAME
    if frame_mask.any():
        for k in range(cfg.num_codebooks):
            ids = batch.frame_ids[:, :, k]
            real = frame_mask & (ids >= 0)
            if real.any():
                np.add.at(grads[f"codebook_emb_{k}"], ids[real], d_emb[real])
        empty_count = ((batch.frame_ids < 0) & frame_mask[:, :, None]).sum(axis=2)
        grads["empty_emb"][0] += (empty_count[:, :, None] * d_emb).sum(axis=(0, 1))
    marker_mask = batch.kind == KIND_MARKER
    if marker_mask.any():
        np.add.at(grads["marker_emb"], batch.marker_ids[marker_mask], d_emb[marker_mask])


# ---------------------------------------------------------------------------
# Primitive layers (forward saves what backward needs)
# ---------------------------------------------------------------------------


def _gelu_forward(x):
    """Exact GELU x * Phi(x); returns the CDF so backward can reuse it."""
    phi = 0.5 * (1.0 + erf(x / np.sqrt(2.0).astype(x.dtype)))
    return x * phi, phi


def _gelu(x):
    return _gelu_forward(x)[0]


def _gelu_grad(x, phi, d_out):
    pdf = np.exp(-0.5 * x * x) / x.dtype.type(_SQRT_2PI)
    return d_out * (phi + x * pdf)


def _gelu_backward(x, d_out):
    _, phi = _gelu_forward(x)
    return _gelu_grad(x, phi, d_out)


def _layer_norm(x, gain, bias):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(_LN_EPS, dtype=x.dtype))
    normed = centered * inv_std
    return normed * gain + bias, (normed, inv_std)


def _layer_norm_backward(d_out, gain, cache):
    normed, inv_std = cache
    d_gain = (d_out * normed).sum(axis=tuple(range(d_out.ndim - 1)))
    d_bias = d_out.sum(axis=tuple(range(d_out.ndim - 1)))
    d_normed = d_out * gain
    n = normed.shape[-1]
    # d_x for y = (x - mean) / std: project out the mean and the normed direction
    d_x = inv_std * (
        d_normed
        - d_normed.mean(axis=-1, keepdims=True)
        - normed * (d_normed * normed).mean(axis=-1, keepdims=True)
    )
    return d_x, d_gain, d_bias


def _causal_bias(batch: EncodedBatch, dtype) -> np.ndarray:
    """Additive attention bias: causal, pad keys hidden, self always visible."""
    b, length = batch.kind.shape
    causal = np.tril(np.ones((length, length), dtype=bool))
    key_ok = (batch.kind != KIND_PAD)[:, None, :]
    allow = causal[None, :, :] & key_ok
    allow |= np.eye(length, dtype=bool)[None, :, :]
    bias = np.where(allow, 0.0, -np.inf).astype(dtype)
    return bias[:, None, :, :]  # (B, 1, L, L)


def _attention_forward(params, prefix, x, bias, cfg):
    b, length, d = x.shape
    h, dh = cfg.num_heads, cfg.hidden_dim // cfg.num_heads
    q = x @ params[f"{prefix}.wq"] + params[f"{prefix}.bq"]
    k = x @ params[f"{prefix}.wk"] + params[f"{prefix}.bk"]
    v = x @ params[f"{prefix}.wv"] + params[f"{prefix}.bv"]
    q = q.reshape(b, length, h, dh).transpose(0, 2, 1, 3)
    k = k.reshape(b, length, h, dh).transpose(0, 2, 1, 3)
    v = v.reshape(b, length, h, dh).transpose(0, 2, 1, 3)
    scores = (q @ k.transpose(0, 1, 3, 2)) / np.asarray(np.sqrt(dh), dtype=x.dtype)
    scores = scores + bias
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    context = weights @ v
    merged = context.transpose(0, 2, 1, 3).reshape(b, length, d)
    out = merged @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"]
    return out, (x, q, k, v, weights, merged)


def _attention_backward(params, prefix, d_out, cache, cfg, grads):
    x, q, k, v, weights, merged = cache
    b, length, d = x.shape
    h, dh = cfg.num_heads, d // cfg.num_heads
    flat = lambda a: a.reshape(-1, a.shape[-1])

    grads[f"{prefix}.wo"] += flat(merged).T @ flat(d_out)
    grads[f"{prefix}.bo"] += d_out.sum(axis=(0, 1))
    d_merged = d_out @ params[f"{prefix}.wo"].T
    d_context = d_merged.reshape(b, length, h, dh).transpose(0, 2, 1, 3)

    d_weights = d_context @ v.transpose(0, 1, 3, 2)
    d_v = weights.transpose(0, 1, 3, 2) @ d_context
    # softmax jacobian: dS = W * (dW - sum(dW * W))
    d_scores = weights * (d_weights - (d_weights * weights).sum(axis=-1, keepdims=True))
    d_scores /= np.asarray(np.sqrt(dh), dtype=x.dtype)
    d_q = d_scores @ k
    d_k = d_scores.transpose(0, 1, 3, 2) @ q

    def unsplit(a):
        return a.transpose(0, 2, 1, 3).reshape(b, length, d)

    d_q, d_k, d_v = unsplit(d_q), unsplit(d_k), unsplit(d_v)
    d_x = np.zeros_like(x)
    for name, dval in (("wq", d_q), ("wk", d_k), ("wv", d_v)):
        grads[f"{prefix}.{name}"] += flat(x).T @ flat(dval)
        grads[f"{prefix}.b{name[1]}"] += dval.sum(axis=(0, 1))
        d_x += dval @ params[f"{prefix}.{name}"].T
    return d_x


def _ffn_forward(params, prefix, x):
    pre = x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"]
    act, phi = _gelu_forward(pre)
    out = act @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]
    return out, (x, pre, phi, act)


def _ffn_backward(params, prefix, d_out, cache, grads):
    x, pre, phi, act = cache
    flat = lambda a: a.reshape(-1, a.shape[-1])
    grads[f"{prefix}.w2"] += flat(act).T @ flat(d_out)
    grads[f"{prefix}.b2"] += d_out.sum(axis=(0, 1))
    d_act = d_out @ params[f"{prefix}.w2"].T
    d_pre = _gelu_grad(pre, phi, d_act)
    grads[f"{prefix}.w1"] += flat(x).T @ flat(d_pre)
    grads[f"{prefix}.b1"] += d_pre.sum(axis=(0, 1))
    return d_pre @ params[f"{prefix}.w1"].T


# ---------------------------------------------------------------------------
# Full forward / backward
# ---------------------------------------------------------------------------


def forward(params: dict, cfg: ModelConfig, batch: EncodedBatch, want_cache: bool = False):
    """Run the network; returns (logits per codebook, cache or None).

    ``logits[k]`` has shape (B, L, head_vocab_k); position i's logits are
    computed from positions <= i only.
    """
    emb = _embed_batch(params, cfg, batch)
    bias = _causal_bias(batch, emb.dtype)
    x = emb
    layer_caches = []
    for i in range(cfg.num_layers):
        p = f"layer{i}"
        normed1, ln1_cache = _layer_norm(x, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"])
        attn_out, attn_cache = _attention_forward(params, f"{p}.attn", normed1, bias, cfg)
        x = x + attn_out
        normed2, ln2_cache = _layer_norm(x, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"])
        ffn_out, ffn_cache = _ffn_forward(params, f"{p}.ffn", normed2)
        x = x + ffn_out
        layer_caches.append((ln1_cache, attn_cache, ln2_cache, ffn_cache))
    hidden, final_cache = _layer_norm(x, params["final_ln.gain"], params["final_ln.bias"])

    logits = []
    head_caches = []
    for k in range(cfg.num_codebooks):
        h = hidden
        cache_k = []
        for j in range(cfg.head_mlp_layers):
            pre = h @ params[f"head{k}.w{j}"] + params[f"head{k}.b{j}"]
            if j < cfg.head_mlp_layers - 1:
                act, phi = _gelu_forward(pre)
                cache_k.append((h, pre, phi))
                h = act
            else:
                cache_k.append((h, None, None))
                h = pre
        logits.append(h)
        head_caches.append(cache_k)

    cache = None
    if want_cache:
        cache = {
            "batch": batch,
            "layer_caches": layer_caches,
            "final_cache": final_cache,
            "head_caches": head_caches,
        }
    return logits, cache


def backward(params: dict, cfg: ModelConfig, cache: dict, d_logits: list) -> dict:
    """Gradients of a scalar whose logit-gradients are ``d_logits``."""
    grads = {name: np.zeros_like(p) for name, p in params.items()}
    batch = cache["batch"]

    d_hidden = None
    for k in range(cfg.num_codebooks):
        d_x = np.asarray(d_logits[k], dtype=cfg.np_dtype)
        for j in reversed(range(cfg.head_mlp_layers)):
            h_in, pre, phi = cache["head_caches"][k][j]
            # non-last layers applied GELU after the affine map
            d_pre = d_x if pre is None else _gelu_grad(pre, phi, d_x)
            flat_in = h_in.reshape(-1, h_in.shape[-1])
            flat_d = d_pre.reshape(-1, d_pre.shape[-1])
            grads[f"head{k}.w{j}"] += flat_in.T @ flat_d
            grads[f"head{k}.b{j}"] += d_pre.sum(axis=tuple(range(d_pre.ndim - 1)))
            d_x = d_pre @ params[f"head{k}.w{j}"].T
        d_hidden = d_x if d_hidden is None else d_hidden + d_x

    d_x, d_gain, d_bias = _layer_norm_backward(d_hidden, params["final_ln.gain"], cache["final_cache"])
    grads["final_ln.gain"] += d_gain
    grads["final_ln.bias"] += d_bias

    for i in reversed(range(cfg.num_layers)):
        p = f"layer{i}"
        ln1_cache, attn_cache, ln2_cache, ffn_cache = cache["layer_caches"][i]
        d_ffn_out = d_x
        d_normed2 = _ffn_backward(params, f"{p}.ffn", d_ffn_out, ffn_cache, grads)
        d_mid, d_gain, d_bias = _layer_norm_backward(d_normed2, params[f"{p}.ln2.gain"], ln2_cache)
        grads[f"{p}.ln2.gain"] += d_gain
        grads[f"{p}.ln2.bias"] += d_bias
        d_x = d_x + d_mid
        d_attn_out = d_x
        d_normed1 = _attention_backward(params, f"{p}.attn", d_attn_out, attn_cache, cfg, grads)
        d_in, d_gain, d_bias = _layer_norm_backward(d_normed1, params[f"{p}.ln1.gain"], ln1_cache)
        grads[f"{p}.ln1.gain"] += d_gain
        grads[f"{p}.ln1.bias"] += d_bias
        d_x = d_x + d_in

    _embed_backward(params, cfg, batch, d_x, grads)
    return grads


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def weighted_loss(logits: list, targets: np.ndarray, loss_mask: np.ndarray, weights):
    """Weighted masked cross-entropy: L = sum_k alpha_k * mean-CE_k.

    ``logits[k]`` is (..., V_k); ``targets``/``loss_mask`` are (..., K).
    Returns (total, per-codebook components, all_masked_warning).
    Accumulation runs in float64 regardless of model dtype.
    """
    per_k = []
    all_masked = True
    for k, logit_k in enumerate(logits):
        mask = loss_mask[..., k]
        n = int(mask.sum())
        if n == 0:
            per_k.append(0.0)
            continue
        all_masked = False
        lk = logit_k[mask].astype(np.float64)
        tk = targets[..., k][mask]
        m = lk.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(lk - m).sum(axis=-1)) + m[:, 0]
        ce = lse - lk[np.arange(n), tk]
        per_k.append(float(ce.mean()))
    total = float(sum(w * l for w, l in zip(weights, per_k)))
    return total, per_k, all_masked


def loss_gradient(logits: list, targets: np.ndarray, loss_mask: np.ndarray, weights):
    """d(total loss)/d(logits): softmax minus one-hot, scaled by alpha_k / N_k."""
    d_logits = []
    for k, logit_k in enumerate(logits):
        mask = loss_mask[..., k]
        d_k = np.zeros_like(logit_k)
        n = int(mask.sum())
        if n > 0:
            lk = logit_k[mask].astype(np.float64)
            lk -= lk.max(axis=-1, keepdims=True)
            p = np.exp(lk)
            p /= p.sum(axis=-1, keepdims=True)
            tk = targets[..., k][mask]
            p[np.arange(n), tk] -= 1.0
            d_k[mask] = (p * (weights[k] / n)).astype(logit_k.dtype)
        d_logits.append(d_k)
    return d_logits


# ---------------------------------------------------------------------------
# Incremental decoding with a key/value cache
# ---------------------------------------------------------------------------


class DecodeSession:
    """Grows a context one item at a time, caching per-layer keys/values.

    ``logits`` always holds the K next-item logit vectors at the current
    context end.  The prefill runs through the batched forward pass so
    scored prefixes and incrementally decoded prefixes agree.
    """

    def __init__(self, state: ModelState, text_ids, items):
        self.state = state
        cfg = state.config
        seq = encode_sequence(text_ids, items, cfg)
        if len(seq) == 0:
            raise InvalidInputError("decode context must contain at least one item")
        batch = pad_sequences([seq], cfg)
        logits, cache = forward(state.params, cfg, batch, want_cache=True)
        self._kv = []
        for i in range(cfg.num_layers):
            _, q, k, v, _, _ = cache["layer_caches"][i][1]
            self._kv.append([k[0], v[0]])  # (H, L, dh)
        self.position = len(seq)
        self.logits = [logits[k][0, self.position - 1] for k in range(cfg.num_codebooks)]

    def append(self, item) -> list[np.ndarray]:
        """Extend the context by one item; returns the new next-item logits."""
        state, cfg = self.state, self.state.config
        params = state.params
        if self.position >= cfg.max_positions:
            raise CapacityError("decode context exceeded max_positions")
        h, dh = cfg.num_heads, cfg.hidden_dim // cfg.num_heads
        x = embed_step(item, self.position, params, cfg)[None, :].astype(cfg.np_dtype)
        for i in range(cfg.num_layers):
            p = f"layer{i}"
            normed1, _ = _layer_norm(x, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"])
            q = (normed1 @ params[f"{p}.attn.wq"] + params[f"{p}.attn.bq"]).reshape(h, 1, dh)
            k_new = (normed1 @ params[f"{p}.attn.wk"] + params[f"{p}.attn.bk"]).reshape(h, 1, dh)
            v_new = (normed1 @ params[f"{p}.attn.wv"] + params[f"{p}.attn.bv"]).reshape(h, 1, dh)
            keys = np.concatenate([self._kv[i][0], k_new], axis=1)
            values = np.concatenate([self._kv[i][1], v_new], axis=1)
            self._kv[i][0], self._kv[i][1] = keys, values
            scores = (q @ keys.transpose(0, 2, 1)) / np.asarray(np.sqrt(dh), dtype=x.dtype)
            scores -= scores.max(axis=-1, keepdims=True)
            weights = np.exp(scores)
            weights /= weights.sum(axis=-1, keepdims=True)
            context = (weights @ values).reshape(1, cfg.hidden_dim)
            x = x + context @ params[f"{p}.attn.wo"] + params[f"{p}.attn.bo"]
            normed2, _ = _layer_norm(x, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"])
            ffn_out, _ = _ffn_forward(params, f"{p}.ffn", normed2)
            x = x + ffn_out
        hidden, _ = _layer_norm(x, params["final_ln.gain"], params["final_ln.bias"])
        logits = []
        for k in range(cfg.num_codebooks):
            out = hidden
            for j in range(cfg.head_mlp_layers):
                out = out @ params[f"head{k}.w{j}"] + params[f"head{k}.b{j}"]
                if j < cfg.head_mlp_layers - 1:
                    out = _gelu(out)
            logits.append(out[0])
        self.position += 1
        self.logits = logits
        return logits


class TransformerDecoder:
    """Thin session factory satisfying the decoding protocol used by
    the inference pipelines (stub models in tests implement the same)."""

    def __init__(self, state: ModelState):
        self.state = state

    def new_session(self, text_ids, items) -> DecodeSession:
        return DecodeSession(self.state, text_ids, items)


def score_sequence(state: ModelState, text_ids, items):
    """Full-context forward for one utterance; logits at every position."""
    seq = encode_sequence(text_ids, items, state.config)
    batch = pad_sequences([seq], state.config)
    logits, _ = forward(state.params, state.config, batch)
    return [l[0] for l in logits]
