"""Desk-scale encoder-decoder sequence model with manual backpropagation.

The architecture is a pre-layer-norm transformer: B_enc encoder blocks of
(self-attention + feed-forward), B_dec decoder blocks of (causal
self-attention + cross-attention + feed-forward), sinusoidal absolute
positions, and a linear classification head trained with teacher-forced
cross-entropy. Every attention projection and feed-forward matrix can be
built either dense or as a low-rank factorized layer according to a
``RankPlan``; embeddings, norms, biases, and the head always stay dense.

Activations use a column convention: a tensor of features is (d, N) with
N = batch * seq flattened batch-major, matching the (n, batch)-columns
contract of the linear layers. Forward passes record every intermediate
needed by ``backward``, which returns a name -> gradient dict aligned with
``Model.named_parameters()``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, TensorRecord
from .errors import ConsistencyError, DomainError, NumericalError, ShapeError
from .layers import DenseLinear, FactorizedLinear, flop_count, kaiming_uniform, spectral_init
from .planner import FFN, MHSA, LayerSpec, RankPlan
from .tasks import Batch

__all__ = [
    "ModelSpec",
    "Model",
    "enumerate_layers",
    "extra_param_count",
    "build",
    "forward_loss",
    "backward",
    "accuracy",
    "spec_digest",
    "model_checkpoint",
]


@dataclass(frozen=True)
class ModelSpec:
    d_model: int = 128
    n_heads: int = 4
    d_ffn: int = 512
    encoder_blocks: int = 6
    decoder_blocks: int = 2
    vocab: int = 32
    seq_len: int = 24
    seed: int = 0

    def __post_init__(self):
        for name in ("d_model", "n_heads", "d_ffn", "encoder_blocks",
                     "decoder_blocks", "vocab", "seq_len"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise DomainError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.vocab < 4:
            raise DomainError("vocab must be >= 4 (PAD, BOS, payload)")


def spec_digest(spec: ModelSpec) -> str:
    body = json.dumps(spec.__dict__, sort_keys=True).encode()
    return hashlib.sha256(body).hexdigest()


_ATTN_PROJS = ("q", "k", "v", "o")
_FFN_PROJS = ("w1", "w2")


def enumerate_layers(spec: ModelSpec) -> list[LayerSpec]:
    """Factorizable layers in construction order.

    Attention projections (encoder self, decoder self, decoder cross) are
    all kind "mhsa"; the two feed-forward matrices are kind "ffn".
    """
    d, f = spec.d_model, spec.d_ffn
    out = []
    for b in range(spec.encoder_blocks):
        for p in _ATTN_PROJS:
            out.append(LayerSpec(f"enc.{b}.mhsa.{p}", MHSA, "encoder", b, d, d))
        out.append(LayerSpec(f"enc.{b}.ffn.w1", FFN, "encoder", b, f, d))
        out.append(LayerSpec(f"enc.{b}.ffn.w2", FFN, "encoder", b, d, f))
    for b in range(spec.decoder_blocks):
        for group in ("self", "cross"):
            for p in _ATTN_PROJS:
                out.append(LayerSpec(f"dec.{b}.{group}.{p}", MHSA, "decoder", b, d, d))
        out.append(LayerSpec(f"dec.{b}.ffn.w1", FFN, "decoder", b, f, d))
        out.append(LayerSpec(f"dec.{b}.ffn.w2", FFN, "decoder", b, d, f))
    return out


def extra_param_count(spec: ModelSpec) -> int:
    """Parameters outside the factorizable weight matrices.

    Embeddings, head weight+bias, all layer norms, and all linear biases:
    identical between a dense and a factorized build of the same spec.
    """
    d = spec.d_model
    embeddings = 2 * spec.vocab * d
    head = spec.vocab * d + spec.vocab
    enc_norms = (2 * spec.encoder_blocks + 1) * 2 * d
    dec_norms = (3 * spec.decoder_blocks + 1) * 2 * d
    enc_biases = spec.encoder_blocks * (4 * d + spec.d_ffn + d)
    dec_biases = spec.decoder_blocks * (8 * d + spec.d_ffn + d)
    return embeddings + head + enc_norms + dec_norms + enc_biases + dec_biases


def _sinusoidal_positions(d: int, length: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    idx = np.arange(0, d, 2)[None, :]
    angles = pos / np.power(10000.0, idx / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : d // 2])
    return pe.T  # (d, length)


class LayerNorm:
    eps = 1e-5

    def __init__(self, prefix: str, d: int, dtype):
        self.prefix = prefix
        self.gamma = np.ones(d, dtype=dtype)
        self.beta = np.zeros(d, dtype=dtype)

    def params(self):
        return [(f"{self.prefix}.gamma", self.gamma), (f"{self.prefix}.beta", self.beta)]

    def forward(self, x):
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        y = self.gamma[:, None] * xhat + self.beta[:, None]
        return y, (xhat, inv)

    def backward(self, grad_out, cache, grads):
        xhat, inv = cache
        dxhat = grad_out * self.gamma[:, None]
        grads[f"{self.prefix}.gamma"] = (grad_out * xhat).sum(axis=1)
        grads[f"{self.prefix}.beta"] = grad_out.sum(axis=1)
        mean_d = dxhat.mean(axis=0)
        mean_dx = (dxhat * xhat).mean(axis=0)
        return inv * (dxhat - mean_d - xhat * mean_dx)


def _linear_params(prefix: str, layer):
    if isinstance(layer, FactorizedLinear):
        items = [(f"{prefix}.u", layer.u), (f"{prefix}.v", layer.v)]
    else:
        items = [(f"{prefix}.w", layer.w)]
    if layer.bias is not None:
        items.append((f"{prefix}.bias", layer.bias))
    return items


def _linear_backward(layer, prefix: str, x, grad_out, grads):
    g = layer.backward(x, grad_out)
    if isinstance(layer, FactorizedLinear):
        grads[f"{prefix}.u"] = g.grad_u
        grads[f"{prefix}.v"] = g.grad_v
    else:
        grads[f"{prefix}.w"] = g.grad_w
    if g.grad_bias is not None:
        grads[f"{prefix}.bias"] = g.grad_bias
    return g.grad_input


class Attention:
    """Multi-headed attention over column-layout activations."""

    def __init__(self, prefix, q, k, v, o, n_heads, causal):
        self.prefix = prefix
        self.q, self.k, self.v, self.o = q, k, v, o
        self.n_heads = n_heads
        self.causal = causal

    def params(self):
        items = []
        for name, layer in (("q", self.q), ("k", self.k), ("v", self.v), ("o", self.o)):
            items.extend(_linear_params(f"{self.prefix}.{name}", layer))
        return items

    def _to_heads(self, z, batch, seq):
        d = z.shape[0]
        dh = d // self.n_heads
        return z.reshape(self.n_heads, dh, batch, seq).transpose(2, 0, 3, 1)

    def _from_heads(self, z4):
        b, h, s, dh = z4.shape
        return z4.transpose(1, 3, 0, 2).reshape(h * dh, b * s)

    def forward(self, x_q, x_kv, key_valid, batch):
        sq = x_q.shape[1] // batch
        sk = x_kv.shape[1] // batch
        dh = x_q.shape[0] // self.n_heads
        q4 = self._to_heads(self.q.forward(x_q), batch, sq)
        k4 = self._to_heads(self.k.forward(x_kv), batch, sk)
        v4 = self._to_heads(self.v.forward(x_kv), batch, sk)
        scores = (q4 @ k4.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        bias = np.where(key_valid, 0.0, -np.inf).astype(scores.dtype)
        scores += bias[:, None, None, :]
        if self.causal:
            scores += np.triu(np.full((sq, sk), -np.inf, dtype=scores.dtype), k=1)
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        attn = e / e.sum(axis=-1, keepdims=True)
        ctx4 = attn @ v4
        ctx = self._from_heads(ctx4)
        out = self.o.forward(ctx)
        cache = (x_q, x_kv, q4, k4, v4, attn, ctx, batch)
        return out, cache

    def backward(self, grad_out, cache, grads):
        x_q, x_kv, q4, k4, v4, attn, ctx, batch = cache
        dh = q4.shape[-1]
        grad_ctx = _linear_backward(self.o, f"{self.prefix}.o", ctx, grad_out, grads)
        grad_ctx4 = self._to_heads(grad_ctx, batch, q4.shape[2])
        grad_attn = grad_ctx4 @ v4.swapaxes(-1, -2)
        grad_v4 = attn.swapaxes(-1, -2) @ grad_ctx4
        grad_scores = (grad_attn - (grad_attn * attn).sum(axis=-1, keepdims=True)) * attn
        grad_scores *= 1.0 / np.sqrt(dh)
        grad_q = self._from_heads(grad_scores @ k4)
        grad_k = self._from_heads(grad_scores.swapaxes(-1, -2) @ q4)
        grad_v = self._from_heads(grad_v4)
        gx_q = _linear_backward(self.q, f"{self.prefix}.q", x_q, grad_q, grads)
        gx_kv = _linear_backward(self.k, f"{self.prefix}.k", x_kv, grad_k, grads)
        gx_kv += _linear_backward(self.v, f"{self.prefix}.v", x_kv, grad_v, grads)
        return gx_q, gx_kv


def _gelu(x):
    c = np.sqrt(2.0 / np.pi).astype(x.dtype) if hasattr(x, "dtype") else np.sqrt(2.0 / np.pi)
    t = np.tanh(c * (x + 0.044715 * x**3))
    return 0.5 * x * (1.0 + t), t


def _gelu_backward(grad_out, x, t):
    c = np.sqrt(2.0 / np.pi)
    dt = (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * x**2)
    return grad_out * (0.5 * (1.0 + t) + 0.5 * x * dt)


class FeedForward:
    def __init__(self, prefix, w1, w2):
        self.prefix = prefix
        self.w1, self.w2 = w1, w2

    def params(self):
        return _linear_params(f"{self.prefix}.w1", self.w1) + _linear_params(
            f"{self.prefix}.w2", self.w2
        )

    def forward(self, x):
        h = self.w1.forward(x)
        a, t = _gelu(h)
        out = self.w2.forward(a)
        return out, (x, h, t, a)

    def backward(self, grad_out, cache, grads):
        x, h, t, a = cache
        grad_a = _linear_backward(self.w2, f"{self.prefix}.w2", a, grad_out, grads)
        grad_h = _gelu_backward(grad_a, h, t)
        return _linear_backward(self.w1, f"{self.prefix}.w1", x, grad_h, grads)


class EncoderBlock:
    def __init__(self, prefix, ln1, attn, ln2, ffn):
        self.prefix = prefix
        self.ln1, self.attn, self.ln2, self.ffn = ln1, attn, ln2, ffn

    def params(self):
        return self.ln1.params() + self.attn.params() + self.ln2.params() + self.ffn.params()

    def forward(self, x, key_valid, batch):
        h1, c_ln1 = self.ln1.forward(x)
        a, c_attn = self.attn.forward(h1, h1, key_valid, batch)
        x1 = x + a
        h2, c_ln2 = self.ln2.forward(x1)
        f, c_ffn = self.ffn.forward(h2)
        x2 = x1 + f
        return x2, (c_ln1, c_attn, c_ln2, c_ffn)

    def backward(self, grad_out, cache, grads):
        c_ln1, c_attn, c_ln2, c_ffn = cache
        grad_f = self.ffn.backward(grad_out, c_ffn, grads)
        grad_x1 = grad_out + self.ln2.backward(grad_f, c_ln2, grads)
        gq, gkv = self.attn.backward(grad_x1, c_attn, grads)
        return grad_x1 + self.ln1.backward(gq + gkv, c_ln1, grads)


class DecoderBlock:
    def __init__(self, prefix, ln1, self_attn, ln2, cross, ln3, ffn):
        self.prefix = prefix
        self.ln1, self.self_attn = ln1, self_attn
        self.ln2, self.cross = ln2, cross
        self.ln3, self.ffn = ln3, ffn

    def params(self):
        return (
            self.ln1.params()
            + self.self_attn.params()
            + self.ln2.params()
            + self.cross.params()
            + self.ln3.params()
            + self.ffn.params()
        )

    def forward(self, x, memory, tgt_valid, src_valid, batch):
        h1, c_ln1 = self.ln1.forward(x)
        a1, c_self = self.self_attn.forward(h1, h1, tgt_valid, batch)
        x1 = x + a1
        h2, c_ln2 = self.ln2.forward(x1)
        a2, c_cross = self.cross.forward(h2, memory, src_valid, batch)
        x2 = x1 + a2
        h3, c_ln3 = self.ln3.forward(x2)
        f, c_ffn = self.ffn.forward(h3)
        x3 = x2 + f
        return x3, (c_ln1, c_self, c_ln2, c_cross, c_ln3, c_ffn)

    def backward(self, grad_out, cache, grads):
        c_ln1, c_self, c_ln2, c_cross, c_ln3, c_ffn = cache
        grad_f = self.ffn.backward(grad_out, c_ffn, grads)
        grad_x2 = grad_out + self.ln3.backward(grad_f, c_ln3, grads)
        gq, g_mem = self.cross.backward(grad_x2, c_cross, grads)
        grad_x1 = grad_x2 + self.ln2.backward(gq, c_ln2, grads)
        gq2, gkv2 = self.self_attn.backward(grad_x1, c_self, grads)
        grad_x = grad_x1 + self.ln1.backward(gq2 + gkv2, c_ln1, grads)
        return grad_x, g_mem


class Model:
    """Instantiated parameter set plus the block structure to run it."""

    def __init__(self, spec: ModelSpec, dtype=np.float64):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.src_embed = None
        self.tgt_embed = None
        self.pos = None
        self.enc_blocks: list[EncoderBlock] = []
        self.enc_ln: LayerNorm | None = None
        self.dec_blocks: list[DecoderBlock] = []
        self.dec_ln: LayerNorm | None = None
        self.head: DenseLinear | None = None
        self.linears: dict[str, object] = {}
        self._params: list[tuple[str, np.ndarray]] = []
        self._cache_token = object()

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        return list(self._params)

    def param_count(self) -> int:
        return sum(arr.size for _, arr in self._params)

    def forward_flops(self, batch: int) -> int:
        """Analytic forward multiply-add flops (x2) for one batch."""
        s, d = self.spec.seq_len, self.spec.d_model
        tokens = batch * s
        total = 0
        from .layers import flop_count  # local import avoids cycle at module load

        for layer in self.linears.values():
            total += flop_count(layer, tokens)
        n_attn = self.spec.encoder_blocks + 2 * self.spec.decoder_blocks
        total += n_attn * 4 * batch * s * s * d  # scores + weighted sum
        total += 2 * self.spec.vocab * d * tokens  # head
        return total

    def _register(self):
        self._params = []
        self._params.append(("src_embed.w", self.src_embed))
        self._params.append(("tgt_embed.w", self.tgt_embed))
        for blk in self.enc_blocks:
            self._params.extend(blk.params())
        self._params.extend(self.enc_ln.params())
        for blk in self.dec_blocks:
            self._params.extend(blk.params())
        self._params.extend(self.dec_ln.params())
        self._params.extend(_linear_params("head", self.head))


def _make_linear(layer_spec: LayerSpec, plan: RankPlan | None, rng, dtype):
    w = kaiming_uniform(layer_spec.m, layer_spec.n, rng)
    bias = np.zeros(layer_spec.m)
    if plan is not None and layer_spec.id in plan:
        lyr = spectral_init(w, plan.rank_of(layer_spec.id), bias)
        lyr.u = lyr.u.astype(dtype)
        lyr.v = lyr.v.astype(dtype)
        lyr.bias = lyr.bias.astype(dtype)
        return lyr
    return DenseLinear(w.astype(dtype), bias.astype(dtype))


def build(spec: ModelSpec, plan: RankPlan | None = None, dtype=np.float64) -> Model:
    """Instantiate a model; dense everywhere except the plan's layers.

    All dense weights are drawn Kaiming-uniform from one seeded stream in
    enumeration order; a factorized layer compresses the very matrix it
    would have kept dense, so dense and factorized builds of the same seed
    see identical draws.
    """
    layer_specs = {ls.id: ls for ls in enumerate_layers(spec)}
    if plan is not None:
        extra = sorted(set(plan.entries) - set(layer_specs))
        if extra:
            raise ConsistencyError(f"plan entries for unknown layers: {extra}")
        for lid, entry in plan.entries.items():
            ls = layer_specs[lid]
            if not 1 <= entry.rank <= ls.max_rank:
                raise ConsistencyError(
                    f"plan rank {entry.rank} for {lid} outside [1, {ls.max_rank}]"
                )
    model = Model(spec, dtype)
    rng = np.random.default_rng(spec.seed)
    d = spec.d_model
    model.src_embed = rng.normal(0.0, d**-0.5, size=(spec.vocab, d)).astype(dtype)
    model.tgt_embed = rng.normal(0.0, d**-0.5, size=(spec.vocab, d)).astype(dtype)
    model.pos = _sinusoidal_positions(d, spec.seq_len).astype(dtype)

    def linear(lid):
        lyr = _make_linear(layer_specs[lid], plan, rng, dtype)
        model.linears[lid] = lyr
        return lyr

    for b in range(spec.encoder_blocks):
        p = f"enc.{b}"
        attn = Attention(
            f"{p}.mhsa",
            *(linear(f"{p}.mhsa.{x}") for x in _ATTN_PROJS),
            n_heads=spec.n_heads,
            causal=False,
        )
        ffn = FeedForward(f"{p}.ffn", linear(f"{p}.ffn.w1"), linear(f"{p}.ffn.w2"))
        model.enc_blocks.append(
            EncoderBlock(p, LayerNorm(f"{p}.ln1", d, dtype), attn,
                         LayerNorm(f"{p}.ln2", d, dtype), ffn)
        )
    model.enc_ln = LayerNorm("enc.final_ln", d, dtype)
    for b in range(spec.decoder_blocks):
        p = f"dec.{b}"
        self_attn = Attention(
            f"{p}.self",
            *(linear(f"{p}.self.{x}") for x in _ATTN_PROJS),
            n_heads=spec.n_heads,
            causal=True,
        )
        cross = Attention(
            f"{p}.cross",
            *(linear(f"{p}.cross.{x}") for x in _ATTN_PROJS),
            n_heads=spec.n_heads,
            causal=False,
        )
        ffn = FeedForward(f"{p}.ffn", linear(f"{p}.ffn.w1"), linear(f"{p}.ffn.w2"))
        model.dec_blocks.append(
            DecoderBlock(p, LayerNorm(f"{p}.ln1", d, dtype), self_attn,
                         LayerNorm(f"{p}.ln2", d, dtype), cross,
                         LayerNorm(f"{p}.ln3", d, dtype), ffn)
        )
    model.dec_ln = LayerNorm("dec.final_ln", d, dtype)
    head_w = kaiming_uniform(spec.vocab, d, rng).astype(dtype)
    model.head = DenseLinear(head_w, np.zeros(spec.vocab, dtype=dtype))
    model._register()
    return model


def _embed(table, pos, tokens, scale):
    b, s = tokens.shape
    x = table[tokens.ravel()].T * scale  # (d, N)
    x = x.reshape(x.shape[0], b, s) + pos[:, None, :s]
    return x.reshape(x.shape[0], b * s)


def forward_loss(model: Model, batch: Batch):
    """Mean teacher-forced cross-entropy over valid target positions.

    Returns (loss, cache); the cache carries every intermediate ``backward``
    needs plus an ordered activation trace for numerical diagnostics.
    """
    spec = model.spec
    b, s = batch.src.shape
    if s > spec.seq_len:
        raise ShapeError(f"batch seq {s} exceeds spec seq_len {spec.seq_len}")
    if np.any(batch.src >= spec.vocab) or np.any(batch.tgt_in >= spec.vocab):
        raise ShapeError("token id out of vocab range")
    scale = np.sqrt(spec.d_model).astype(model.dtype) if model.dtype != np.float64 else np.sqrt(spec.d_model)
    trace = []

    x = _embed(model.src_embed, model.pos, batch.src, scale)
    trace.append(("src_embed", x))
    enc_caches = []
    for blk in model.enc_blocks:
        x, c = blk.forward(x, batch.src_valid, b)
        enc_caches.append(c)
        trace.append((blk.prefix, x))
    memory, c_enc_ln = model.enc_ln.forward(x)
    trace.append(("enc.final_ln", memory))

    y = _embed(model.tgt_embed, model.pos, batch.tgt_in, scale)
    trace.append(("tgt_embed", y))
    dec_caches = []
    for blk in model.dec_blocks:
        y, c = blk.forward(y, memory, batch.tgt_valid, batch.src_valid, b)
        dec_caches.append(c)
        trace.append((blk.prefix, y))
    z, c_dec_ln = model.dec_ln.forward(y)
    trace.append(("dec.final_ln", z))
    logits = model.head.forward(z)
    trace.append(("head", logits))

    lse = logits.max(axis=0)
    lse = lse + np.log(np.exp(logits - lse).sum(axis=0))
    targets = batch.tgt_out.ravel()
    valid = batch.tgt_valid.ravel()
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DomainError("batch has no valid target positions")
    logp = logits[targets, np.arange(targets.size)] - lse
    loss = float(-logp[valid].sum() / n_valid)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss; first bad layer: {_first_bad(trace)}")
    cache = {
        "token": model._cache_token,
        "batch": batch,
        "enc": enc_caches,
        "enc_ln": c_enc_ln,
        "memory": memory,
        "dec": dec_caches,
        "dec_ln": c_dec_ln,
        "z": z,
        "logits": logits,
        "lse": lse,
        "n_valid": n_valid,
        "trace": trace,
    }
    return loss, cache


def _first_bad(trace):
    for name, arr in trace:
        if not np.all(np.isfinite(arr)):
            return name
    return "loss-only"


def cache_nbytes(cache) -> int:
    """Total bytes of cached forward activations (analytic memory estimate input)."""
    seen = set()
    total = 0

    def walk(obj):
        nonlocal total
        if isinstance(obj, np.ndarray):
            if id(obj) not in seen:
                seen.add(id(obj))
                total += obj.nbytes
        elif isinstance(obj, (list, tuple)):
            for item in obj:
                walk(item)
        elif isinstance(obj, dict):
            for item in obj.values():
                walk(item)

    walk([cache["enc"], cache["enc_ln"], cache["memory"], cache["dec"],
          cache["dec_ln"], cache["z"], cache["logits"], cache["lse"]])
    return total


def backward(model: Model, cache) -> dict[str, np.ndarray]:
    """Gradients for every parameter, keyed like ``named_parameters()``."""
    if cache.get("token") is not model._cache_token:
        raise ConsistencyError("cache does not belong to this model instance")
    batch: Batch = cache["batch"]
    b, s = batch.src.shape
    grads: dict[str, np.ndarray] = {}

    logits, lse = cache["logits"], cache["lse"]
    targets = batch.tgt_out.ravel()
    valid = batch.tgt_valid.ravel()
    n_valid = cache["n_valid"]
    p = np.exp(logits - lse)
    p[targets, np.arange(targets.size)] -= 1.0
    p[:, ~valid] = 0.0
    dlogits = p * (1.0 / n_valid)

    grad_z = _linear_backward(model.head, "head", cache["z"], dlogits, grads)
    grad_y = model.dec_ln.backward(grad_z, cache["dec_ln"], grads)
    grad_memory = np.zeros_like(cache["memory"])
    for blk, c in zip(reversed(model.dec_blocks), reversed(cache["dec"])):
        grad_y, g_mem = blk.backward(grad_y, c, grads)
        grad_memory += g_mem
    _embed_backward(model, "tgt_embed.w", batch.tgt_in, grad_y, grads)

    grad_x = model.enc_ln.backward(grad_memory, cache["enc_ln"], grads)
    for blk, c in zip(reversed(model.enc_blocks), reversed(cache["enc"])):
        grad_x = blk.backward(grad_x, c, grads)
    _embed_backward(model, "src_embed.w", batch.src, grad_x, grads)
    return grads


def _embed_backward(model: Model, name: str, tokens, grad, grads):
    table = model.src_embed if name == "src_embed.w" else model.tgt_embed
    scale = np.sqrt(model.spec.d_model)
    g = np.zeros_like(table)
    np.add.at(g, tokens.ravel(), (grad * scale).T.astype(table.dtype))
    grads[name] = g


def accuracy(model: Model, batches: list[Batch]) -> float:
    """Teacher-forced token accuracy over the valid positions of *batches*."""
    correct = 0
    total = 0
    for batch in batches:
        _, cache = forward_loss(model, batch)
        pred = cache["logits"].argmax(axis=0)
        valid = batch.tgt_valid.ravel()
        correct += int((pred[valid] == batch.tgt_out.ravel()[valid]).sum())
        total += int(valid.sum())
    return correct / total if total else 0.0


_PARAM_KIND = {"u": "factor_u", "v": "factor_v", "bias": "bias",
               "gamma": "norm", "beta": "norm"}


def model_checkpoint(model: Model) -> Checkpoint:
    """Snapshot every parameter tensor (as float64) into a Checkpoint."""
    tensors = []
    for name, arr in model.named_parameters():
        suffix = name.rsplit(".", 1)[-1]
        kind = _PARAM_KIND.get(suffix, "dense")
        tensors.append(TensorRecord(name, kind, np.asarray(arr, dtype=np.float64)))
    return Checkpoint(digest=spec_digest(model.spec), tensors=tensors)
