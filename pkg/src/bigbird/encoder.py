"""Single-layer encoder and stacks.

    a_i = Attn(X)_i + x_i
    z_i = O(a_i) + a_i,      O(a) = ReLU(a W1 + b1) W2 + b2

No layer normalization.  The backward pass below is derived by hand for the
softmax path and is validated by :func:`grad_check` against central
differences.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .attn_block import attn_block_sparse
from .attn_ref import Hardmax, HeadParams, Softmax, attention_weights, attn_dense
from .pattern import BlockPatternConfig, Mode, TokenMask, extend_etc

__all__ = [
    "LayerParams",
    "EncoderConfig",
    "ffn",
    "encoder_layer",
    "encoder_stack",
    "layer_forward",
    "layer_backward",
    "softmax_backward",
    "attention_backward",
    "ffn_backward",
    "layer_loss_and_grad",
    "stack_loss_and_grad",
    "grad_check",
    "flatten_layers",
    "flatten_grads",
    "layers_to_arrays",
    "layers_from_arrays",
    "unflatten_layers",
    "save_params",
    "load_params",
]


@dataclass(frozen=True, eq=False)
class LayerParams:
    heads: tuple[HeadParams, ...]
    W1: np.ndarray  # d x q
    b1: np.ndarray  # q
    W2: np.ndarray  # q x d
    b2: np.ndarray  # d

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(self.heads))
        for name in ("W1", "b1", "W2", "b2"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        d, q = self.W1.shape
        if self.b1.shape != (q,) or self.W2.shape != (q, d) or self.b2.shape != (d,):
            raise ValueError(
                f"FFN shapes inconsistent: W1 {self.W1.shape}, b1 {self.b1.shape}, "
                f"W2 {self.W2.shape}, b2 {self.b2.shape}"
            )
        for h in self.heads:
            if h.d != d or h.W_V.shape[1] != d:
                raise ValueError(f"head shapes {h.W_Q.shape}/{h.W_V.shape} do not fit d={d}")

    @property
    def d(self) -> int:
        return self.W1.shape[0]

    @property
    def q(self) -> int:
        return self.W1.shape[1]

    @classmethod
    def zeros(cls, d, m, q, n_heads=1):
        heads = [HeadParams(np.zeros((d, m)), np.zeros((d, m)), np.zeros((d, d))) for _ in range(n_heads)]
        return cls(heads, np.zeros((d, q)), np.zeros(q), np.zeros((q, d)), np.zeros(d))

    @classmethod
    def random(cls, d, m, q, rng, n_heads=1, scale=0.5):
        heads = [HeadParams.random(d, m, rng, scale) for _ in range(n_heads)]
        return cls(
            heads,
            scale * rng.standard_normal((d, q)),
            scale * rng.standard_normal(q),
            scale * rng.standard_normal((q, d)),
            scale * rng.standard_normal(d),
        )


@dataclass(frozen=True, eq=False)
class EncoderConfig:
    """``pattern`` is a :class:`BlockPatternConfig` (blocked path) or a
    :class:`TokenMask` over the ordinary tokens (dense path).

    ``position_embedding`` follows the d x n convention: column ``i`` is added
    to token ``i``.
    """

    layers: tuple[LayerParams, ...]
    pattern: BlockPatternConfig | TokenMask
    kind: Softmax | Hardmax = field(default_factory=Softmax)
    mode: Mode = Mode.ITC
    etc_global_vectors: np.ndarray | None = None
    position_embedding: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "mode", Mode(self.mode))
        if len({p.d for p in self.layers}) > 1:
            raise ValueError("all layers must share the model width d")
        if isinstance(self.pattern, BlockPatternConfig) and self.pattern.mode is not self.mode:
            raise ValueError("pattern mode and encoder mode disagree")
        has_globals = self.etc_global_vectors is not None
        if has_globals != (self.mode is Mode.ETC):
            raise ValueError("etc_global_vectors must be given exactly when mode is ETC")
        if has_globals:
            gv = np.atleast_2d(np.asarray(self.etc_global_vectors, dtype=np.float64))
            object.__setattr__(self, "etc_global_vectors", gv)
            if isinstance(self.pattern, BlockPatternConfig) and gv.shape[0] != self.pattern.global_tokens:
                raise ValueError(
                    f"ETC pattern needs {self.pattern.global_tokens} global vectors, got {gv.shape[0]}"
                )


def ffn(a, p: LayerParams) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.shape[-1] != p.d:
        raise ValueError(f"input width {a.shape[-1]} does not match d={p.d}")
    return np.maximum(a @ p.W1 + p.b1, 0.0) @ p.W2 + p.b2


def _attend(X, heads, mask, kind):
    if isinstance(mask, BlockPatternConfig):
        return attn_block_sparse(X, heads, mask, kind)
    return attn_dense(X, heads, mask, kind)


def encoder_layer(X, p: LayerParams, mask, kind=Softmax()) -> np.ndarray:
    """``mask`` may be a TokenMask (dense path) or a BlockPatternConfig (blocked)."""
    X = np.asarray(X, dtype=np.float64)
    a = _attend(X, p.heads, mask, kind) + X
    return ffn(a, p) + a


def encoder_stack(X, cfg: EncoderConfig) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if cfg.position_embedding is not None:
        X = X + np.asarray(cfg.position_embedding, dtype=np.float64).T
    mask = cfg.pattern
    g_tokens = 0
    if cfg.mode is Mode.ETC:
        g_tokens = cfg.etc_global_vectors.shape[0]
        X = np.vstack([cfg.etc_global_vectors, X])
        if isinstance(mask, TokenMask):
            mask = extend_etc(mask, g_tokens)
    for p in cfg.layers:
        X = encoder_layer(X, p, mask, cfg.kind)
    return X[g_tokens:]


# -- backward ----------------------------------------------------------------


def softmax_backward(P, dP) -> np.ndarray:
    """Gradient w.r.t. the pre-softmax scores of row-wise softmax ``P``."""
    return P * (dP - (dP * P).sum(axis=1, keepdims=True))


def _head_forward(X, head, adj, kind):
    Q, K, V = X @ head.W_Q, X @ head.W_K, X @ head.W_V
    P = attention_weights(X, head, adj, kind)
    return {"Q": Q, "K": K, "V": V, "P": P, "out": P @ V}


def attention_backward(X, head: HeadParams, cache, dOut, scale: float):
    """Gradients of one softmax head's output ``P V`` w.r.t. X and its weights."""
    Q, K, V, P = cache["Q"], cache["K"], cache["V"], cache["P"]
    dV = P.T @ dOut
    dS = softmax_backward(P, dOut @ V.T)  # zero off-mask since P is zero there
    dQ = scale * dS @ K
    dK = scale * dS.T @ Q
    grads = {"W_Q": X.T @ dQ, "W_K": X.T @ dK, "W_V": X.T @ dV}
    dX = dQ @ head.W_Q.T + dK @ head.W_K.T + dV @ head.W_V.T
    return dX, grads


def ffn_backward(a, p: LayerParams, dOut):
    h = a @ p.W1 + p.b1
    r = np.maximum(h, 0.0)
    dR = dOut @ p.W2.T
    dH = dR * (h > 0)
    grads = {"W1": a.T @ dH, "b1": dH.sum(axis=0), "W2": r.T @ dOut, "b2": dOut.sum(axis=0)}
    return dH @ p.W1.T, grads


def _require_softmax(kind):
    if not isinstance(kind, Softmax):
        raise ValueError("gradients need a differentiable score (softmax); hardmax is rejected")
    return kind.scale


def layer_forward(X, p: LayerParams, mask, kind=Softmax()):
    """Dense-path forward keeping what the backward pass needs."""
    scale = _require_softmax(kind)
    X = np.asarray(X, dtype=np.float64)
    adj = mask.adjacency if isinstance(mask, TokenMask) else np.asarray(mask, dtype=bool)
    heads = [_head_forward(X, h, adj, kind) for h in p.heads]
    a = X + sum(c["out"] for c in heads)
    z = ffn(a, p) + a
    return z, {"X": X, "heads": heads, "a": a, "scale": scale}


def layer_backward(p: LayerParams, cache, dZ):
    """Returns (dX, grads) where grads mirrors :func:`flatten_layers` naming."""
    X, a, scale = cache["X"], cache["a"], cache["scale"]
    da_ffn, grads = ffn_backward(a, p, dZ)
    da = dZ + da_ffn
    dX = da.copy()
    head_grads = []
    for head, hc in zip(p.heads, cache["heads"]):
        dXh, g = attention_backward(X, head, hc, da, scale)
        dX += dXh
        head_grads.append(g)
    grads["heads"] = head_grads
    return dX, grads


def layer_loss_and_grad(X, p: LayerParams, mask, kind=Softmax()):
    """Loss 0.5 * sum(Z**2) of one layer; gradient w.r.t. params and X."""
    z, cache = layer_forward(X, p, mask, kind)
    dX, grads = layer_backward(p, cache, z)
    return 0.5 * float((z * z).sum()), grads, dX


def stack_loss_and_grad(X, layers, mask, kind=Softmax()):
    caches = []
    h = np.asarray(X, dtype=np.float64)
    for p in layers:
        h, c = layer_forward(h, p, mask, kind)
        caches.append(c)
    dh = h
    all_grads = [None] * len(layers)
    for i in reversed(range(len(layers))):
        dh, all_grads[i] = layer_backward(layers[i], caches[i], dh)
    return 0.5 * float((h * h).sum()), all_grads, dh


# -- flat parameter vectors ----------------------------------------------------

_HEAD_KEYS = ("W_Q", "W_K", "W_V")
_FFN_KEYS = ("W1", "b1", "W2", "b2")


def _named_arrays(layers):
    for li, p in enumerate(layers):
        for hi, h in enumerate(p.heads):
            for k in _HEAD_KEYS:
                yield f"layer{li}.head{hi}.{k}", getattr(h, k)
        for k in _FFN_KEYS:
            yield f"layer{li}.{k}", getattr(p, k)


def _named_grads(grads):
    for li, g in enumerate(grads):
        for hi, hg in enumerate(g["heads"]):
            for k in _HEAD_KEYS:
                yield f"layer{li}.head{hi}.{k}", hg[k]
        for k in _FFN_KEYS:
            yield f"layer{li}.{k}", g[k]


def flatten_layers(layers) -> np.ndarray:
    return np.concatenate([a.ravel() for _, a in _named_arrays(layers)])


def flatten_grads(grads) -> np.ndarray:
    return np.concatenate([a.ravel() for _, a in _named_grads(grads)])


def unflatten_layers(theta, template) -> list[LayerParams]:
    """Rebuild layers shaped like ``template`` from a flat vector."""
    theta = np.asarray(theta, dtype=np.float64)
    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        out = theta[pos : pos + size].reshape(shape)
        pos += size
        return out

    layers = []
    for p in template:
        heads = [HeadParams(*(take(getattr(h, k).shape) for k in _HEAD_KEYS)) for h in p.heads]
        layers.append(LayerParams(heads, *(take(getattr(p, k).shape) for k in _FFN_KEYS)))
    if pos != theta.size:
        raise ValueError(f"parameter vector has {theta.size} entries, template needs {pos}")
    return layers


def grad_check(loss, grad, theta, eps: float = 1e-5, n_coords: int = 200, seed: int = 0) -> float:
    """Max relative error between ``grad(theta)`` and central differences of
    ``loss`` over a random sample of ``n_coords`` coordinates (all of them if
    there are fewer).

    Relative error is ``|a - n| / max(|a|, |n|, 1e-7)``; the floor keeps
    coordinates whose true gradient is ~0 from dividing roundoff by roundoff.
    """
    theta = np.array(theta, dtype=np.float64)
    analytic = np.asarray(grad(theta), dtype=np.float64).ravel()
    rng = np.random.default_rng(seed)
    coords = np.arange(theta.size)
    if theta.size > n_coords:
        coords = np.sort(rng.choice(theta.size, size=n_coords, replace=False))
    worst = 0.0
    flat = theta.ravel()
    for c in coords:
        old = flat[c]
        flat[c] = old + eps
        up = loss(theta)
        flat[c] = old - eps
        down = loss(theta)
        flat[c] = old
        num = (up - down) / (2 * eps)
        a = analytic[c]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-7))
    return worst


# -- binary container ------------------------------------------------------------

_MAGIC = b"BBPARAMS"
_VERSION = 1


def save_params(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays.

    Layout (little-endian): magic ``BBPARAMS``; u32 version; u32 count; per
    array: u16 name length, utf-8 name, u8 ndim, ndim x u64 dims; then every
    payload as float64 in table order, C order.
    """
    out = bytearray(_MAGIC)
    out += struct.pack("<II", _VERSION, len(arrays))
    payload = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        payload.append(arr.tobytes(order="C"))
    out += b"".join(payload)
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != _MAGIC:
        raise ValueError("not a parameter container (bad magic)")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != _VERSION:
        raise ValueError(f"unsupported container version {version}")
    pos = 16
    table = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        table.append((name, shape))
    arrays = {}
    for name, shape in table:
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    if pos != len(buf):
        raise ValueError("trailing bytes after parameter payload")
    return arrays


def layers_to_arrays(layers) -> dict[str, np.ndarray]:
    return dict(_named_arrays(layers))


def layers_from_arrays(arrays: dict[str, np.ndarray]) -> list[LayerParams]:
    layers = []
    li = 0
    while f"layer{li}.W1" in arrays:
        heads = []
        hi = 0
        while f"layer{li}.head{hi}.W_Q" in arrays:
            heads.append(HeadParams(*(arrays[f"layer{li}.head{hi}.{k}"] for k in _HEAD_KEYS)))
            hi += 1
        layers.append(LayerParams(heads, *(arrays[f"layer{li}.{k}"] for k in _FFN_KEYS)))
        li += 1
    return layers
