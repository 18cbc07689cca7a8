"""BERT-style encoder over CAN-ID tokens with a masked-token output head.

Post-layernorm encoder blocks::

    E   = LN1(X + Dropout(MHA(X)))
    out = LN2(E + Dropout(FFN(E)))

with ``FFN(E) = ReLU(E W1 + b1) W2 + b2`` and attention scaled by sqrt(d/h).
The query/key/value matrices of all heads are stored side by side in one
(d, h*F) array per projection; column block n belongs to head n.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .numerics import Parameter


@dataclass(frozen=True)
class ModelConfig:
    total_tokens: int
    T: int = 32
    L: int = 4
    d: int = 256
    d_ff: int = 512
    h: int = 1
    p_drop: float = 0.1
    ln_eps: float = 1e-5
    init_std: float = 0.02
    embed_std: float = 1.0

    def __post_init__(self):
        for name in ("total_tokens", "L", "d", "d_ff", "h"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if self.d % self.h:
            raise ValueError(f"d={self.d} not divisible by h={self.h}")
        if self.d % 2:
            raise ValueError("sinusoidal positions need an even d")
        if not 0.0 <= self.p_drop < 1.0:
            raise ValueError("p_drop must lie in [0, 1)")

    @property
    def F(self) -> int:
        return self.d // self.h

    @property
    def M(self) -> int:
        return self.total_tokens - 2

    def to_dict(self) -> dict:
        return asdict(self)


def closed_form_parameter_count(cfg: ModelConfig) -> int:
    d, ff, V = cfg.d, cfg.d_ff, cfg.total_tokens
    per_layer = 3 * d * d + d * d + 2 * 2 * d + d * ff + ff + ff * d + d
    return V * d + cfg.L * per_layer + d * V + V


def positional_encoding(T: int, d: int) -> np.ndarray:
    if d % 2:
        raise ValueError("positional encoding needs an even dimension")
    pos = np.arange(T, dtype=np.float64)[:, None]
    rate = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((T, d))
    pe[:, 0::2] = np.sin(pos / rate)
    pe[:, 1::2] = np.cos(pos / rate)
    return pe


LAYER_PARAMS = ("wq", "wk", "wv", "wo", "ln1_g", "ln1_b", "w1", "b1", "w2", "b2",
                "ln2_g", "ln2_b")


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Registry order used for checkpoints and optimizer state."""
    d, ff, V = cfg.d, cfg.d_ff, cfg.total_tokens
    hf = cfg.h * cfg.F
    shapes = {"embed": (V, d)}
    for l in range(cfg.L):
        p = f"layers.{l}."
        shapes.update({
            p + "wq": (d, hf), p + "wk": (d, hf), p + "wv": (d, hf), p + "wo": (hf, d),
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "w1": (d, ff), p + "b1": (ff,), p + "w2": (ff, d), p + "b2": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
        })
    shapes["head_w"] = (d, V)
    shapes["head_b"] = (V,)
    return shapes


class CanBertModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Parameter] = {}
        for name, shape in parameter_shapes(cfg).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("_g"):
                value = np.ones(shape)
            elif len(shape) == 1:
                value = np.zeros(shape)
            elif name == "embed":
                value = rng.normal(0.0, cfg.embed_std, size=shape)
            else:
                value = rng.normal(0.0, cfg.init_std, size=shape)
            self.params[name] = Parameter(value.astype(self.dtype))
        self._pe = positional_encoding(cfg.T, cfg.d).astype(self.dtype)
        count = self.parameter_count()
        if count != closed_form_parameter_count(cfg):
            raise AssertionError(f"parameter count {count} disagrees with closed form")

    # -------------------------------------------------------------- bookkeeping

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].value

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.value[...] = state[k]

    def astype(self, dtype) -> "CanBertModel":
        """Copy of the model with parameters cast to ``dtype`` (e.g. float32 for scoring)."""
        clone = CanBertModel.__new__(CanBertModel)
        clone.cfg = self.cfg
        clone.dtype = np.dtype(dtype)
        clone.params = {k: Parameter(p.value.astype(dtype)) for k, p in self.params.items()}
        clone._pe = self._pe.astype(dtype)
        return clone

    # -------------------------------------------------------------- forward

    def embed_sequence(self, tokens: np.ndarray, training: bool = False, rng=None):
        tokens = np.asarray(tokens)
        V = self.cfg.total_tokens
        if tokens.size and (tokens.min() < 0 or tokens.max() >= V):
            raise IndexError(f"token out of range [0, {V})")
        if tokens.shape[-1] != self.cfg.T:
            raise nx.ShapeError(f"sequence length {tokens.shape[-1]} != T={self.cfg.T}")
        x = self["embed"][tokens] + self._pe
        x, keep = nx.dropout(x, self.cfg.p_drop, training, rng)
        return x, (tokens, keep)

    def _attention(self, x, l: int):
        cfg = self.cfg
        p = f"layers.{l}."
        B, T = x.shape[0], x.shape[1]
        q, cq = nx.linear(x, self[p + "wq"])
        k, ck = nx.linear(x, self[p + "wk"])
        v, cv = nx.linear(x, self[p + "wv"])

        def heads(a):
            return a.reshape(B, T, cfg.h, cfg.F).transpose(0, 2, 1, 3)

        qh, kh, vh = heads(q), heads(k), heads(v)
        scale = 1.0 / float(np.sqrt(cfg.F))
        scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
        attn, _ = nx.softmax_rows(scores)
        ctx = (attn @ vh).transpose(0, 2, 1, 3).reshape(B, T, cfg.h * cfg.F)
        out, co = nx.linear(ctx, self[p + "wo"])
        return out, (cq, ck, cv, qh, kh, vh, attn, co, scale)

    def _attention_backward(self, dout, cache, l: int):
        cfg = self.cfg
        p = f"layers.{l}."
        cq, ck, cv, qh, kh, vh, attn, co, scale = cache
        B, T = dout.shape[0], dout.shape[1]
        dctx, dwo, _ = nx.linear_backward(dout, co)
        self.params[p + "wo"].grad += dwo
        dctx_h = dctx.reshape(B, T, cfg.h, cfg.F).transpose(0, 2, 1, 3)
        dattn = dctx_h @ vh.transpose(0, 1, 3, 2)
        dvh = attn.transpose(0, 1, 3, 2) @ dctx_h
        dscores = nx.softmax_rows_backward(dattn, attn) * scale
        dqh = dscores @ kh
        dkh = dscores.transpose(0, 1, 3, 2) @ qh

        def merge(a):
            return a.transpose(0, 2, 1, 3).reshape(B, T, cfg.h * cfg.F)

        dx = np.zeros((B, T, cfg.d), dtype=dout.dtype)
        for name, g, c in (("wq", dqh, cq), ("wk", dkh, ck), ("wv", dvh, cv)):
            dxi, dw, _ = nx.linear_backward(merge(g), c)
            self.params[p + name].grad += dw
            dx += dxi
        return dx

    def encoder_layer(self, x, l: int, training: bool = False, rng=None):
        cfg = self.cfg
        p = f"layers.{l}."
        att, c_att = self._attention(x, l)
        att, k1 = nx.dropout(att, cfg.p_drop, training, rng)
        e, c_ln1 = nx.layernorm_rows(x + att, self[p + "ln1_g"], self[p + "ln1_b"], cfg.ln_eps)
        f1, c_f1 = nx.linear(e, self[p + "w1"], self[p + "b1"])
        r, relu_mask = nx.relu(f1)
        f2, c_f2 = nx.linear(r, self[p + "w2"], self[p + "b2"])
        f2, k2 = nx.dropout(f2, cfg.p_drop, training, rng)
        out, c_ln2 = nx.layernorm_rows(e + f2, self[p + "ln2_g"], self[p + "ln2_b"], cfg.ln_eps)
        return out, (c_att, k1, c_ln1, c_f1, relu_mask, c_f2, k2, c_ln2)

    def _encoder_layer_backward(self, dout, cache, l: int):
        p = f"layers.{l}."
        c_att, k1, c_ln1, c_f1, relu_mask, c_f2, k2, c_ln2 = cache
        dh, dg, db = nx.layernorm_rows_backward(dout, c_ln2)
        self.params[p + "ln2_g"].grad += dg
        self.params[p + "ln2_b"].grad += db
        df2 = nx.dropout_backward(dh, k2)
        dr, dw2, db2 = nx.linear_backward(df2, c_f2)
        self.params[p + "w2"].grad += dw2
        self.params[p + "b2"].grad += db2
        df1 = nx.relu_backward(dr, relu_mask)
        de_ffn, dw1, db1 = nx.linear_backward(df1, c_f1)
        self.params[p + "w1"].grad += dw1
        self.params[p + "b1"].grad += db1
        de = dh + de_ffn
        dsum, dg, db = nx.layernorm_rows_backward(de, c_ln1)
        self.params[p + "ln1_g"].grad += dg
        self.params[p + "ln1_b"].grad += db
        datt = nx.dropout_backward(dsum, k1)
        return dsum + self._attention_backward(datt, c_att, l)

    def forward(self, tokens, training: bool = False, rng=None, *, keep_cache: bool = False):
        """Logits of shape (..., T, total_tokens).

        Accepts a single (T,) sequence or a (B, T) batch. With
        ``keep_cache=True`` returns ``(logits, cache)`` for :meth:`backward`.
        """
        tokens = np.asarray(tokens)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None, :]
        x, c_emb = self.embed_sequence(tokens, training, rng)
        layer_caches = []
        for l in range(self.cfg.L):
            x, c = self.encoder_layer(x, l, training, rng)
            layer_caches.append(c)
        logits, c_head = nx.linear(x, self["head_w"], self["head_b"])
        if single:
            logits = logits[0]
        if keep_cache:
            return logits, (single, c_emb, layer_caches, c_head)
        return logits

    def backward(self, dlogits, cache) -> None:
        """Accumulate parameter gradients given d(loss)/d(logits)."""
        single, c_emb, layer_caches, c_head = cache
        if single:
            dlogits = dlogits[None]
        dx, dw, db = nx.linear_backward(dlogits, c_head)
        self.params["head_w"].grad += dw
        self.params["head_b"].grad += db
        for l in reversed(range(self.cfg.L)):
            dx = self._encoder_layer_backward(dx, layer_caches[l], l)
        tokens, keep = c_emb
        dx = nx.dropout_backward(dx, keep)
        np.add.at(self.params["embed"].grad, tokens.reshape(-1), dx.reshape(-1, self.cfg.d))

    def attention_maps(self, tokens) -> list[np.ndarray]:
        """Per-layer attention weights, each (B, h, T, T), in eval mode."""
        tokens = np.atleast_2d(np.asarray(tokens))
        x, _ = self.embed_sequence(tokens)
        maps = []
        for l in range(self.cfg.L):
            x, c = self.encoder_layer(x, l)
            maps.append(c[0][6])
        return maps

    def masked_loss_and_grad(self, inputs, positions, targets, training: bool = True, rng=None):
        """Mean cross-entropy over masked slots; accumulates gradients.

        ``positions`` is a pair (batch_index, time_index) of equal-length arrays
        naming each masked slot, ``targets`` the original token at each.
        """
        logits, cache = self.forward(inputs, training, rng, keep_cache=True)
        bi, ti = positions
        loss, dsel = nx.cross_entropy_from_logits(logits[bi, ti], targets)
        dlogits = np.zeros_like(logits)
        np.add.at(dlogits, (bi, ti), dsel)
        self.backward(dlogits, cache)
        return loss


def parameter_count(model: CanBertModel) -> int:
    return model.parameter_count()
