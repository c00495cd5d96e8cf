"""Toy LLaMA-style decoder built on the autodiff ops.

Row-vector convention throughout: a linear site computes ``y = x @ W`` with
``W`` of shape (d_in, d_out). No biases. Pre-norm RMS normalisation around
both sublayers, learned absolute positions, separate unembedding.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tensor
from .errors import ShapeError
from .numlin import make_rng

PROJECTIONS = ("q_proj", "k_proj", "v_proj", "o_proj", "up_proj", "down_proj", "gate_proj")
ATTN_PROJECTIONS = PROJECTIONS[:4]

_DTYPES = {"single": np.float32, "double": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    d_mid: int = 172
    n_layers: int = 2
    vocab: int = 64
    max_seq: int = 64
    precision: str = "double"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_mid <= self.d_model:
            raise ValueError("d_mid must exceed d_model")
        if self.precision not in _DTYPES:
            raise ValueError(f"precision must be one of {sorted(_DTYPES)}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def dtype(self):
        return _DTYPES[self.precision]

    def site_shape(self, proj: str) -> tuple[int, int]:
        d, dm = self.d_model, self.d_mid
        if proj in ATTN_PROJECTIONS:
            return d, d
        if proj in ("up_proj", "gate_proj"):
            return d, dm
        if proj == "down_proj":
            return dm, d
        raise ValueError(f"unknown projection {proj!r}; valid: {', '.join(PROJECTIONS)}")

    def to_dict(self) -> dict:
        return asdict(self)


class Linear:
    """One projection site: frozen-or-trainable weight plus optional adapter."""

    def __init__(self, name: str, weight: Param):
        self.name = name
        self.weight = weight
        self.adapter = None

    @property
    def shape(self):
        return self.weight.shape

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"{self.name}: input width {x.shape[-1]} != {self.weight.shape[0]}")
        y = ad.matmul(x, self.weight)
        if self.adapter is not None:
            y = y + self.adapter.delta(x, site=self.name)
        return y

    def params(self):
        yield self.weight
        if self.adapter is not None:
            yield from self.adapter.params()


class Decoder:
    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.merged = False
        dt = config.dtype
        self.tok_emb = Param(tensors["tok_emb"].astype(dt), "tok_emb")
        self.pos_emb = Param(tensors["pos_emb"].astype(dt), "pos_emb")
        self.unembed = Param(tensors["unembed"].astype(dt), "unembed")
        self.final_norm = Param(tensors["final_norm"].astype(dt), "final_norm")
        self.layers = []
        for l in range(config.n_layers):
            layer = {
                "attn_norm": Param(tensors[f"layers.{l}.attn_norm"].astype(dt), f"layers.{l}.attn_norm"),
                "mlp_norm": Param(tensors[f"layers.{l}.mlp_norm"].astype(dt), f"layers.{l}.mlp_norm"),
            }
            for proj in PROJECTIONS:
                name = f"layers.{l}.{proj}"
                layer[proj] = Linear(name, Param(tensors[name + ".weight"].astype(dt), name + ".weight"))
            self.layers.append(layer)
        self._mask_cache = {}

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "Decoder":
        """Random stand-in for a pretrained base model."""
        rng = make_rng(seed)
        d, v = config.d_model, config.vocab
        t = {
            "tok_emb": rng.normal(0.0, 0.5, (v, d)),
            "pos_emb": rng.normal(0.0, 0.5, (config.max_seq, d)),
            "unembed": rng.normal(0.0, 1.0 / math.sqrt(d), (d, v)),
            "final_norm": np.ones(d),
        }
        for l in range(config.n_layers):
            t[f"layers.{l}.attn_norm"] = np.ones(d)
            t[f"layers.{l}.mlp_norm"] = np.ones(d)
            for proj in PROJECTIONS:
                d_in, d_out = config.site_shape(proj)
                t[f"layers.{l}.{proj}.weight"] = rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, d_out))
        return cls(config, t)

    # -- parameter bookkeeping -------------------------------------------------

    def sites(self):
        for layer in self.layers:
            for proj in PROJECTIONS:
                yield layer[proj]

    def site(self, name: str) -> Linear:
        for s in self.sites():
            if s.name == name:
                return s
        raise KeyError(name)

    def base_params(self):
        yield self.tok_emb
        yield self.pos_emb
        for layer in self.layers:
            yield layer["attn_norm"]
            yield layer["mlp_norm"]
            for proj in PROJECTIONS:
                yield layer[proj].weight
        yield self.final_norm
        yield self.unembed

    def parameters(self):
        yield from self.base_params()
        for s in self.sites():
            if s.adapter is not None:
                yield from s.adapter.params()

    def trainable_params(self):
        return [p for p in self.parameters() if p.trainable]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def copy(self) -> "Decoder":
        return copy.deepcopy(self)

    def freeze_base(self) -> None:
        for p in self.base_params():
            p.set_trainable(False)

    # -- forward ---------------------------------------------------------------

    def _causal_mask(self, t: int) -> np.ndarray:
        m = self._mask_cache.get(t)
        if m is None:
            m = np.triu(np.full((t, t), -np.inf, dtype=self.config.dtype), k=1)
            self._mask_cache[t] = m
        return m

    def logits(self, ids) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        t = ids.shape[1]
        if t > self.config.max_seq:
            raise ValueError(f"sequence length {t} exceeds max_seq {self.config.max_seq}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab):
            raise ValueError("token id outside vocabulary")
        x = ad.embedding(ids, self.tok_emb) + ad.prefix(self.pos_emb, t, axis=0)
        mask = self._causal_mask(t)
        for layer in self.layers:
            x = x + mha_forward(ad.rms_norm(x, layer["attn_norm"]), layer, mask, self.config.n_heads)
            x = x + mlp_forward(ad.rms_norm(x, layer["mlp_norm"]), layer)
        x = ad.rms_norm(x, self.final_norm)
        return ad.matmul(x, self.unembed)


def mha_forward(x: Tensor, layer: dict, mask: np.ndarray | None, n_heads: int) -> Tensor:
    """Multi-head causal self-attention on a (batch, seq, d) input."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    squeeze = x.data.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    b, t, d = x.shape
    if d % n_heads:
        raise ShapeError("model width not divisible by head count")
    dh = d // n_heads

    def heads(z):
        return ad.transpose(ad.reshape(z, (b, t, n_heads, dh)), (0, 2, 1, 3))

    q = heads(layer["q_proj"](x))
    k = heads(layer["k_proj"](x))
    v = heads(layer["v_proj"](x))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = scores + Tensor(mask)
    attn = ad.softmax(scores, axis=-1)
    out = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
    out = layer["o_proj"](out)
    if squeeze:
        out = ad.reshape(out, (t, d))
    return out


def mlp_forward(x: Tensor, layer: dict) -> Tensor:
    """silu(x W_gate) * (x W_up), then W_down."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    gate = ad.silu(layer["gate_proj"](x))
    return layer["down_proj"](ad.mul(gate, layer["up_proj"](x)))


def forward_loss(model: Decoder, token_ids, loss_mask=None) -> Tensor:
    """Mean next-token cross-entropy.

    ``loss_mask`` marks which tokens are prediction targets (same shape as
    ``token_ids``); position 0 is never a target. Defaults to every token
    after the first.
    """
    ids = np.asarray(token_ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if loss_mask is None:
        loss_mask = np.ones_like(ids)
    loss_mask = np.asarray(loss_mask)
    if loss_mask.ndim == 1:
        loss_mask = loss_mask[None, :]
    if loss_mask.shape != ids.shape:
        raise ShapeError("loss mask must match token ids")
    if ids.shape[1] < 2:
        raise ValueError("need at least two tokens for a next-token loss")
    logits = model.logits(ids)
    head = ad.prefix(logits, ids.shape[1] - 1, axis=1)
    return ad.cross_entropy(head, ids[:, 1:], loss_mask[:, 1:])
