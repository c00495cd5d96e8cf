"""LoRA and MultiLoRA adapter sites, weight-update materialisation, merging.

Row-vector convention: a site maps ``x (.., d_in) -> x @ W (.., d_out)``.

* LoRA:      delta_y = (alpha / r) * (x @ A) @ B,  A: d_in x r, B: r x d_out
* MultiLoRA: delta_y = sum_i scaling_i * ((x @ A_i) @ B_i), scaling_i: d_out

LoRA starts from B = 0. MultiLoRA draws every A_i and B_i from
Kaiming-uniform and zero-initialises the learnable scaling vectors instead,
so both start exactly at the base model.
"""
from __future__ import annotations

import contextlib
import contextvars

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tensor
from .errors import ShapeError, StateError
from .model import PROJECTIONS, Decoder
from .numlin import kaiming_uniform

# (site name, site input) while an adapter forward is running
current_site: contextvars.ContextVar = contextvars.ContextVar("current_site", default=None)


@contextlib.contextmanager
def _site_scope(site: str, x: Tensor):
    token = current_site.set((site, x))
    try:
        yield
    finally:
        current_site.reset(token)


class LoraAdapter:
    kind = "lora"

    def __init__(self, a: Param, b: Param, alpha: float):
        if a.shape[1] != b.shape[0]:
            raise ShapeError("A and B ranks differ")
        self.a = a
        self.b = b
        self.alpha = float(alpha)

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def shape(self) -> tuple[int, int]:
        return self.a.shape[0], self.b.shape[1]

    def params(self):
        yield self.a
        yield self.b

    def delta(self, x: Tensor, site: str = "") -> Tensor:
        return lora_delta_forward(x, self, site)


class MultiLoraAdapter:
    kind = "multilora"

    def __init__(self, a_list: list[Param], b_list: list[Param], scaling_list: list[Param]):
        if not a_list or not (len(a_list) == len(b_list) == len(scaling_list)):
            raise ValueError("need n >= 1 matching A, B and scaling entries")
        d_in, r = a_list[0].shape
        d_out = b_list[0].shape[1]
        for a, b, s in zip(a_list, b_list, scaling_list):
            if a.shape != (d_in, r) or b.shape != (r, d_out) or s.shape != (d_out,):
                raise ShapeError("inconsistent MultiLoRA module shapes")
        self.a_list = list(a_list)
        self.b_list = list(b_list)
        self.scaling_list = list(scaling_list)

    @property
    def n(self) -> int:
        return len(self.a_list)

    @property
    def rank(self) -> int:
        return self.a_list[0].shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.a_list[0].shape[0], self.b_list[0].shape[1]

    def params(self):
        for a, b, s in zip(self.a_list, self.b_list, self.scaling_list):
            yield a
            yield b
            yield s

    def delta(self, x: Tensor, site: str = "") -> Tensor:
        return multilora_delta_forward(x, self, site)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def lora_delta_forward(x, adapter: LoraAdapter, site: str = "") -> Tensor:
    x = _as_tensor(x)
    if x.shape[-1] != adapter.a.shape[0]:
        raise ShapeError(f"input width {x.shape[-1]} does not match A {adapter.a.shape}")
    with _site_scope(site, x):
        h = ad.matmul(x, adapter.a)
        return ad.mul(ad.matmul(h, adapter.b), adapter.scale)


def multilora_delta_forward(x, adapter: MultiLoraAdapter, site: str = "") -> Tensor:
    x = _as_tensor(x)
    if x.shape[-1] != adapter.shape[0]:
        raise ShapeError(f"input width {x.shape[-1]} does not match d_in {adapter.shape[0]}")
    out = None
    with _site_scope(site, x):
        for a, b, s in zip(adapter.a_list, adapter.b_list, adapter.scaling_list):
            term = ad.mul(ad.matmul(ad.matmul(x, a), b), s)
            out = term if out is None else out + term
    return out


def _resolve_targets(targets) -> list[str]:
    targets = list(targets)
    bad = [t for t in targets if t not in PROJECTIONS]
    if bad:
        raise ValueError(f"unknown target(s) {bad}; valid: {', '.join(PROJECTIONS)}")
    if not targets:
        raise ValueError("no targets given")
    return targets


def _check_rank(r: int, d_in: int, d_out: int) -> None:
    if r < 1 or r > min(d_in, d_out):
        raise ValueError(f"rank {r} must lie in [1, {min(d_in, d_out)}] for a {d_in}x{d_out} site")


def attach_lora(model: Decoder, targets, r: int, alpha: float, rng: np.random.Generator) -> Decoder:
    """Freeze the base and add a LoRA pair to each targeted projection (in place)."""
    targets = _resolve_targets(targets)
    if model.merged:
        raise StateError("cannot attach adapters to a merged model")
    dt = model.config.dtype
    model.freeze_base()
    for site in model.sites():
        if site.name.rsplit(".", 1)[-1] not in targets:
            continue
        d_in, d_out = site.shape
        _check_rank(r, d_in, d_out)
        a = Param(kaiming_uniform(rng, d_in, r, fan_in=d_in, dtype=dt), f"{site.name}.lora.a")
        b = Param(np.zeros((r, d_out), dtype=dt), f"{site.name}.lora.b")
        site.adapter = LoraAdapter(a, b, alpha)
    return model


def attach_multilora(model: Decoder, targets, n: int, r: int, rng: np.random.Generator) -> Decoder:
    """Freeze the base and add ``n`` parallel LoRA modules per targeted projection."""
    targets = _resolve_targets(targets)
    if n < 1:
        raise ValueError("n must be >= 1")
    if model.merged:
        raise StateError("cannot attach adapters to a merged model")
    dt = model.config.dtype
    model.freeze_base()
    for site in model.sites():
        if site.name.rsplit(".", 1)[-1] not in targets:
            continue
        d_in, d_out = site.shape
        _check_rank(r, d_in, d_out)
        a_list, b_list, s_list = [], [], []
        for i in range(n):
            pre = f"{site.name}.multilora.{i}"
            a_list.append(Param(kaiming_uniform(rng, d_in, r, fan_in=d_in, dtype=dt), pre + ".a"))
            b_list.append(Param(kaiming_uniform(rng, r, d_out, fan_in=r, dtype=dt), pre + ".b"))
            s_list.append(Param(np.zeros(d_out, dtype=dt), pre + ".scaling"))
        site.adapter = MultiLoraAdapter(a_list, b_list, s_list)
    return model


def materialize_delta(adapter) -> np.ndarray:
    """Weight update of one site as a (d_in, d_out) double-precision matrix."""
    if isinstance(adapter, LoraAdapter):
        a = adapter.a.data.astype(np.float64)
        b = adapter.b.data.astype(np.float64)
        return adapter.scale * (a @ b)
    if isinstance(adapter, MultiLoraAdapter):
        return sum(sublora_deltas(adapter))
    raise TypeError(f"not an adapter: {type(adapter).__name__}")


def sublora_deltas(adapter: MultiLoraAdapter) -> list[np.ndarray]:
    """Per-module updates (A_i @ B_i) * scaling_i, each (d_in, d_out)."""
    out = []
    for a, b, s in zip(adapter.a_list, adapter.b_list, adapter.scaling_list):
        out.append((a.data.astype(np.float64) @ b.data.astype(np.float64)) * s.data.astype(np.float64))
    return out


def ft_delta(tuned: np.ndarray, base: np.ndarray) -> np.ndarray:
    tuned = np.asarray(tuned, dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    if tuned.shape != base.shape:
        raise ShapeError(f"shape mismatch {tuned.shape} vs {base.shape}")
    return tuned - base


def site_deltas(model: Decoder) -> dict[str, np.ndarray]:
    return {s.name: materialize_delta(s.adapter) for s in model.sites() if s.adapter is not None}


def merge(model: Decoder) -> Decoder:
    """Return a plain copy with every adapter folded into its base weight."""
    if model.merged:
        raise StateError("model is already merged")
    adapted = [s for s in model.sites() if s.adapter is not None]
    if not adapted:
        raise StateError("model has no adapters to merge")
    out = model.copy()
    for site in out.sites():
        if site.adapter is None:
            continue
        w = site.weight.data
        merged_w = (w.astype(np.float64) + materialize_delta(site.adapter)).astype(w.dtype)
        site.weight = Param(merged_w, site.weight.name, trainable=False)
        site.adapter = None
    out.merged = True
    return out


def adapter_param_counts(model: Decoder) -> dict[str, int]:
    """Trainable adapter sizes: matmul factors only, and including scalings."""
    matmul = total = 0
    for s in model.sites():
        ad_ = s.adapter
        if ad_ is None:
            continue
        if isinstance(ad_, LoraAdapter):
            k = ad_.a.data.size + ad_.b.data.size
            matmul += k
            total += k
        else:
            for a, b, sc in zip(ad_.a_list, ad_.b_list, ad_.scaling_list):
                matmul += a.data.size + b.data.size
                total += a.data.size + b.data.size + sc.data.size
    return {"matmul": matmul, "total": total}
