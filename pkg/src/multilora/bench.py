"""Cost accounting for adapter sites.

Counters are exact integers computed from the configuration (per token, per
site). Wall-clock throughput is measured for information only.
"""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adapters import current_site
from .model import forward_loss

SCHEMA_VERSION = 1


@dataclass
class CostReport:
    method: str
    d_in: int
    d_out: int
    r: int
    n: int
    matmul_flops_per_token_per_site: int
    adapter_overhead_flops: int
    cached_activation_values_per_token_per_site: int
    instrumented_activation_values_per_token_per_site: int | None = None
    wall_tokens_per_second: float | None = None
    config_digest: str | None = None

    @property
    def total_rank(self) -> int:
        return self.r * self.n

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["total_rank"] = self.total_rank
        return d


def _check(method: str, d_in: int, d_out: int, r: int, n: int) -> None:
    if method not in ("lora", "multilora"):
        raise ValueError(f"method must be 'lora' or 'multilora', got {method!r}")
    if min(d_in, d_out, r, n) < 1:
        raise ValueError("dimensions, r and n must be >= 1")
    if method == "lora" and n != 1:
        raise ValueError("LoRA has a single module (n = 1); pass the total rank as r")


def flop_count(method: str, d_in: int, d_out: int, r: int, n: int = 1) -> tuple[int, int]:
    """(matmul FLOPs, elementwise overhead FLOPs) per token per site, forward pass.

    A multiply-add counts as two FLOPs. LoRA's static alpha/r factor folds into
    B and is not counted; MultiLoRA pays n scalings plus n - 1 additions.
    """
    _check(method, d_in, d_out, r, n)
    matmul = n * (2 * d_in * r + 2 * r * d_out)
    overhead = 0 if method == "lora" else (2 * n - 1) * d_out
    return matmul, overhead


def activation_count(method: str, d_in: int, d_out: int, r: int, n: int = 1) -> int:
    """Values cached for backward per token per site, excluding the site input.

    LoRA keeps x @ A; each MultiLoRA module keeps x @ A_i and its unscaled
    output, which the scaling gradient needs.
    """
    _check(method, d_in, d_out, r, n)
    if method == "lora":
        return r
    return n * (r + d_out)


def cost_report(method: str, d_in: int, d_out: int, r: int, n: int = 1) -> CostReport:
    matmul, overhead = flop_count(method, d_in, d_out, r, n)
    return CostReport(method, d_in, d_out, r, n, matmul, overhead, activation_count(method, d_in, d_out, r, n))


class ActivationCounter:
    """Counts values that adapter ops retain for backward, grouped by site.

    Tensors are recorded only while an adapter forward is running; the site
    input itself is skipped because the base projection needs it anyway.
    """

    def __init__(self):
        self.per_site: dict[str, int] = {}
        self._seen: set[int] = set()
        self._keep: list = []  # hold references so ids stay unique
        self._cm = None

    def _hook(self, t) -> None:
        ctx = current_site.get()
        if ctx is None:
            return
        site, x = ctx
        if t is x or id(t) in self._seen:
            return
        self._seen.add(id(t))
        self._keep.append(t)
        self.per_site[site] = self.per_site.get(site, 0) + int(t.data.size)

    def __enter__(self):
        self._cm = ad.saved_tensor_hook(self._hook)
        self._cm.__enter__()
        return self

    def __exit__(self, *exc):
        self._cm.__exit__(*exc)
        self._keep.clear()
        return False

    def per_token(self, n_tokens: int) -> dict[str, int]:
        out = {}
        for site, total in self.per_site.items():
            if total % n_tokens:
                raise ArithmeticError(f"{site}: {total} cached values not divisible by {n_tokens} tokens")
            out[site] = total // n_tokens
        return out


def instrumented_activation_count(model, tokens: np.ndarray) -> dict[str, int]:
    """Run one forward on ``tokens`` (B, T) and count cached adapter values per token."""
    tokens = np.asarray(tokens)
    with ActivationCounter() as counter:
        forward_loss(model, tokens)
    return counter.per_token(int(tokens.size))


def measure_throughput(model, batches, steps: int = 100, warmup: int = 5, lr: float = 1e-4,
                       block: int = 10) -> float:
    """Training tokens per second over ``steps`` optimizer steps after ``warmup``.

    The measured steps are split into blocks of ``block`` steps and the
    fastest block wins, as timeit does: on a shared core slowdowns only ever
    add time. ``batches`` is cycled. The model is updated in place, so pass a
    copy if the weights matter afterwards.
    """
    if steps < 1 or warmup < 0 or block < 1:
        raise ValueError("steps and block must be >= 1, warmup >= 0")
    if steps < warmup:
        raise ValueError(f"steps ({steps}) must not be smaller than warmup ({warmup})")
    params = model.trainable_params()
    state = ad.OptimState()
    best = 0.0
    tokens, t0 = 0, 0.0
    for i in range(warmup + steps):
        k = i - warmup
        if k >= 0 and k % block == 0:
            tokens, t0 = 0, time.perf_counter()
        b = batches[i % len(batches)]
        for p in params:
            p.zero_grad()
        loss = forward_loss(model, b.tokens, b.loss_mask)
        ad.backward(loss)
        ad.adamw_step(params, state, lr)
        if k >= 0:
            tokens += int(b.tokens.size)
            if (k + 1) % block == 0 or k + 1 == steps:
                best = max(best, tokens / (time.perf_counter() - t0))
    return best


def report_json(reports, meta: dict | None = None) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "meta": meta or {}, "reports": [r.to_dict() for r in reports]}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "Adapter cost report",
    "type": "object",
    "required": ["schema_version", "meta", "reports"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "meta": {"type": "object"},
        "reports": {
            "type": "array",
            "items": {
                "type": "object",
                "required": [
                    "method", "d_in", "d_out", "r", "n", "total_rank",
                    "matmul_flops_per_token_per_site", "adapter_overhead_flops",
                    "cached_activation_values_per_token_per_site",
                    "instrumented_activation_values_per_token_per_site",
                    "wall_tokens_per_second", "config_digest",
                ],
                "additionalProperties": False,
                "properties": {
                    "method": {"enum": ["lora", "multilora"]},
                    "d_in": {"type": "integer", "minimum": 1},
                    "d_out": {"type": "integer", "minimum": 1},
                    "r": {"type": "integer", "minimum": 1},
                    "n": {"type": "integer", "minimum": 1},
                    "total_rank": {"type": "integer", "minimum": 1},
                    "matmul_flops_per_token_per_site": {"type": "integer", "minimum": 0},
                    "adapter_overhead_flops": {"type": "integer", "minimum": 0},
                    "cached_activation_values_per_token_per_site": {"type": "integer", "minimum": 0},
                    "instrumented_activation_values_per_token_per_site": {"type": ["integer", "null"], "minimum": 0},
                    "wall_tokens_per_second": {"type": ["number", "null"], "exclusiveMinimum": 0},
                    "config_digest": {"type": ["string", "null"]},
                },
            },
        },
    },
}
