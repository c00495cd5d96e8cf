"""Deterministic trainer and model <-> checkpoint conversion."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adapters import LoraAdapter, MultiLoraAdapter, attach_lora, attach_multilora
from .autodiff import OptimState, Param, Schedule, lr_at
from .config import RunConfig
from .model import Decoder, ModelConfig, forward_loss
from .numlin import make_rng
from .store import Checkpoint
from .tasks import MixtureSpec, batchify, gen_mixture

log = logging.getLogger(__name__)

EVAL_PER_TASK = 32


def build_model(cfg: RunConfig) -> Decoder:
    """Base model from ``base_seed`` plus the configured adapters from ``seed``."""
    model = Decoder.init(cfg.model_config(), cfg.base_seed)
    rng = make_rng(cfg.seed)
    if cfg.method == "lora":
        attach_lora(model, cfg.targets, cfg.r, cfg.effective_alpha, rng)
    elif cfg.method == "multilora":
        attach_multilora(model, cfg.targets, cfg.n, cfg.r, rng)
    return model


def training_data(cfg: RunConfig):
    spec = MixtureSpec(counts=dict(cfg.task_counts), seed=cfg.data_seed, max_seq=cfg.max_seq)
    return gen_mixture(spec)


def eval_batches(cfg: RunConfig):
    spec = MixtureSpec(counts={t: EVAL_PER_TASK for t in cfg.task_counts},
                       seed=cfg.data_seed + 104729, max_seq=cfg.max_seq)
    return batchify(gen_mixture(spec), 32)


def evaluate(model: Decoder, batches) -> float:
    """Token-weighted mean loss over ``batches`` (no gradient bookkeeping kept)."""
    total = 0.0
    count = 0
    for b in batches:
        loss = forward_loss(model, b.tokens, b.loss_mask)
        n = int(b.loss_mask[:, 1:].sum())
        total += float(loss.data) * n
        count += n
    return total / count


@dataclass
class TrainResult:
    log: list = field(default_factory=list)  # (step, loss, lr)
    initial_eval: float = float("nan")
    final_eval: float = float("nan")
    steps: int = 0


def train(model: Decoder, samples, cfg: RunConfig, eval_set=None) -> TrainResult:
    per_epoch = -(-len(samples) // cfg.batch)
    total = cfg.steps or cfg.epochs * per_epoch
    sched = Schedule(cfg.effective_lr, total, cfg.warmup_ratio)
    params = model.trainable_params()
    state = OptimState()
    order_rng = make_rng(cfg.seed + 1)
    res = TrainResult(steps=total)
    if eval_set is not None:
        res.initial_eval = evaluate(model, eval_set)
    batches = []
    for step in range(total):
        if step % per_epoch == 0:
            order = order_rng.permutation(len(samples))
            batches = batchify([samples[i] for i in order], cfg.batch)
        batch = batches[step % per_epoch]
        lr = lr_at(sched, step)
        for p in params:
            p.zero_grad()
        loss = forward_loss(model, batch.tokens, batch.loss_mask)
        if not np.isfinite(loss.data):
            raise ArithmeticError(f"non-finite loss at step {step}")
        ad.backward(loss)
        if cfg.max_grad_norm > 0:
            ad.clip_grad_norm(params, cfg.max_grad_norm)
        ad.adamw_step(params, state, lr, weight_decay=cfg.weight_decay)
        res.log.append((step + 1, float(loss.data), lr))
        if (step + 1) % 200 == 0:
            log.info("step %d/%d loss %.4f lr %.3g", step + 1, total, float(loss.data), lr)
    if eval_set is not None:
        res.final_eval = evaluate(model, eval_set)
    return res


# -- checkpoints --------------------------------------------------------------------


def to_checkpoint(model: Decoder, cfg: RunConfig | None = None, step: int = 0, **extra) -> Checkpoint:
    meta = {"model": model.config.to_dict(), "step": step, "merged": model.merged}
    if cfg is not None:
        meta.update(config=cfg.to_dict(), config_digest=cfg.digest(), seed=cfg.seed, method=cfg.method)
    alphas = [s.adapter.alpha for s in model.sites() if isinstance(s.adapter, LoraAdapter)]
    if alphas:
        meta["lora_alpha"] = alphas[0]
    meta.update(extra)
    return Checkpoint(tensors=model.state_dict(), metadata=meta)


def from_checkpoint(ckpt: Checkpoint) -> Decoder:
    """Rebuild a model (with any adapters) from a checkpoint written by ``to_checkpoint``."""
    mc = ModelConfig(**ckpt.metadata["model"])
    t = ckpt.tensors
    model = Decoder(mc, t)
    model.merged = bool(ckpt.metadata.get("merged", False))
    adapted = False
    for site in model.sites():
        pre = site.name
        if pre + ".lora.a" in t:
            a = Param(t[pre + ".lora.a"], pre + ".lora.a")
            b = Param(t[pre + ".lora.b"], pre + ".lora.b")
            site.adapter = LoraAdapter(a, b, ckpt.metadata.get("lora_alpha", a.shape[1]))
            adapted = True
        elif pre + ".multilora.0.a" in t:
            a_list, b_list, s_list = [], [], []
            i = 0
            while f"{pre}.multilora.{i}.a" in t:
                k = f"{pre}.multilora.{i}"
                a_list.append(Param(t[k + ".a"], k + ".a"))
                b_list.append(Param(t[k + ".b"], k + ".b"))
                s_list.append(Param(t[k + ".scaling"], k + ".scaling"))
                i += 1
            site.adapter = MultiLoraAdapter(a_list, b_list, s_list)
            adapted = True
    if adapted or model.merged:
        model.freeze_base()
    return model


def run_training(cfg: RunConfig, with_eval: bool = True):
    """Build, train and return (model, result) for a config."""
    model = build_model(cfg)
    samples = training_data(cfg)
    ev = eval_batches(cfg) if with_eval else None
    res = train(model, samples, cfg, ev)
    return model, res
