"""Command line: train, merge, analyze, bench, repro.

Exit codes: 0 ok, 2 usage, 3 data/format, 4 numeric failure. Logs go to
stderr; data goes to files named by the output flags.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from . import adapters, bench, spectral
from .config import METHODS, RunConfig, apply_overrides
from .errors import DegenerateInputError, FormatError, NumericError, ShapeError, StateError
from .model import PROJECTIONS, Decoder
from .store import Checkpoint, atomic_write_text, load_checkpoint, load_kv, save_checkpoint
from .tasks import TASKS, batchify, gen_mixture, MixtureSpec
from .train import build_model, from_checkpoint, run_training, to_checkpoint

log = logging.getLogger("multilora")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# -- helpers -----------------------------------------------------------------------


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = apply_overrides(cfg, load_kv(args.config))
    flags = {
        "method": args.method, "r": args.r, "n": args.n, "alpha": args.alpha,
        "lr": args.lr, "lr_scale": args.lr_scale, "seed": args.seed, "steps": args.steps,
        "epochs": args.epochs, "batch": args.batch, "base_seed": args.base_seed,
        "data_seed": args.data_seed, "precision": args.precision,
    }
    d = cfg.to_dict()
    d.update({k: v for k, v in flags.items() if v is not None})
    if args.targets:
        d["targets"] = [t.strip() for t in args.targets.split(",") if t.strip()]
    if args.per_task is not None:
        d["task_counts"] = {t: args.per_task for t in TASKS}
    return RunConfig.from_dict(d)


def _loss_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "lr"])
    for step, loss, lr in rows:
        w.writerow([step, repr(loss), repr(lr)])
    return buf.getvalue()


def _site_name(module: str, layer: int, n_layers: int) -> str:
    if module not in PROJECTIONS:
        raise UsageError(f"unknown module {module!r}; valid: {', '.join(PROJECTIONS)}")
    if not 0 <= layer < n_layers:
        raise UsageError(f"layer {layer} outside [0, {n_layers - 1}]")
    return f"layers.{layer}.{module}"


def _probe_tokens(cfg_model, n: int = 100, t: int = 16, seed: int = 12345) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, cfg_model.vocab, size=(n, min(t, cfg_model.max_seq)))


def max_logit_deviation(a: Decoder, b: Decoder, tokens: np.ndarray) -> float:
    return float(np.max(np.abs(a.logits(tokens).data.astype(np.float64) - b.logits(tokens).data.astype(np.float64))))


def delta_checkpoint(tuned: Checkpoint, base: Checkpoint | None = None) -> Checkpoint:
    """Per-site weight updates: adapter factors if present, else tuned - base."""
    model = from_checkpoint(tuned)
    deltas = adapters.site_deltas(model)
    kind = "adapter"
    if not deltas:
        if base is None:
            raise FormatError("checkpoint has no adapters; pass --base to diff full weights")
        kind = "full"
        for site in model.sites():
            key = site.name + ".weight"
            if key not in base.tensors or base.tensors[key].shape != tuned.tensors[key].shape:
                raise FormatError(f"base checkpoint lacks a compatible {key!r}")
            deltas[site.name] = adapters.ft_delta(tuned.tensors[key], base.tensors[key])
    meta = {"kind": "delta", "source": kind, "model": model.config.to_dict()}
    return Checkpoint(tensors=dict(sorted(deltas.items())), metadata=meta)


def _load_delta(path: str) -> Checkpoint:
    ckpt = load_checkpoint(path)
    if ckpt.metadata.get("kind") != "delta":
        ckpt = delta_checkpoint(ckpt)
    return ckpt


def _module_deltas(dckpt: Checkpoint, module: str) -> list[np.ndarray]:
    if module not in PROJECTIONS:
        raise UsageError(f"unknown module {module!r}; valid: {', '.join(PROJECTIONS)}")
    names = sorted((k for k in dckpt.tensors if k.rsplit(".", 1)[-1] == module),
                   key=lambda k: int(k.split(".")[1]))
    if not names:
        raise FormatError(f"no {module} updates in delta file")
    return [dckpt.tensors[k] for k in names]


# -- commands ----------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    log.info("training %s (lr %.3g, digest %s)", cfg.method, cfg.effective_lr, cfg.digest())
    model, res = run_training(cfg, with_eval=args.eval)
    if args.eval:
        log.info("eval loss %.4f -> %.4f", res.initial_eval, res.final_eval)
    save_checkpoint(args.out, to_checkpoint(model, cfg, res.steps))
    if args.loss_log:
        atomic_write_text(args.loss_log, _loss_csv(res.log))
    if args.save_base:
        base = Decoder.init(cfg.model_config(), cfg.base_seed)
        save_checkpoint(args.save_base, to_checkpoint(base))
    return EXIT_OK


def cmd_merge(args) -> int:
    base = load_checkpoint(args.base)
    adapted_ckpt = load_checkpoint(args.adapter)
    adapted = from_checkpoint(adapted_ckpt)
    if adapted.merged or not adapters.site_deltas(adapted):
        raise FormatError("adapter checkpoint has no adapters to merge")
    for name, arr in adapted.state_dict().items():
        if name.endswith((".a", ".b", ".scaling")):
            continue
        other = base.tensors.get(name)
        if other is None or other.shape != arr.shape or other.dtype != arr.dtype:
            raise FormatError(f"base checkpoint incompatible at {name!r}")
    # take the base weights from the base file
    for p in adapted.base_params():
        p.data = base.tensors[p.name].copy()
    merged = adapters.merge(adapted)
    dev = max_logit_deviation(adapted, merged, _probe_tokens(adapted.config))
    save_checkpoint(args.out, to_checkpoint(merged, None, adapted_ckpt.metadata.get("step", 0),
                                            merged_from=adapted_ckpt.metadata.get("config_digest")))
    print(f"max_logit_deviation {dev:.6e}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.what == "delta":
        tuned = load_checkpoint(args.tuned)
        base = load_checkpoint(args.base) if args.base else None
        save_checkpoint(args.out, delta_checkpoint(tuned, base))
        return EXIT_OK
    if args.what == "svd-hist":
        dck = _load_delta(args.delta)
        hist = spectral.sv_histogram(_module_deltas(dck, args.module), agg=args.agg)
        if hist.aggregation == "mean":
            atomic_write_text(args.out, hist.to_csv())
        else:
            root, ext = os.path.splitext(args.out)
            for layer in range(hist.counts.shape[0]):
                atomic_write_text(f"{root}.layer{layer}{ext or '.csv'}", hist.to_csv(layer))
        return EXIT_OK
    if args.what == "subspace-sim":
        da, db = _load_delta(args.a), _load_delta(args.b)
        n_layers = da.metadata["model"]["n_layers"]
        site = _site_name(args.module, args.layer, n_layers)
        if site not in da.tensors or site not in db.tensors:
            raise FormatError(f"site {site!r} missing from a delta file")
        grid = spectral.similarity_grid(da.tensors[site], db.tensors[site], args.max_rank,
                                        side=args.side, labels=(args.a, args.b, site))
        atomic_write_text(args.out, grid.to_csv())
        return EXIT_OK
    if args.what == "pairwise-sim":
        model = from_checkpoint(load_checkpoint(args.adapter))
        site = _site_name(args.module, args.layer, model.config.n_layers)
        ad_ = model.site(site).adapter
        if not isinstance(ad_, adapters.MultiLoraAdapter):
            raise FormatError(f"{site} has no MultiLoRA adapter")
        grids = spectral.pairwise_sublora_grid(ad_, args.max_rank)
        os.makedirs(args.out, exist_ok=True)
        for (i, j), g in grids.items():
            atomic_write_text(os.path.join(args.out, f"{site}.sub{i}_sub{j}.csv"), g.to_csv())
        return EXIT_OK
    raise UsageError(f"unknown analysis {args.what!r}")


def bench_sweep(d_model: int = 64, r: int = 32, n_max: int = 5, throughput_steps: int = 0,
                seed: int = 0) -> list[bench.CostReport]:
    """Cost reports for MultiLoRA n = 1..n_max at rank r, plus LoRA at each R = n*r.

    Instrumented counts and throughput need a real model and are left as None
    when R exceeds the site dimensions.
    """
    reports = []
    d_in = d_out = d_model
    tokens = np.arange(8).reshape(1, 8) % 64
    for n in range(1, n_max + 1):
        for method, rr, nn in (("lora", n * r, 1), ("multilora", r, n)):
            rep = bench.cost_report(method, d_in, d_out, rr, nn)
            if rr <= d_model:
                cfg = RunConfig(d_model=d_model, method=method, r=rr, n=nn, seed=seed,
                                targets=("q_proj",))
                model = build_model(cfg)
                counts = bench.instrumented_activation_count(model, tokens)
                rep.instrumented_activation_values_per_token_per_site = counts["layers.0.q_proj"]
                rep.config_digest = cfg.digest()
                if throughput_steps:
                    spec = MixtureSpec(counts={t: 16 for t in TASKS}, seed=seed)
                    batches = batchify(gen_mixture(spec), cfg.batch)
                    rep.wall_tokens_per_second = bench.measure_throughput(
                        model, batches, steps=throughput_steps, warmup=min(5, throughput_steps))
            reports.append(rep)
    return reports


def cmd_bench(args) -> int:
    reports = bench_sweep(args.d_model, args.r, args.n_max, args.throughput_steps, args.seed)
    meta = {"d_model": args.d_model, "r": args.r, "n_max": args.n_max, "site": "q_proj"}
    atomic_write_text(args.out, bench.report_json(reports, meta))
    return EXIT_OK


def cmd_repro(args) -> int:
    from .repro import run_repro

    run_repro(args.out, steps=args.steps, lr_scale=args.lr_scale, per_task=args.per_task,
              seed=args.seed, max_rank=args.max_rank)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multilora", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train FT / LoRA / MultiLoRA on the synthetic mixture")
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--n", type=int)
    t.add_argument("--r", type=int)
    t.add_argument("--alpha", type=float)
    t.add_argument("--targets", help="comma list of projections")
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-scale", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--steps", type=int, help="fixed step count (0: epochs)")
    t.add_argument("--seed", type=int)
    t.add_argument("--base-seed", type=int)
    t.add_argument("--data-seed", type=int)
    t.add_argument("--per-task", type=int, help="samples per task")
    t.add_argument("--precision", choices=("single", "double"))
    t.add_argument("--config", help="key = value file; flags override it")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--loss-log", help="CSV path for step,loss,lr")
    t.add_argument("--save-base", help="also write the untrained base checkpoint here")
    t.add_argument("--eval", action="store_true", help="report held-out loss before and after")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("merge", help="fold adapters into the base weights")
    m.add_argument("--base", required=True)
    m.add_argument("--adapter", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_merge)

    a = sub.add_parser("analyze", help="weight-update extraction and spectral reports")
    asub = a.add_subparsers(dest="what", required=True)
    d = asub.add_parser("delta", help="write per-site weight updates")
    d.add_argument("--tuned", required=True)
    d.add_argument("--base", help="base checkpoint (needed for full fine-tuning)")
    d.add_argument("--out", required=True)
    h = asub.add_parser("svd-hist", help="-log10(sigma) histogram of one module across layers")
    h.add_argument("--delta", required=True, help="delta file or adapter checkpoint")
    h.add_argument("--module", required=True)
    h.add_argument("--agg", choices=("mean", "per-layer"), default="mean")
    h.add_argument("--out", required=True)
    s = asub.add_parser("subspace-sim", help="similarity grid between two updates")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--module", required=True)
    s.add_argument("--layer", type=int, default=0)
    s.add_argument("--max-rank", type=int, default=30)
    s.add_argument("--side", choices=("left", "right"), default="left")
    s.add_argument("--out", required=True)
    pw = asub.add_parser("pairwise-sim", help="grids between MultiLoRA sub-modules")
    pw.add_argument("--adapter", required=True)
    pw.add_argument("--module", required=True)
    pw.add_argument("--layer", type=int, default=0)
    pw.add_argument("--max-rank", type=int)
    pw.add_argument("--out", required=True, help="output directory")
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("bench", help="cost counters for an n sweep")
    b.add_argument("--d-model", type=int, default=64)
    b.add_argument("--r", type=int, default=32)
    b.add_argument("--n-max", type=int, default=5)
    b.add_argument("--throughput-steps", type=int, default=0, help="0 skips wall-clock timing")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("repro", help="train FT, LoRA and MultiLoRA and write all analyses")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--steps", type=int, default=2000)
    r.add_argument("--lr-scale", type=float, default=100.0)
    r.add_argument("--per-task", type=int, default=2000)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--max-rank", type=int, default=30)
    r.set_defaults(func=cmd_repro)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DegenerateInputError, StateError, ShapeError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
