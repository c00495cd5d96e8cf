import csv
import json

import jsonschema
import numpy as np
import pytest

from multilora import bench
from multilora.cli import main
from multilora.store import load_checkpoint

QUICK = ["--steps", "6", "--per-task", "8", "--batch", "4"]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    d = tmp_path_factory.mktemp("runs")
    assert main(["train", "--method", "multilora", "--n", "3", "--r", "4", "--seed", "7", "--lr", "0.01",
                 "--out", str(d / "multi.mlra"), "--loss-log", str(d / "loss.csv"),
                 "--save-base", str(d / "base.mlra")] + QUICK) == 0
    assert main(["train", "--method", "lora", "--r", "8", "--lr", "0.01", "--out", str(d / "lora.mlra")] + QUICK) == 0
    assert main(["train", "--method", "ft", "--lr", "0.001", "--out", str(d / "ft.mlra")] + QUICK) == 0
    return d


def test_train_outputs(runs):
    rows = list(csv.reader(open(runs / "loss.csv")))
    assert rows[0] == ["step", "loss", "lr"] and len(rows) == 7
    # round(0.05 * 6) = 0 warmup steps, so the decay starts at the base rate
    lrs = [float(r[2]) for r in rows[1:]]
    assert lrs[0] == 0.01 and lrs == sorted(lrs, reverse=True)
    ck = load_checkpoint(runs / "multi.mlra")
    assert ck.metadata["method"] == "multilora" and ck.metadata["seed"] == 7
    assert "layers.0.q_proj.multilora.2.scaling" in ck.tensors
    assert "layers.0.q_proj.weight" in ck.tensors


def test_train_repeatable(runs, tmp_path):
    main(["train", "--method", "multilora", "--n", "3", "--r", "4", "--seed", "7", "--lr", "0.01",
          "--out", str(tmp_path / "again.mlra")] + QUICK)
    assert (tmp_path / "again.mlra").read_bytes() == (runs / "multi.mlra").read_bytes()


def test_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# quick\nmethod = lora\nr = 2\nsteps = 2\ntask_counts = copy:4,arith:4\nbatch = 2\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "c.mlra")]) == 0
    meta = load_checkpoint(tmp_path / "c.mlra").metadata
    assert meta["config"]["r"] == 2 and meta["config"]["task_counts"] == {"copy": 4, "arith": 4}
    assert main(["train", "--config", str(cfg), "--r", "3", "--out", str(tmp_path / "d.mlra")]) == 0
    assert load_checkpoint(tmp_path / "d.mlra").metadata["config"]["r"] == 3


@pytest.mark.parametrize("argv", [["train", "--method", "bogus", "--out", "x"],
                                  ["train", "--targets", "w_proj", "--out", "x"],
                                  ["train", "--r", "0", "--out", "x"],
                                  ["analyze"], []])
def test_usage_errors(argv, tmp_path, capsys):
    with_out = [a if a != "x" else str(tmp_path / "x") for a in argv]
    try:
        code = main(with_out)
    except SystemExit as exc:
        code = exc.code
    assert code == 2


def test_merge(runs, tmp_path, capsys):
    assert main(["merge", "--base", str(runs / "base.mlra"), "--adapter", str(runs / "lora.mlra"),
                 "--out", str(tmp_path / "m.mlra")]) == 0
    dev = float(capsys.readouterr().out.split()[-1])
    assert dev < 1e-10
    merged = load_checkpoint(tmp_path / "m.mlra")
    assert merged.metadata["merged"] is True
    assert not any(".lora." in k for k in merged.tensors)


def test_merge_fresh_adapter_is_base(tmp_path):
    main(["train", "--method", "multilora", "--n", "2", "--r", "2", "--steps", "0", "--epochs", "1",
          "--per-task", "1", "--lr", "0", "--out", str(tmp_path / "fresh.mlra"), "--save-base",
          str(tmp_path / "base.mlra")])
    assert main(["merge", "--base", str(tmp_path / "base.mlra"), "--adapter", str(tmp_path / "fresh.mlra"),
                 "--out", str(tmp_path / "m.mlra")]) == 0
    base, merged = load_checkpoint(tmp_path / "base.mlra"), load_checkpoint(tmp_path / "m.mlra")
    for k, v in base.tensors.items():
        assert merged.tensors[k].tobytes() == v.tobytes()


def test_merge_rejections(runs, tmp_path):
    out = str(tmp_path / "m.mlra")
    assert main(["merge", "--base", str(runs / "base.mlra"), "--adapter", str(runs / "ft.mlra"), "--out", out]) == 3
    assert main(["merge", "--base", str(runs / "multi.mlra"), "--adapter", str(runs / "lora.mlra"),
                 "--out", out]) == 0
    (tmp_path / "junk.mlra").write_bytes(b"MLRA" + bytes(20))
    assert main(["merge", "--base", str(tmp_path / "junk.mlra"), "--adapter", str(runs / "lora.mlra"),
                 "--out", out]) == 3
    assert main(["merge", "--base", str(tmp_path / "missing"), "--adapter", str(runs / "lora.mlra"),
                 "--out", out]) == 3
    small = tmp_path / "small.mlra"
    main(["train", "--method", "ft", "--steps", "1", "--per-task", "2", "--out", str(small),
          "--config", str(_write(tmp_path / "s.cfg", "d_model = 32\nd_mid = 48\n"))])
    assert main(["merge", "--base", str(small), "--adapter", str(runs / "lora.mlra"), "--out", out]) == 3


def _write(path, text):
    path.write_text(text)
    return path


def test_analyze_pipeline(runs, tmp_path):
    t = tmp_path
    assert main(["analyze", "delta", "--tuned", str(runs / "ft.mlra"), "--base", str(runs / "base.mlra"),
                 "--out", str(t / "ft.delta")]) == 0
    assert main(["analyze", "delta", "--tuned", str(runs / "lora.mlra"), "--out", str(t / "lora.delta")]) == 0
    assert main(["analyze", "delta", "--tuned", str(runs / "ft.mlra"), "--out", str(t / "x")]) == 3

    assert main(["analyze", "subspace-sim", "--a", str(t / "ft.delta"), "--b", str(t / "ft.delta"),
                 "--module", "q_proj", "--out", str(t / "self.csv")]) == 0
    rows = list(csv.DictReader(open(t / "self.csv")))
    assert len(rows) == 900
    assert all(abs(float(r["phi"]) - 1.0) < 1e-9 for r in rows if r["i"] == r["j"])

    assert main(["analyze", "subspace-sim", "--a", str(t / "lora.delta"), "--b", str(t / "ft.delta"),
                 "--module", "down_proj", "--layer", "1", "--max-rank", "5", "--out", str(t / "x.csv")]) == 0
    assert len(list(csv.DictReader(open(t / "x.csv")))) == 25

    assert main(["analyze", "svd-hist", "--delta", str(t / "lora.delta"), "--module", "q_proj",
                 "--agg", "per-layer", "--out", str(t / "h.csv")]) == 0
    for layer in (0, 1):
        lines = (t / f"h.layer{layer}.csv").read_text().splitlines()
        assert lines[0] == "bin_lo,bin_hi,count" and lines[-1].startswith("zero_count,,")
        assert int(lines[-1].split(",")[2]) >= 64 - 8
    assert main(["analyze", "svd-hist", "--delta", str(runs / "lora.mlra"), "--module", "q_proj",
                 "--out", str(t / "m.csv")]) == 0
    assert float((t / "m.csv").read_text().splitlines()[-1].split(",")[2]) >= 56


def test_analyze_bad_module(runs, tmp_path, capsys):
    code = main(["analyze", "svd-hist", "--delta", str(runs / "lora.mlra"), "--module", "attn",
                 "--out", str(tmp_path / "h.csv")])
    assert code == 2
    err = capsys.readouterr().err
    for proj in ("q_proj", "k_proj", "v_proj", "o_proj", "up_proj", "down_proj", "gate_proj"):
        assert proj in err


def test_pairwise(runs, tmp_path):
    assert main(["analyze", "pairwise-sim", "--adapter", str(runs / "multi.mlra"), "--module", "v_proj",
                 "--out", str(tmp_path / "pw")]) == 0
    files = sorted(p.name for p in (tmp_path / "pw").iterdir())
    assert len(files) == 9 and files[0] == "layers.0.v_proj.sub0_sub0.csv"
    assert main(["analyze", "pairwise-sim", "--adapter", str(runs / "lora.mlra"), "--module", "v_proj",
                 "--out", str(tmp_path / "pw2")]) == 3
    fresh = tmp_path / "fresh.mlra"
    main(["train", "--method", "multilora", "--n", "2", "--r", "2", "--steps", "0", "--epochs", "1",
          "--per-task", "1", "--lr", "0", "--out", str(fresh)])
    assert main(["analyze", "pairwise-sim", "--adapter", str(fresh), "--module", "v_proj",
                 "--out", str(tmp_path / "pw3")]) == 3


def test_bench(tmp_path):
    out = tmp_path / "b.json"
    assert main(["bench", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    jsonschema.validate(doc, bench.REPORT_SCHEMA)
    multi = [r for r in doc["reports"] if r["method"] == "multilora"]
    lora = [r for r in doc["reports"] if r["method"] == "lora"]
    assert [r["n"] for r in multi] == [1, 2, 3, 4, 5]
    acts = [r["cached_activation_values_per_token_per_site"] for r in multi]
    assert len(set(np.diff(acts))) == 1
    assert all(r["instrumented_activation_values_per_token_per_site"] == r["cached_activation_values_per_token_per_site"]
               for r in multi)
    for m, l in zip(multi, lora):
        assert m["total_rank"] == l["total_rank"]
        assert m["matmul_flops_per_token_per_site"] == l["matmul_flops_per_token_per_site"]
    assert [r["instrumented_activation_values_per_token_per_site"] is None for r in lora] == [False, False, True,
                                                                                              True, True]
