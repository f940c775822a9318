"""End-to-end acceptance criteria, one test per criterion.

Each test appends a PASS/FAIL line that the terminal summary prints under
"acceptance criteria". Criterion 6 is a long, non-gating stretch run that
only executes when GMIXER_STRETCH is set.
"""

import csv
import json
import os
import time

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE_LINES, random_graph
from gmixer.bench import run_bench
from gmixer.cli import main
from gmixer.gradcheck import model_gradcheck
from gmixer.graphs import load_jsonl, pad_batch, write_jsonl
from gmixer.layers import MixerParams, aggregate_multi, degree_scaler, mixer_block
from gmixer.params import ParamRegistry
from gmixer.synth import generate
from gmixer.tensor import Tensor


def record(number, title, ok, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {number}. {title}: {detail}")
    return ok


def cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """12,000 synthetic molecules, prepared with the default split."""
    root = tmp_path_factory.mktemp("acceptance")
    write_jsonl(root / "mols.jsonl", generate(12000, seed=0))
    code = cli("prep", root / "mols.jsonl", root / "data", "--expect-count", 12000)
    return root, code


def test_1_gradient_fidelity(capsys):
    start = time.perf_counter()
    code = cli("gradcheck")
    out = capsys.readouterr().out
    worst = max(max(model_gradcheck(seed=s).values()) for s in range(1, 5))
    elapsed = time.perf_counter() - start
    reported = float(out.split("max_relative_error=")[1].split()[0])
    ok = code == 0 and max(reported, worst) < 1e-4 and elapsed < 60
    assert record(1, "gradient fidelity", ok,
                  f"max rel err {max(reported, worst):.2e} over 5 graph seeds x 200 probes (< 1e-4), "
                  f"{elapsed:.1f}s (< 60s)")


def test_2_zero_weight_mixer_identity(rng):
    worst = 0.0
    for n, d in ((8, 4), (37, 64), (5, 1)):
        reg = ParamRegistry(rng_seed=n)
        p = MixerParams.create(reg, "m", n, d, 7, 9)
        for q in reg:
            q.set_value(q.data + rng.standard_normal(q.shape))
        for q in p.mlp_params():
            q.set_value(np.zeros(q.shape))
        x = rng.normal(size=(3, n, d)) * 5
        mask = np.ones((3, n), bool)
        mask[0, n // 2:] = False
        out = mixer_block(Tensor(x), mask, p).data
        worst = max(worst, float(np.abs(out - x)[mask].max()))
    assert record(2, "zero-weight mixer identity", worst < 1e-12, f"max abs diff {worst:.1e} (< 1e-12)")


def test_3_aggregation_oracle(rng):
    worst, mismatched_perm = 0.0, 0
    d, n_max = 3, 8
    for _ in range(500):
        g = random_graph(rng, int(rng.integers(1, 9)), p=float(rng.uniform(0.1, 0.9)))
        batch = pad_batch([g], n_max)
        delta = float(rng.uniform(0.3, 2.0))
        msgs = rng.normal(size=(1, n_max, batch.neighbors.shape[2], d))
        per_node = [[list(msgs[0, i, k]) for k in np.flatnonzero(batch.neighbor_mask[0, i])]
                    for i in range(g.num_nodes)]
        out = aggregate_multi(Tensor(msgs), batch.neighbor_mask, batch.degrees, delta, batch.node_mask).data[0]
        worst = max(worst, float(np.abs(out - np.array(oracles.aggregate(per_node, n_max, d, delta))).max()))
        shuffled = msgs.copy()
        for i in range(n_max):
            k = np.flatnonzero(batch.neighbor_mask[0, i])
            shuffled[0, i, k] = msgs[0, i, rng.permutation(k)]
        again = aggregate_multi(Tensor(shuffled), batch.neighbor_mask, batch.degrees, delta, batch.node_mask).data[0]
        mismatched_perm += int(not np.array_equal(again, out))
    ok = worst < 1e-12 and mismatched_perm == 0
    assert record(3, "aggregation oracle equivalence", ok,
                  f"500 graphs, max abs diff {worst:.1e} (< 1e-12), {mismatched_perm} permutation mismatches")


def test_4_scaler_reciprocity(corpus):
    root, code = corpus
    assert code == 0
    side = json.loads((root / "data" / "mols.stats.json").read_text())
    delta = side["delta"]
    worst = max(abs(degree_scaler(d, 1, delta) * degree_scaler(d, -1, delta) - 1) for d in range(1, 65))
    identity = all(degree_scaler(d, 0, delta) == 1.0 for d in range(0, 65))
    ok = worst < 1e-12 and identity
    assert record(4, "scaler reciprocity", ok,
                  f"delta={delta:.6f} from prepared data, max |S+ * S- - 1| = {worst:.1e}, identity exact={identity}")


def test_5_overfit_capacity(corpus, tmp_path, capsys):
    root, _ = corpus
    subset = load_jsonl(root / "mols.jsonl")[:128]
    write_jsonl(tmp_path / "subset.jsonl", subset)
    assert cli("prep", tmp_path / "subset.jsonl", tmp_path / "data", "--fractions", "1,0,0") == 0
    start = time.perf_counter()
    code = cli("train", tmp_path / "data", tmp_path / "run")
    elapsed = time.perf_counter() - start
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    capsys.readouterr()
    assert cli("eval", tmp_path / "run" / "best.ckpt", tmp_path / "data" / "train.jsonl") == 0
    eval_mae = float(capsys.readouterr().out.strip().split("=")[1])
    ok = code == 0 and summary["train_mae"] < 0.15 and eval_mae < 0.15 and summary["epochs_run"] <= 500 \
        and elapsed < 600
    assert record(5, "overfit capacity", ok,
                  f"train MAE {summary['train_mae']:.4f} (eval {eval_mae:.4f}, < 0.15) after "
                  f"{summary['epochs_run']} epochs, {elapsed:.0f}s (< 600s)")


@pytest.mark.skipif(not os.environ.get("GMIXER_STRETCH"), reason="stretch run; set GMIXER_STRETCH=1")
def test_6_full_subset_stretch(corpus, tmp_path, capsys):
    root, _ = corpus
    code = cli("train", root / "data", tmp_path / "run")
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    test_mae = summary["best_test_mae"]
    ACCEPTANCE_LINES.append(f"[INFO] 6. stretch (non-gating): exit {code}, best test MAE {test_mae:.4f} "
                            f"(baseline to beat: 0.367) after {summary['epochs_run']} epochs")


def test_6_recorded_when_skipped():
    if os.environ.get("GMIXER_STRETCH"):
        pytest.skip("stretch run active")
    ACCEPTANCE_LINES.append("[SKIP] 6. 12k stretch run (non-gating): set GMIXER_STRETCH=1 to run (~2h)")


def test_7_complexity_claim():
    start = time.perf_counter()
    r = run_bench()
    elapsed = time.perf_counter() - start
    ok = (r.mixer_exponent <= 1.3 and r.attention_exponent >= 1.7 and r.mixer_r_squared >= 0.98
          and r.attention_r_squared >= 0.98 and elapsed < 300)
    assert record(7, "complexity claim", ok,
                  f"mixer exponent {r.mixer_exponent:.3f} (r2 {r.mixer_r_squared:.3f}), attention "
                  f"{r.attention_exponent:.3f} (r2 {r.attention_r_squared:.3f}), {elapsed:.0f}s")


def _csv_without_timing(path):
    with open(path) as fh:
        return [{k: v for k, v in row.items() if k != "wall_seconds"} for row in csv.DictReader(fh)]


def test_8_determinism(corpus, tmp_path):
    root, _ = corpus
    write_jsonl(tmp_path / "subset.jsonl", load_jsonl(root / "mols.jsonl")[:128])
    for tag in ("a", "b"):
        assert cli("prep", tmp_path / "subset.jsonl", tmp_path / f"data_{tag}", "--seed", 3) == 0
        assert cli("train", tmp_path / f"data_{tag}", tmp_path / f"run_{tag}", "--max-epochs", 3, "--seed", 5) == 0
    same_csv = _csv_without_timing(tmp_path / "run_a" / "metrics.csv") == \
        _csv_without_timing(tmp_path / "run_b" / "metrics.csv")
    same_ckpt = (tmp_path / "run_a" / "best.ckpt").read_bytes() == (tmp_path / "run_b" / "best.ckpt").read_bytes()
    assert record(8, "determinism", same_csv and same_ckpt,
                  f"metrics CSV identical={same_csv}, best checkpoint bit-identical={same_ckpt}")


def test_9_data_protocol(corpus, tmp_path):
    root, code = corpus
    side = json.loads((root / "data" / "mols.stats.json").read_text())
    sizes = [g.num_nodes for name in ("train", "val", "test") for g in load_jsonl(root / "data" / f"{name}.jsonl")]
    lines = (root / "mols.jsonl").read_text().splitlines()
    rejected = []
    for n in (8, 38):
        bad = generate(1, seed=n, n_min=n, n_max=n)[0]
        (tmp_path / f"bad{n}.jsonl").write_text("\n".join(lines[:50] + [bad.to_json()]) + "\n")
        rejected.append(cli("prep", tmp_path / f"bad{n}.jsonl", tmp_path / f"out{n}") == 2
                        and not (tmp_path / f"out{n}").exists())
    (tmp_path / "short.jsonl").write_text("\n".join(lines[:11999]) + "\n")
    rejected.append(cli("prep", tmp_path / "short.jsonl", tmp_path / "short", "--expect-count", 12000) == 2)
    ok = (code == 0 and len(sizes) == 12000 and side["count"] == 12000 and min(sizes) >= 9 and max(sizes) <= 37
          and all(rejected))
    assert record(9, "data protocol", ok,
                  f"{len(sizes)} molecules, atoms in [{min(sizes)}, {max(sizes)}] (within [9, 37]); "
                  f"8-atom, 38-atom and wrong-count inputs rejected={all(rejected)}")
