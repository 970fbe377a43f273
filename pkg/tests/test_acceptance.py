"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest -v tests/test_acceptance.py``; the verdict lines
appear in the "acceptance criteria" section of the terminal summary.
"""

from __future__ import annotations

import csv
import json
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from inceptseg import data, gradcheck, metrics
from inceptseg.checkpoint import load_checkpoint
from inceptseg.cli import SYNTHETIC_TRAIN, main
from inceptseg.network import Conv, InceptionBlock, NetworkSpec, build_model, count_parameters
from inceptseg.tensor import Kernel4, conv2d
from inceptseg.training import TrainConfig, evaluate, train, validation_pass


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. gradients
# ---------------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    ops = gradcheck.run_op_suite(gradcheck.OP_TOLERANCE)
    worst_op = max(ops, key=lambda r: r.worst)
    graphs = {d: gradcheck.check_graph(gradcheck.tiny_spec("inceptnet", d), per_param=2) for d in (1, 3)}
    elapsed = time.perf_counter() - start
    ok = (all(r.passed for r in ops) and all(g.passed and g.skipped_fraction < 0.1 for g in graphs.values())
          and elapsed < 120)
    graph_txt = ", ".join(f"d={d} {g.worst:.1e} ({g.checked} probes, {g.kink_skipped} kink-skipped)"
                          for d, g in graphs.items())
    verdict(1, "finite-difference gradients", ok,
            f"{len(ops)} ops worst {worst_op.worst:.1e} ({worst_op.name}) < 1e-4; "
            f"tiny inceptnet graph {graph_txt} < 1e-3; {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 2. parameter audit
# ---------------------------------------------------------------------------

PUBLISHED = {("bcdu", 1): 8_205_573, ("bcdu", 3): 20_659_717,
             ("inceptnet", 1): 7_829_872, ("inceptnet", 3): 18_453_190}


def test_criterion_2_parameter_audit():
    start = time.perf_counter()
    parts, ok = [], True
    for (variant, d), expected in PUBLISHED.items():
        total, rows = count_parameters(build_model(NetworkSpec(variant=variant, d=d)))
        exact = all(r.count == r.closed_form for r in rows)
        gap = (total - expected) / expected
        ok &= exact and abs(gap) <= 0.05
        parts.append(f"{variant} d={d} {total:,} vs {expected:,} ({gap:+.2%}{'' if exact else ', layer mismatch'})")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 10
    verdict(2, "parameter audit within 5%", ok, "; ".join(parts) + f"; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. overfit
# ---------------------------------------------------------------------------


def test_criterion_3_overfit(tmp_path):
    start = time.perf_counter()
    code = main(["--out", str(tmp_path), "train", "--synthetic", "small", "--size", "64", "--count", "16",
                 "--max-epochs", "200"])
    elapsed = time.perf_counter() - start
    with open(tmp_path / "epochs.csv") as fh:
        rows = list(csv.DictReader(fh))
    hit = next((r for r in rows if float(r["train_acc"]) >= 0.99 and float(r["train_loss"]) < 0.05), None)
    last = rows[-1]
    ok = code == 0 and hit is not None and elapsed < 15 * 60
    where = (f"reached at epoch {hit['epoch']} (acc {float(hit['train_acc']):.4f}, loss {float(hit['train_loss']):.4f})"
             if hit else f"not reached; last epoch {last['epoch']} acc {float(last['train_acc']):.4f} "
                         f"loss {float(last['train_loss']):.4f}")
    verdict(3, "overfit 16 synthetic images", ok, f"{where}; {len(rows)} epochs in {elapsed / 60:.1f} min")


# ---------------------------------------------------------------------------
# 4. metric oracles
# ---------------------------------------------------------------------------


def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(2024)
    auc_err = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 200))
        y = rng.random(n) < rng.uniform(0.1, 0.9)
        y[:2] = True, False
        levels = int(rng.integers(2, 50))
        s = rng.integers(0, levels, n) / levels if rng.random() < 0.5 else rng.random(n)
        auc_err = max(auc_err, abs(metrics.roc_auc(s, y).auc - metrics.pairwise_auc(s, y)))
    jac_err = 0.0
    for _ in range(1000):
        shape = tuple(rng.integers(1, 16, 2))
        a, b = rng.random(shape) < rng.random(), rng.random(shape) < rng.random()
        j, degenerate = metrics.jaccard(a, b)
        f1 = metrics.scalar_metrics(metrics.confusion(a, b))[0]["f1"]
        jac_err = max(jac_err, 0.0 if degenerate else abs(j - f1 / (2 - f1)))
    vals, _ = metrics.scalar_metrics(metrics.ConfusionCounts(tp=2, fp=1, tn=5, fn=2))
    hand = {"accuracy": 0.7, "sensitivity": 0.5, "specificity": 0.8333, "f1": 0.5714}
    hand_ok = all(abs(vals[k] - v) < 5e-5 for k, v in hand.items())
    ok = auc_err < 1e-9 and jac_err < 1e-12 and hand_ok
    verdict(4, "metric oracles", ok,
            f"max |AUC trapezoid - pairwise| {auc_err:.1e}; max |J - F1/(2-F1)| {jac_err:.1e}; hand case "
            + " ".join(f"{k[:4]}={vals[k]:.4f}" for k in hand))


# ---------------------------------------------------------------------------
# 5. early stopping
# ---------------------------------------------------------------------------


def _tiny_sets(seed: int):
    pairs = data.generate_synthetic(6, 16, "large", seed=seed)
    return data.stack(pairs[:4]), data.stack(pairs[4:])


def test_criterion_5_early_stopping(tmp_path):
    spec = NetworkSpec(variant="bcdu", base_filters=(4, 8, 16, 32), input_shape=(16, 16, 1))
    train_set, val_set = _tiny_sets(0)
    _, flat = train(build_model(spec), train_set, None, TrainConfig(max_epochs=50, patience=10),
                    tmp_path / "flat", validator=lambda m, e: (0.7, 0.5))
    _, falling = train(build_model(spec), train_set, None, TrainConfig(max_epochs=25, patience=10),
                       tmp_path / "falling", validator=lambda m, e: (1.0 - 0.01 * e, 0.5))
    ckpt, logs = train(build_model(spec), train_set, val_set,
                       TrainConfig(max_epochs=12, patience=3, batch_size=2, learning_rate=1e-3), tmp_path / "real")
    reloaded, _ = validation_pass(load_checkpoint(ckpt), val_set, 2)
    best = min(e.val_loss for e in logs)
    ok = len(flat) == 11 and len(falling) == 25 and abs(reloaded - best) <= 1e-12
    verdict(5, "early stopping", ok,
            f"flat loss stopped at epoch {len(flat)} (patience 10); improving loss ran {len(falling)}/25 epochs; "
            f"checkpoint val loss {reloaded:.6f} vs log minimum {best:.6f}")


# ---------------------------------------------------------------------------
# 6. determinism
# ---------------------------------------------------------------------------


def test_criterion_6_determinism(tmp_path):
    argv = ["train", "--synthetic", "small", "--size", "32", "--count", "6", "--val-count", "2",
            "--max-epochs", "3", "--batch-size", "4", "--seed", "11"]
    codes = [main(["--out", str(tmp_path / run), *argv]) for run in ("a", "b")]
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("epochs.csv", "best.ckpt")}
    snapshots = [json.loads((tmp_path / run / "config.json").read_text()) for run in ("a", "b")]
    for snap in snapshots:
        snap.pop("output_dir")  # the only field that must differ
    same["config.json (less output_dir)"] = snapshots[0] == snapshots[1]
    ok = codes == [0, 0] and all(same.values())
    verdict(6, "determinism", ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))


# ---------------------------------------------------------------------------
# 7. receptive field
# ---------------------------------------------------------------------------


def _influence(run, rng, size=15):
    x = rng.standard_normal((1, size, size, 2))
    x2 = x.copy()
    x2[0, size // 2, size // 2, :] += rng.uniform(0.5, 2.0)
    return np.argwhere(np.abs(run(x2) - run(x)).max(axis=3)[0] > 0)


def test_criterion_7_receptive_field():
    rng = np.random.default_rng(7)
    c = 7  # centre of a 15x15 probe
    exact, confined = {2: 0, 3: 0}, {2: 0, 3: 0}
    for _ in range(100):
        for depth in (2, 3):
            half = depth
            # plain linear stack: influence must fill the (2*depth+1)^2 window exactly
            kernels = [Kernel4(rng.standard_normal((3, 3, 2, 2)), rng.standard_normal(2)) for _ in range(depth)]

            def linear(x, ks=kernels):
                for k in ks:
                    x = conv2d(x, k)
                return x

            hit = _influence(linear, rng)
            exact[depth] += (hit.min(0) == c - half).all() and (hit.max(0) == c + half).all()
            # the matching inception branch (ReLU after every conv) may only shrink it
            block = InceptionBlock("probe", 2, 8, (0.25, 0.5, 1.0))
            for layer in block.branches[depth].layers:
                assert isinstance(layer, Conv)
                layer.kernel.value[...] = rng.standard_normal(layer.kernel.value.shape)
                layer.bias.value[...] = rng.uniform(0.5, 1.0, layer.bias.value.shape)
            branch = block.branches[depth]
            hit = _influence(lambda x: branch.forward(x, False), rng)
            confined[depth] += len(hit) == 0 or ((hit.min(0) >= c - half).all() and (hit.max(0) <= c + half).all())
    ok = exact == {2: 100, 3: 100} and confined == {2: 100, 3: 100}
    verdict(7, "stacked 3x3 receptive field", ok,
            f"two convs: 5x5 exactly in {exact[2]}/100, inception branch confined in {confined[2]}/100; "
            f"three convs: 7x7 exactly in {exact[3]}/100, inception branch confined in {confined[3]}/100")


# ---------------------------------------------------------------------------
# 8. diagnostic trend (reported, never fails)
# ---------------------------------------------------------------------------


def test_criterion_8_small_structure_trend(tmp_path):
    train_set = data.stack(data.generate_synthetic(16, 64, "small", seed=0))
    val_set = data.stack(data.generate_synthetic(4, 64, "small", seed=1))
    test_set = data.stack(data.generate_synthetic(8, 64, "small", seed=2))
    cfg = TrainConfig(max_epochs=30, patience=30, **SYNTHETIC_TRAIN)
    f1 = {}
    for variant in ("inceptnet", "bcdu"):
        spec = NetworkSpec(variant=variant, d=1, base_filters=(8, 16, 32, 64), input_shape=(64, 64, 1))
        ckpt, _ = train(build_model(spec), train_set, val_set, cfg, tmp_path / variant)
        f1[variant] = evaluate(load_checkpoint(ckpt), test_set).f1
    line = (f"[INFO] criterion 8 (diagnostic, not gating): held-out F1 after 30 epochs -- "
            f"inceptnet d=1 {f1['inceptnet']:.4f}, bcdu d=1 {f1['bcdu']:.4f} "
            f"({'inceptnet >= bcdu' if f1['inceptnet'] >= f1['bcdu'] else 'inceptnet < bcdu'})")
    ACCEPTANCE_LINES.append(line)
    print(line)


if __name__ == "__main__":
    raise SystemExit(pytest.main(["-v", "-s", __file__]))
