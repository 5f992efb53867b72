#!/usr/bin/env python3
"""Smoke test for the sparsekit_py extension module.

Stages the compiled cdylib next to this script and exercises the exposed
surface end to end: schedules, allocation, hard-concrete gates, the KL
approximation, configs, a real (tiny, synthetic-data) training run with
saved artifacts, checkpoint inspection, FLOP counting, Pareto frontiers,
and the gradient-check battery.

Build the extension first:

    cargo build --release -p sparsekit-py

then run:

    python3 python/smoke_test.py
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def stage_extension() -> None:
    """Copy the built cdylib to an importable name and path."""
    build_dir = REPO / "python" / "_build"
    build_dir.mkdir(exist_ok=True)
    staged = build_dir / "sparsekit_py.so"
    candidates = [
        REPO / "target" / "release" / "libsparsekit_py.so",
        REPO / "target" / "debug" / "libsparsekit_py.so",
    ]
    built = [c for c in candidates if c.exists()]
    if not built:
        sys.exit("no libsparsekit_py.so found; run `cargo build --release -p sparsekit-py` first")
    newest = max(built, key=lambda c: c.stat().st_mtime)
    if not staged.exists() or staged.stat().st_mtime < newest.stat().st_mtime:
        shutil.copy2(newest, staged)
    sys.path.insert(0, str(build_dir))


stage_extension()

import sparsekit_py as sk  # noqa: E402

checks = 0


def ok(cond: bool, label: str) -> None:
    global checks
    if not cond:
        sys.exit(f"FAIL: {label}")
    checks += 1
    print(f"  ok: {label}")


print(f"sparsekit_py {sk.__version__}")

# --- pruning schedule -------------------------------------------------------
print("pruning schedule")
sched = sk.PruningSchedule(0, 100, 10, 0.0, 0.8)
ok(sched.sparsity_at(0) == 0.0, "schedule starts at the initial sparsity")
ok(sched.sparsity_at(100) == 0.8, "schedule ends at the final sparsity")
ok(abs(sched.sparsity_at(50) - 0.7) < 1e-12, "cubic midpoint covers 7/8 of the gap")
ok(sched.events() == list(range(0, 101, 10)), "events fire every `frequency` steps")
ok(sched.is_event(50) and not sched.is_event(55), "is_event matches the event list")

# --- layer allocation -------------------------------------------------------
print("layer allocation")
targets = sk.allocate_layer_targets(0.45, [100, 100], [(0, 0.0)])
ok(targets == [0.0, 0.9], "keep-dense override doubles the other layer's share")
sizes = [235200, 30000, 1000]
targets = sk.allocate_layer_targets(0.9, sizes, [(2, 0.8)])
uniform = (0.9 * 266200 - 0.8 * 1000) / 265200
ok(abs(targets[0] - uniform) < 1e-12 and targets[2] == 0.8, "capped last layer rebalances the rest")
kept = sum(n * (1 - t) for n, t in zip(sizes, targets))
ok(abs(kept - 0.1 * 266200) < 1.0, "allocation conserves the global weight budget")

# --- hard-concrete gates ----------------------------------------------------
print("hard-concrete gates")
hc = sk.HardConcrete([2.197])
ok(abs(hc.prob_zero(2.197) - 0.0219757079604025) < 1e-13, "P(z=0) matches the closed form")
ok(abs(hc.prob_one(2.197) - 0.6452908875317493) < 1e-13, "P(z=1) matches the closed form")
ok(abs(hc.expected_l0() - 0.9780242920395975) < 1e-13, "expected L0 = 1 - P(z=0)")
draws = hc.sample(seed=42)
ok(len(draws) == 1 and 0.0 <= draws[0] <= 1.0, "samples are clipped to [0, 1]")
hc9 = sk.HardConcrete.from_dropout_rate(4, 0.1)
gates = hc9.test_gates()
ok(len(hc9) == 4 and all(abs(g - 0.98) < 1e-12 for g in gates), "dropout-rate init sets the test gate")

# --- KL approximation -------------------------------------------------------
print("variational-dropout KL")
ok(abs(sk.kl_per_weight(0.0) - 0.4312) < 1e-4, "KL at alpha=1 matches the frozen constant")
ok(sk.kl_per_weight(-10.0) > sk.kl_per_weight(10.0), "KL decreases as log-alpha grows")
ok(abs(sk.kl_per_weight(40.0)) < 1e-6, "KL vanishes for fully noisy weights")

# --- architectures and FLOPs ------------------------------------------------
print("architectures and FLOPs")
info = sk.weight_info("lenet300")
ok([n for n, _ in info] == ["layer0", "layer1", "layer2"], "lenet300 has three weight layers")
ok(info[0][1] == [784, 300], "first layer is 784x300")
ok(sk.dense_flops("lenet300") == 532400.0, "dense lenet300 evaluation FLOPs")
ok(sk.dense_flops("lenet5") == 4586000.0, "dense lenet5 evaluation FLOPs")
halves = [0.5 * d[0] * d[1] for _, d in ((n, dims) for n, dims in info)]
dense = [d[0] * d[1] for _, d in info]
ratio = sk.count_flops("lenet300", halves) / sk.count_flops("lenet300", dense)
ok(abs(ratio - 0.5) < 1e-6, "FLOPs are linear in effective weights")

# --- configs ----------------------------------------------------------------
print("configs")
cfg = sk.Config()
ok(cfg.get("model") == "lenet300", "defaults resolve")
cfg.set("method", "magnitude")
cfg.set("seed", "0,1")
grid = cfg.expand()
ok(len(grid) == 2 and grid[1].get("seed") == "1", "comma lists expand to a grid")
ok(grid[0].hash_hex() != grid[1].hash_hex(), "expanded configs hash distinctly")
ok(len(cfg.hash_hex()) == 16, "config hash renders as 16 hex digits")
try:
    cfg.set("no.such.key", "1")
    sys.exit("FAIL: unknown config key accepted")
except ValueError:
    ok(True, "unknown config keys are rejected")
ok("run.steps" in sk.Config.defaults(), "documented defaults list the schema")

# --- a real training run ----------------------------------------------------
print("training run (synthetic data, magnitude pruning)")
with tempfile.TemporaryDirectory() as tmp:
    out_dir = Path(tmp) / "run"
    result = sk.run(
        overrides=[
            "method=magnitude",
            "run.steps=60",
            "run.batch_size=32",
            "data.synthetic_n=128",
            "data.synthetic_classes=4",
            "prune.final_sparsity=0.5",
            "prune.start_step=10",
            "prune.end_step=40",
            "prune.frequency=10",
            "seed=7",
        ],
        out_dir=out_dir,
    )
    ok(result["failure"] is None, "run completes without divergence")
    ok(result["steps"] == 60, "run executes the configured steps")
    ok(abs(result["sparsity"] - 0.5) < 0.01, "run reaches the pruning target")
    ok(result["accuracy"] > 0.5, "run beats chance on held-out data")
    ok(len(result["per_layer_sparsity"]) == 3, "per-layer sparsity covers every layer")

    # artifacts round-trip through the reporting surface
    ck = sk.Checkpoint.load(out_dir / "checkpoint.sprs")
    dims, data = ck.tensor("layer0.w")
    ok(dims == [784, 300] and len(data) == 784 * 300, "checkpoint tensors keep their shape")
    mask = ck.mask("layer0.mask")
    frac = 1.0 - sum(mask) / len(mask)
    ok(abs(frac - result["per_layer_sparsity"][0][1]) < 1e-12, "checkpoint masks match the run")
    dist = ck.distribution_csv()
    ok(dist.splitlines()[0] == "layer,size,nonzeros,sparsity", "distribution CSV has the layer header")
    ok(dist.strip().splitlines()[-1].startswith("(global),266200,"), "distribution CSV totals the layers")
    flops = ck.flops_csv("lenet300")
    ok("(total)" in flops, "FLOPs CSV totals the layers")

    frontier = sk.frontier_csv(out_dir / "sweep.csv")
    lines = frontier.strip().splitlines()
    ok(lines[0] == "test_sparsity,test_accuracy", "frontier CSV has the expected columns")
    ok(lines[-1].startswith("0.5,"), "sweep row survives to the Pareto frontier")

# --- gradient battery -------------------------------------------------------
print("gradient battery")
passed, report = sk.gradcheck()
ok(passed, "finite-difference battery passes")
ok("hard-concrete" in report, "battery covers the gated layers")

print(f"\nall {checks} smoke checks passed")
