"""Acceptance gate: one PASS/FAIL line per criterion, printed in the terminal summary.

Run alone with ``pytest tests/test_acceptance.py -v``. The ablation runs make
this module take several minutes.
"""
import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from cspnpp import io as rio
from cspnpp.affinity import effective_kernel, normalize, valid_neighbors
from cspnpp.cli import main
from cspnpp.context import run_ca_cspn
from cspnpp.cost import (OpCounter, expected_cost, per_pixel_selected_cost, selected_cost)
from cspnpp.fitbench import SceneSpec, fit, make_scene, sample_sparse
from cspnpp.gradients import gradcheck_instance
from cspnpp.grid import AssemblyWeights, ObjectiveConfig, PropagationConfig, SparseObservations
from cspnpp.propagation import cspn_step, run_cspn
from cspnpp.resource import (SelectionMap, budget_round, run_ra_cspn_naive,
                             run_ra_cspn_scheduled, select_configuration)

CFG = PropagationConfig()
EPOCHS = 500


def report(n, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_criterion_1_normalization():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    # 1e5 independent per-pixel raw windows laid out as one 250 x 400 field
    raw = rng.normal(size=(250, 400, CFG.n_neighbors))
    worst = 0.0
    for k in CFG.kernel_sizes:
        kern = normalize(raw, k, CFG)
        inner = valid_neighbors(250, 400, k).all(-1)
        s = np.abs(kern.weights).sum(-1)
        worst = max(worst, np.abs(s[inner] - 1).max(),
                    np.abs(kern.center - (1 - kern.weights.sum(-1))).max())
    w = AssemblyWeights(rng.normal(size=(250, 400, 3)), rng.normal(size=(250, 400, 3, 4)))
    worst = max(worst, np.abs(w.alpha().sum(-1) - 1).max(), np.abs(w.lam().sum(-1) - 1).max())
    took = time.perf_counter() - start
    report(1, worst <= 1e-12 and took < 10, f"max deviation {worst:.2e}, {took:.1f} s")


def test_criterion_2_stability():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    expand, escape = 0, 0
    for _ in range(1000):
        raw = rng.normal(size=(6, 6, 48))
        k = int(rng.choice(CFG.kernel_sizes))
        kern = normalize(raw, k)
        h0, a, b = rng.normal(size=(3, 6, 6)) * 1000
        gap = np.abs(cspn_step(a, h0, kern) - cspn_step(b, h0, kern)).max()
        expand += gap > np.abs(a - b).max() * (1 + 1e-12)
    for _ in range(1000):
        raw = np.abs(rng.normal(size=(6, 6, 48)))
        kern = normalize(raw, int(rng.choice(CFG.kernel_sizes)))
        h0, ht = rng.uniform(1000, 9000, size=(2, 6, 6))
        out = cspn_step(ht, h0, kern)
        lo, hi = min(h0.min(), ht.min()), max(h0.max(), ht.max())
        escape += out.min() < lo - 1e-9 or out.max() > hi + 1e-9
    took = time.perf_counter() - start
    report(2, expand == 0 and escape == 0 and took < 10,
           f"{expand} expansions in 1000 pairs, {escape} range escapes in 1000 trials, "
           f"{took:.1f} s")


def test_criterion_3_assembly_equivalence():
    # values in metres: an absolute 1e-12 is below one ulp of millimetre depths
    cfg = PropagationConfig((3, 5, 7), (1,))
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        raw = rng.normal(size=(8, 8, 48))
        h0 = rng.uniform(1.0, 9.0, (8, 8))
        w = AssemblyWeights(rng.normal(size=(8, 8, 3)), rng.normal(size=(8, 8, 3, 1)))
        mixed = run_ca_cspn(h0, raw, None, w, cfg)
        single = cspn_step(h0, h0, effective_kernel(raw, w.alpha(), cfg))
        worst = max(worst, np.abs(mixed - single).max())
    report(3, worst < 1e-12, f"max |delta| {worst:.2e} over 100 instances")


def test_criterion_4_scheduler_oracle():
    # metres, for the same reason as above
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng([seed, 4])
        h, w = (32, 32) if seed == 0 else rng.integers(1, 33, size=2)
        raw = rng.normal(size=(h, w, 48))
        h0 = rng.uniform(1.0, 9.0, (h, w))
        obs = SparseObservations(rng.uniform(1.0, 9.0, (h, w)), rng.random((h, w)) < 0.1)
        sel = SelectionMap(rng.choice(CFG.kernel_sizes, (h, w)),
                           rng.choice(CFG.iteration_checkpoints, (h, w)))
        a = run_ra_cspn_scheduled(h0, raw, obs, sel, CFG)
        b = run_ra_cspn_naive(h0, raw, obs, sel, CFG)
        worst = max(worst, np.abs(a - b).max())
    report(4, worst < 1e-12, f"max |delta| {worst:.2e} over 100 instances")


def test_criterion_5_gradcheck():
    start = time.perf_counter()
    worst, counts = {}, {}
    for seed in range(6):
        inst = gradcheck_instance(seed)
        details = {}
        inst.check(epsilon=1e-5, samples=40, seed=seed, details=details)
        for fam, err in details.items():
            worst[fam] = max(worst.get(fam, 0.0), err)
            size = inst.h0.size if fam == "h0" else inst.params.get(fam).size
            counts[fam] = counts.get(fam, 0) + min(40, size)
    took = time.perf_counter() - start
    err = max(worst.values())
    ok = err < 1e-5 and min(counts.values()) >= 200 and len(counts) == 5 and took < 60
    report(5, ok, f"max relative error {err:.2e}, min coordinates per family "
                  f"{min(counts.values())}, {took:.1f} s")


def test_criterion_6_cost_model():
    def one_hot(k, t):
        a = np.full((3, 3, 3), -40.0)
        lam = np.full((3, 3, 3, 4), -40.0)
        a[..., CFG.kernel_index(k)] = 40.0
        lam[..., CFG.kernel_index(k), CFG.checkpoint_index(t)] = 40.0
        return AssemblyWeights(a, lam)

    gap = max(abs(expected_cost(one_hot(k, t), CFG)
                  - selected_cost(SelectionMap.uniform(3, 3, k, t), CFG))
              for k in CFG.kernel_sizes for t in CFG.iteration_checkpoints)
    values = (expected_cost(one_hot(7, 12), CFG), expected_cost(one_hot(3, 3), CFG),
              expected_cost(AssemblyWeights.uniform(3, 3, CFG), CFG))
    exact = (1.0, 27 / 588, (83 / 3) * 7.5 / 588)
    dev = max(abs(v - e) for v, e in zip(values, exact))
    ok = gap <= 1e-12 and dev <= 1e-9 and abs(values[2] - 0.35289) < 5e-6
    report(6, ok, f"one-hot gap {gap:.1e}, worked examples {values[0]:.6f} "
                  f"{values[1]:.6f} {values[2]:.6f}")


def test_criterion_7_budget():
    rng = np.random.default_rng(7)
    over = 0
    for budget in (27 / 588, 0.1, 0.35, 1.0):
        for _ in range(50):
            sel = SelectionMap(rng.choice(CFG.kernel_sizes, (16, 16)),
                               rng.choice(CFG.iteration_checkpoints, (16, 16)))
            over += per_pixel_selected_cost(budget_round(sel, CFG, budget), CFG).max() > budget
    ex = budget_round(SelectionMap.uniform(1, 1, 7, 12), CFG, 100 / 588)
    example = (int(ex.k_star[0, 0]), int(ex.t_star[0, 0]))
    report(7, over == 0 and example == (3, 9),
           f"{over} over-budget maps of 200, worked example (7,12) -> {example}")


@pytest.fixture(scope="module")
def clean_scene():
    sc = make_scene(SceneSpec(), seed=0)
    sc.sparse = sample_sparse(sc, density=0.05, seed=0)
    return sc


@pytest.fixture(scope="module")
def outlier_scene():
    sc = make_scene(SceneSpec(), seed=0)
    sc.sparse = sample_sparse(sc, density=0.05, outlier_rate=0.2, outlier_scale=0.5, seed=0)
    return sc


@pytest.fixture(scope="module")
def lr_fit(clean_scene):
    return fit(clean_scene, obj=ObjectiveConfig(eta2=0.1), epochs=EPOCHS)


def _final(r):
    return r.history[-1]


def test_criterion_8a_cost_regularizer(clean_scene, lr_fit):
    base = fit(clean_scene, obj=ObjectiveConfig(eta2=0.0), epochs=EPOCHS)
    a, b = _final(lr_fit), _final(base)
    # "within 10%" read as at most 10% worse; a more accurate regularised run passes
    ok = (a["e_cost"] < b["e_cost"] and a["rmse_mm"] <= 1.1 * b["rmse_mm"]
          and max(lr_fit.wall_time_s, base.wall_time_s) < 300)
    ACCEPTANCE_LINES.append(
        f"criterion 8: {'PASS' if ok else 'FAIL'}  (a) E(c) {a['e_cost']:.4f} vs "
        f"{b['e_cost']:.4f}, RMSE {a['rmse_mm']:.2f} vs {b['rmse_mm']:.2f} mm")
    assert ok


def test_criterion_8b_learned_confidence(outlier_scene):
    learned = fit(outlier_scene, epochs=EPOCHS)
    frozen = fit(outlier_scene, epochs=EPOCHS, learn_confidence=False,
                 confidence_logits=np.where(outlier_scene.sparse.mask, 10.0, 0.0))
    a, b = _final(learned), _final(frozen)
    ok = a["rmse_mm"] < b["rmse_mm"] and max(learned.wall_time_s, frozen.wall_time_s) < 300
    ACCEPTANCE_LINES.append(
        f"criterion 8: {'PASS' if ok else 'FAIL'}  (b) learned {a['rmse_mm']:.2f} vs "
        f"frozen {b['rmse_mm']:.2f} mm")
    assert ok


def test_criterion_8c_assembly(clean_scene, lr_fit):
    single = fit(clean_scene, config=PropagationConfig((7,), (12,)), epochs=EPOCHS)
    a, b = _final(lr_fit), _final(single)
    ok = a["rmse_mm"] <= b["rmse_mm"] and single.wall_time_s < 300
    ACCEPTANCE_LINES.append(
        f"criterion 8: {'PASS' if ok else 'FAIL'}  (c) assembled {a['rmse_mm']:.2f} vs "
        f"CSPN(7,12) {b['rmse_mm']:.2f} mm")
    assert ok


def test_criterion_9_efficiency(clean_scene, lr_fit):
    p = lr_fit.params
    sel = select_configuration(p.weights(), CFG)
    ra, va = OpCounter(), OpCounter()
    run_ra_cspn_scheduled(lr_fit.h0, p.raw_affinity, clean_scene.sparse, sel, CFG, ra)
    run_cspn(lr_fit.h0, p.raw_affinity, clean_scene.sparse, CFG.k_max, CFG.n_steps, va)
    ratio = ra.mult_adds / va.mult_adds
    predicted = selected_cost(sel, CFG)
    ok = ratio <= 0.5 and abs(ratio - predicted) <= 0.3 * predicted
    report(9, ok, f"mult-add ratio {ratio:.3f}, predicted {predicted:.3f}")


def test_criterion_10_io_and_cli(tmp_path):
    samples = np.arange(65536, dtype=np.uint16).reshape(256, 256)
    depth, valid = rio.decode_depth(samples)
    rio.write_depth_raster(tmp_path / "all.pgm", depth, valid)
    lossless = np.array_equal(rio.read_pgm(tmp_path / "all.pgm")[0], samples)

    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"height": 12, "width": 12, "random_boxes": 1, "density": 0.3}))
    sc, fitted = tmp_path / "sc", tmp_path / "fit"
    rio.write_float_raster(tmp_path / "a.cspf", np.ones((12, 12, 48)))
    (tmp_path / "bad.pgm").write_bytes(b"P6\n")
    codes = {
        "make-scene 0": main(["make-scene", "--spec", str(spec), "--out", str(sc)]),
        "make-scene 1": main(["make-scene", "--spec", str(tmp_path / "none.json"),
                              "--out", str(sc)]),
        "propagate 0": main(["propagate", "--mode", "cspn", "--h0", str(sc / "gt.pgm"),
                             "--affinity", str(tmp_path / "a.cspf"),
                             "--out", str(tmp_path / "o.pgm")]),
        "propagate 2": main(["propagate", "--mode", "cspn", "--h0", str(tmp_path / "bad.pgm"),
                             "--affinity", str(tmp_path / "a.cspf"),
                             "--out", str(tmp_path / "o.pgm")]),
        "fit 0": main(["fit", "--scene", str(sc), "--epochs", "2", "--out", str(fitted)]),
        "fit 3": main(["fit", "--scene", str(sc), "--epochs", "3", "--step", "1e300",
                       "--out", str(tmp_path / "f2")]),
        "bench 0": main(["bench", "--scene", str(sc), "--params", str(fitted),
                         "--out", str(tmp_path / "b.csv")]),
        "bench 1": main(["bench", "--scene", str(sc)]),
        "gradcheck 0": main(["gradcheck", "--seed", "1", "--samples", "10"]),
        "gradcheck 3": main(["gradcheck", "--seed", "1", "--samples", "5", "--eps", "10"]),
    }
    wrong = [name for name, code in codes.items() if int(name.split()[1]) != code]
    report(10, lossless and not wrong,
           f"16-bit round trip {'lossless' if lossless else 'LOSSY'}, "
           f"{len(codes) - len(wrong)}/{len(codes)} exit codes as contracted {wrong or ''}")
