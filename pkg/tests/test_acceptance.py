"""End-to-end acceptance checks.

Each test appends one line to ``conftest.ACCEPTANCE_LINES`` (printed in the
terminal summary) and then asserts, so a red criterion shows both ways.
Runtime limits are part of each criterion.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from soarq import cli
from soarq.block import QuantConfig, mse
from soarq.cjso import update_global_scale, update_block_scale
from soarq.codecs import decode_e2m1, decode_e4m3, e2m1_codebook, piecewise_round, quantize_e2m1, quantize_e4m3, round_e4m3
from soarq.dss import ScalePairCandidate, dss_refine_block
from soarq.soar import quantize
from soarq.tensor_io import encode_payload, read_packed, save_checkpoint, write_packed
from test_codecs import ALL_E4M3_BITS, FINITE_E4M3, e2m1_by_formula, e4m3_by_formula
from test_dss import POS, brute_force, scalar_loss

CFG = QuantConfig()
N_SEEDS = 100


def record(num, title, ok, detail):
    ACCEPTANCE_LINES.append((num, title, bool(ok), detail))
    assert ok, detail


def gaussian(seed, n=4096):
    return np.random.default_rng(seed).standard_normal(n)


def test_01_codec_conformance():
    t0 = time.perf_counter()
    failures = []
    for code in range(16):
        if code == 0b1000:
            continue
        v = e2m1_by_formula(code)
        if quantize_e2m1(v) != code or decode_e2m1(code) != v:
            failures.append(f"fp4 {code:#x}")
    for bits in ALL_E4M3_BITS:
        v = e4m3_by_formula(bits)
        if decode_e4m3(bits) != v or decode_e4m3(quantize_e4m3(v)) != v:
            failures.append(f"e4m3 {bits:#x}")
    rng = np.random.default_rng(0)
    x = rng.uniform(-8, 8, 100_000)
    book = np.array(sorted({e2m1_by_formula(c) for c in range(16)}))
    if not np.all(np.abs(x - decode_e2m1(quantize_e2m1(x))) <= np.min(np.abs(x[:, None] - book), axis=1)):
        failures.append("fp4 nearest")
    y = rng.uniform(-500, 500, 100_000)
    if not np.all(np.abs(y - round_e4m3(y)) <= np.min(np.abs(y[:, None] - FINITE_E4M3), axis=1)):
        failures.append("e4m3 nearest")
    sweep = np.arange(-8 * 4096, 8 * 4096 + 1) / 4096.0
    if not np.array_equal(piecewise_round(sweep), decode_e2m1(quantize_e2m1(sweep))):
        failures.append("piecewise sweep")
    elapsed = time.perf_counter() - t0
    ok = not failures and len(e2m1_codebook()) == 15 and len(FINITE_E4M3) == 254 and elapsed < 5
    record(1, "codec conformance", ok, f"failures={failures or 'none'}, {elapsed:.2f}s (limit 5s)")


def test_02_closed_form_optimality():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    bad = []
    for i in range(100):
        w = rng.standard_normal((8, 16))
        q = decode_e2m1(rng.integers(0, 16, (8, 16)).astype(np.uint8))
        q[:, 0] = rng.choice([-6.0, 6.0], 8)
        delta = np.exp(rng.uniform(-1, 1, 8))
        qd = q * delta[:, None]

        def loss(a):
            a = np.atleast_1d(a)
            return np.sum((w[None] - qd[None] * a[:, None, None]) ** 2, axis=(1, 2))

        a = update_global_scale(w, q, delta)
        grid = np.linspace(0.5 * a, 1.5 * a, 10_000)
        step = abs(grid[1] - grid[0])
        if abs(grid[np.argmin(loss(grid))] - a) > step:
            bad.append((i, "grid"))
        la = loss(a)[0]
        if loss(a * 1.01)[0] < la or loss(a * 0.99)[0] < la:
            bad.append((i, "alpha+-1%"))
        d = update_block_scale(w[0], q[0], a)
        ld = np.sum((w[0] - q[0] * a * d) ** 2)
        if any(np.sum((w[0] - q[0] * a * d * f) ** 2) < ld for f in (1.01, 0.99)):
            bad.append((i, "delta+-1%"))
    elapsed = time.perf_counter() - t0
    record(2, "closed-form optimality", not bad and elapsed < 10, f"violations={bad or 'none'}, {elapsed:.2f}s (limit 10s)")


def test_03_dss_brute_force():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(200):
        block = rng.standard_normal(16) * np.exp(rng.uniform(-2, 2))
        alpha = float(np.float32(np.exp(rng.uniform(-6, 0))))
        inc_d = float(POS[rng.integers(40, 110)])
        inc_q = inc_d * float(rng.uniform(0.8, 1.2))
        out = dss_refine_block(block, alpha, ScalePairCandidate(inc_q, inc_d, scalar_loss(block, alpha, inc_q, inc_d)), CFG)
        best = min(brute_force(block, alpha, inc_q, inc_d).values())
        mismatches += scalar_loss(block, alpha, out.delta_q, out.delta_d) != best
    elapsed = time.perf_counter() - t0
    record(3, "DSS brute-force equivalence", mismatches == 0 and elapsed < 30,
           f"{mismatches}/200 blocks off the exhaustive minimum, {elapsed:.2f}s (limit 30s)")


@pytest.fixture(scope="module")
def gaussian_runs():
    t0 = time.perf_counter()
    runs = {m: [quantize(gaussian(s), CFG.replace(method=m)) for s in range(N_SEEDS)] for m in ("baseline", "cjso", "dss", "soar")}
    return runs, time.perf_counter() - t0


def test_04_convergence_shape(gaussian_runs):
    runs, elapsed = gaussian_runs
    mean = {m: float(np.mean([r.mse for r in rs])) for m, rs in runs.items()}
    monotone = sum(
        all(b.loss_after_dss <= a.loss_after_dss for a, b in zip(r.trace, r.trace[1:])) for r in runs["soar"]
    )
    below = sum(s.mse <= b.mse for s, b in zip(runs["soar"], runs["baseline"]))
    ok = monotone == N_SEEDS and below == N_SEEDS and mean["soar"] < mean["cjso"] < mean["baseline"] and elapsed < 120
    record(4, "convergence shape", ok,
           f"monotone {monotone}/100, soar<=baseline {below}/100, mean soar {mean['soar']:.6g} < cjso {mean['cjso']:.6g}"
           f" < baseline {mean['baseline']:.6g}, {elapsed:.1f}s for all four methods (limit 120s)")


def test_05_ablation_ordering(gaussian_runs):
    runs, elapsed = gaussian_runs
    m = {k: float(np.mean([r.mse for r in rs])) for k, rs in runs.items()}
    ok = m["soar"] <= m["dss"] <= m["baseline"] and m["soar"] <= m["cjso"] <= m["baseline"] and elapsed < 180
    record(5, "ablation ordering", ok,
           f"mean MSE soar {m['soar']:.6g}, dss {m['dss']:.6g}, cjso {m['cjso']:.6g}, baseline {m['baseline']:.6g}")


def test_06_early_stopping():
    t0 = time.perf_counter()
    problems = []
    for seed in range(10):
        w = gaussian(seed, 2048)
        full = quantize(w, CFG.replace(early_stop_tol=0.0))
        if full.iterations != 15:
            problems.append((seed, "tol=0 ran", full.iterations))
        rels = [r.rel_improvement for r in full.trace]
        expected = next((i + 1 for i, r in enumerate(rels) if r < 1e-3), 15)
        stopped = quantize(w, CFG)
        if stopped.iterations != expected:
            problems.append((seed, "stopped at", stopped.iterations, "expected", expected))
        if [r.loss_after_dss for r in stopped.trace] != [r.loss_after_dss for r in full.trace[:expected]]:
            problems.append((seed, "trace prefix differs"))
    elapsed = time.perf_counter() - t0
    record(6, "early stopping", not problems and elapsed < 30, f"problems={problems or 'none'}, {elapsed:.1f}s (limit 30s)")


def test_07_footprint_parity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(1000):
        shape = tuple(int(d) for d in rng.integers(1, 13, rng.integers(1, 4)))
        w = rng.standard_normal(shape)
        n = math.prod(shape)
        want = math.ceil(n / 2) + math.ceil(n / 16) + 4
        soar = len(encode_payload(quantize(w, CFG).tensor))
        base = len(encode_payload(quantize(w, CFG.replace(method="baseline")).tensor))
        bad += not (soar == base == want)
    elapsed = time.perf_counter() - t0
    record(7, "footprint parity", bad == 0 and elapsed < 10, f"{bad}/1000 shapes off the formula, {elapsed:.2f}s (limit 10s)")


def test_08_mxfp4_dss():
    t0 = time.perf_counter()
    cfg = QuantConfig(format="mxfp4", method="dss")
    base = [quantize(gaussian(s), cfg.replace(method="baseline")).mse for s in range(N_SEEDS)]
    dss = [quantize(gaussian(s), cfg).mse for s in range(N_SEEDS)]
    worse = sum(d > b for d, b in zip(dss, base))
    elapsed = time.perf_counter() - t0
    ok = np.mean(dss) < np.mean(base) and worse == 0 and elapsed < 120
    record(8, "MXFP4 + DSS", ok,
           f"mean dss {np.mean(dss):.6g} < baseline {np.mean(base):.6g}, worse on {worse}/100 seeds, {elapsed:.1f}s (limit 120s)")


def test_09_determinism(tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    ckpt = tmp_path / "fixture.safetensors"
    save_checkpoint(ckpt, {f"layers.{i}.weight": rng.standard_normal((32, 48)) for i in range(8)})
    outputs = []
    for k, jobs in enumerate((1, 1, 8, 8)):
        base = tmp_path / f"run{k}"
        code = cli.main(["quantize", str(ckpt), "-o", f"{base}.soq", "--report", f"{base}.json",
                         "--trace", f"{base}.csv", "--jobs", str(jobs)])
        assert code == 0
        outputs.append(tuple((tmp_path / f"run{k}{ext}").read_bytes() for ext in (".soq", ".json", ".csv")))
    elapsed = time.perf_counter() - t0
    same = all(o == outputs[0] for o in outputs)
    record(9, "end-to-end determinism", same and elapsed < 60,
           f"artifact/report/trace identical across jobs 1,1,8,8: {same}, {elapsed:.1f}s (limit 60s)")


def test_10_artifact_sufficiency(tmp_path):
    rng = np.random.default_rng(10)
    tensors = [rng.standard_normal(tuple(rng.integers(1, 70, 2))) * rng.choice([1e-3, 1.0, 30.0]) for _ in range(50)]
    results = [quantize(w, CFG, f"t{i}") for i, w in enumerate(tensors)]
    path = tmp_path / "a.soq"
    write_packed(path, results)
    back = read_packed(path)
    exact = sum(mse(w, qt) == r.mse for w, qt, r in zip(tensors, back, results))
    record(10, "artifact sufficiency", exact == 50, f"{exact}/50 tensors recompute the in-memory MSE bit-exactly")
