"""Acceptance suite: one PASS/FAIL line per criterion, printed in the terminal summary.

Each test records its verdict before asserting, so a failing criterion still
reports its measured numbers.
"""
import math
import struct
import time
from fractions import Fraction

import numpy as np
import pytest

from gradsense import autodiff as ad
from gradsense import cli, dataio
from gradsense.attack import AttackConfig, DummyBatch, run_dlg, run_magia
from gradsense.metrics import batch_report, score_pair
from gradsense.objective import (
    STRATEGIES,
    MixParams,
    ScheduleSpec,
    adaptive_coefficient_exact,
    magia_total,
    sample_subset,
)
from gradsense.verify import OracleInputs, coefficient_identity_check, oracle_chain_probe, triangle_step_check
from gradsense.victim import LabeledBatch, init_model, parse_arch, per_sample_gradients, sag_capture

from conftest import central_diff, max_rel_err

RESULTS = {}


def record(num, name, ok, detail=""):
    RESULTS[num] = (name, bool(ok), detail)
    return ok


def _victim(B, shape, C, h, seed):
    model = init_model(parse_arch(f"mlp:h={h}", shape, C), seed)
    hidden = dataio.synth_batch(dataio.SynthSpec(shape, C, "blocks", seed), B)
    return model, hidden, sag_capture(model, hidden)


def test_c01_coefficient_identity():
    t0 = time.perf_counter()
    ok = coefficient_identity_check(64)
    # independent check straight from the definition
    ok &= all(Fraction(2 * math.comb(B - 1, S - 1), math.comb(B, S) * S * S) == Fraction(2, B * S)
              for B in range(1, 65) for S in range(1, B + 1))
    dt = time.perf_counter() - t0
    assert record(1, "coefficient identity, 1 <= S <= B <= 64", ok and dt < 1, f"{dt:.3f}s")


def test_c02_tightness_as_scaling():
    t0 = time.perf_counter()
    ok = all(adaptive_coefficient_exact(B, S) <= 1 for B in range(1, 65) for S in range(1, B + 1) if B * S >= 2)
    rng = np.random.default_rng(2)
    worst = -np.inf
    for _ in range(200):
        B = int(rng.integers(2, 7))
        S = int(rng.integers(1, B + 1))
        r = oracle_chain_probe(OracleInputs(rng.normal(size=(B, 6)), rng.normal(size=(B, 6))), S)
        worst = max(worst, r.x_tilde_o - r.x_hat)
        ok &= r.x_tilde_o <= r.x_hat + 1e-12
    dt = time.perf_counter() - t0
    assert record(2, "coef <= 1 and X~o <= X^ on 200 pairs", ok and dt < 1,
                  f"max(X~o - X^) = {worst:.3g}, {dt:.3f}s")


def test_c03_triangle_step():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    checked, ok = 0, True
    for _ in range(200):
        B = int(rng.integers(2, 7))
        inputs = OracleInputs(rng.normal(size=(B, 5)), rng.normal(size=(B, 5)))
        for S in range(1, B + 1):
            flags = triangle_step_check(inputs, S)
            checked += len(flags)
            ok &= all(flags)
    dt = time.perf_counter() - t0
    assert record(3, "triangle step, 200 trials, B in [2,6], all S", ok and dt < 10,
                  f"{checked} subsets, {dt:.2f}s")


def test_c04_chain_probe_fixtures():
    r = oracle_chain_probe(OracleInputs([[1.0, 0.0], [-1.0, 0.0]], np.zeros((2, 2))), 1)
    ok = (not r.holds_tilde_le_o) and abs(r.x_tilde - 0.25) <= 1e-12 and abs(r.x_tilde_o) <= 1e-12
    same = np.random.default_rng(4).normal(size=(4, 3))
    z = oracle_chain_probe(OracleInputs(same, same), 2)
    ok &= max(abs(z.x_tilde), abs(z.x_tilde_o), abs(z.x_hat)) <= 1e-12
    assert record(4, "chain-probe fixtures", ok, f"X~={r.x_tilde}, X~o={r.x_tilde_o}")


def test_c05_collapse_equivalence():
    t0 = time.perf_counter()
    model, _, target = _victim(2, (1, 8, 8), 4, 16, 5)
    common = dict(batch_size=2, iterations=40, seed=5, tv_weight=0.0, keep_iterates=True)
    m = run_magia(AttackConfig(alpha=1.0, schedule=ScheduleSpec("constant", constant_S=2), **common), target, model)
    d = run_dlg(AttackConfig(**common), target, model)
    ok = len(m.iterates) == len(d.iterates) and all(np.array_equal(a, b) for a, b in zip(m.iterates, d.iterates))
    dt = time.perf_counter() - t0
    assert record(5, "collapse equivalence, bitwise iterates", ok and dt < 30,
                  f"{len(m.iterates)} iterates, {dt:.2f}s")


def test_c06_second_order_correctness():
    t0 = time.perf_counter()
    shape, C = (1, 4, 4), 4
    model = init_model(parse_arch("mlp:h=8", shape, C), 6)
    assert model.param_count <= 500
    rng = np.random.default_rng(6)
    worst = 0.0
    for probe in range(20):
        B = 3
        hidden = LabeledBatch(rng.uniform(size=(B,) + shape), rng.integers(0, C, size=B))
        target = sag_capture(model, hidden)
        logits = rng.normal(size=(B, C))
        x0 = rng.uniform(size=(B,) + shape)
        subset = sample_subset(rng, B, 2)
        mix = MixParams(0.999, 0.005)

        def f(x):
            dummy = DummyBatch(ad.Variable(x), ad.Variable(logits))
            return magia_total(model, dummy, subset, target, mix).item()

        dummy = DummyBatch(ad.Variable(x0), ad.Variable(logits))
        (g,) = ad.differentiate(magia_total(model, dummy, subset, target, mix), [dummy.images])
        worst = max(worst, max_rel_err(g.value, central_diff(f, x0)))
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and dt < 60
    assert record(6, f"second-order gradient vs finite differences ({model.param_count} params)", ok,
                  f"max rel err {worst:.2e}, {dt:.1f}s")


def test_c07_sag_linearity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(50):
        B, C = int(rng.integers(1, 7)), int(rng.integers(2, 6))
        shape = (1, 4, 4) if i % 2 else (2, 3, 3)
        model = init_model(parse_arch(f"mlp:h={int(rng.integers(2, 10))}", shape, C), i)
        batch = LabeledBatch(rng.uniform(size=(B,) + shape), rng.integers(0, C, size=B))
        mean = np.mean(per_sample_gradients(model, batch), axis=0)
        worst = max(worst, float(np.max(np.abs(mean - sag_capture(model, batch).g_star))))
    dt = time.perf_counter() - t0
    assert record(7, "SAG linearity over 50 models", worst < 1e-10 and dt < 30, f"max |diff| {worst:.2e}, {dt:.2f}s")


@pytest.mark.slow
def test_c08_desk_scale_direction():
    t0 = time.perf_counter()
    cfg = cli.ExperimentConfig(dataset="synth", image_shape=(1, 16, 16), batch_size=4, arch="mlp:h=64",
                               iterations=300, alpha=0.999, tv_weight=0.005, strategy="constant",
                               constant_S=2, optimizer="lbfgs")
    magia, dlg = [], []
    for seed in range(1, 6):
        magia.append(cli.run_one(cfg, "magia", seed)[2].psnr_mean)
        dlg.append(cli.run_one(cfg, "dlg", seed)[2].psnr_mean)
    wins = sum(m >= d for m, d in zip(magia, dlg))
    effective = sum(m > 19.0 for m in magia)
    dt = time.perf_counter() - t0
    detail = (f"MAGIA>=DLG in {wins}/5, MAGIA>19dB in {effective}/5, "
              f"MAGIA {np.round(magia, 2).tolist()} DLG {np.round(dlg, 2).tolist()}, {dt:.0f}s")
    assert record(8, "desk-scale MAGIA vs DLG", wins >= 4 and effective >= 3 and dt < 900, detail)


def test_c09_complexity():
    cfg = cli.ExperimentConfig()
    times = cli.bench_methods(cfg, iterations=100)
    ratio = times["magia"] / times["dlg"]
    assert record(9, "MAGIA per-iteration time <= 2.5x DLG", ratio <= 2.5,
                  f"ratio {ratio:.2f} ({times['magia'] * 1e3:.1f} vs {times['dlg'] * 1e3:.1f} ms)")


def _formula(strategy, e, B, I, E, S_const):
    ceil = lambda a, b: -(-a // b)
    S = {
        "constant": S_const,
        "frac_total": ceil(B * (e + 1), I),
        "frac_const": ceil(B * (e + 1), E),
        "rev_total": ceil(B * (I - e), I),
        "rev_const": ceil(B * (E - e), E),
    }[strategy]
    return min(max(S, 1), B)


def test_c10_schedule_conformance():
    B, I, E = 4, 300, 120
    model, _, target = _victim(B, (1, 4, 4), 3, 4, 10)
    bad = []
    for strategy in STRATEGIES:
        spec = ScheduleSpec(strategy, constant_S=3, E_script=E)
        cfg = AttackConfig(batch_size=B, iterations=I, seed=10, schedule=spec, record_every=0)
        got = run_magia(cfg, target, model).per_iteration_S
        if got != [_formula(strategy, e, B, I, E, 3) for e in range(I)]:
            bad.append(strategy)
    assert record(10, "schedule conformance, 5 strategies x 300 iterations", not bad, f"mismatched: {bad or 'none'}")


def test_c11_metrics_fixtures():
    m = score_pair(np.zeros((1, 8, 8)), np.full((1, 8, 8), 0.5))
    ok = m.mse == 0.25 and abs(m.psnr - 6.0206) < 1e-3
    x = np.random.default_rng(11).uniform(size=(1, 8, 8))
    same = score_pair(x, x)
    ok &= same.ssim == 1.0 and same.psnr == 100.0
    rng = np.random.default_rng(12)
    recon, truth = rng.uniform(size=(5, 1, 8, 8)), rng.uniform(size=(5, 1, 8, 8))
    a = batch_report(recon, truth)
    b = batch_report(recon[[3, 0, 4, 1, 2]], truth)
    ok &= (a.psnr_mean, a.ssim_mean, a.mse_mean, a.recr) == (b.psnr_mean, b.ssim_mean, b.mse_mean, b.recr)
    assert record(11, "metrics fixtures", ok, f"psnr(0, 0.5) = {m.psnr:.4f}")


def test_c12_io_round_trips(tmp_path):
    ok = dataio.encode_image(np.zeros((1, 2, 2))) == b"P5\n2 2\n255\n" + bytes(4)
    ok &= dataio.encode_image(np.ones((3, 1, 1))) == b"P6\n1 1\n255\n" + bytes([255, 255, 255])
    pixels = (np.arange(18, dtype=np.uint8) * 10).reshape(2, 3, 3)
    s = dataio.parse_idx(struct.pack(">IIII", 0x803, 2, 3, 3) + pixels.tobytes(),
                         struct.pack(">II", 0x801, 2) + bytes([4, 7]))
    ok &= np.array_equal(s.images[:, 0], pixels / 255.0) and s.labels.tolist() == [4, 7]
    rec = np.zeros(3072, dtype=np.uint8)
    rec[2048 + 5] = 255
    c = dataio.parse_cifar_bin(bytes([6]) + rec.tobytes())
    ok &= c.images[0, 2, 0, 5] == 1.0 and c.images.sum() == 1.0 and c.labels.tolist() == [6]
    rng = np.random.default_rng(12)
    good_lab = struct.pack(">II", 0x801, 2) + bytes([1, 2])
    unstructured = 0
    for i in range(10_000):
        junk = rng.integers(0, 256, size=int(rng.integers(0, 80)), dtype=np.uint8).tobytes()
        try:
            if i % 2:
                dataio.parse_idx(junk, good_lab)
            else:
                dataio.parse_cifar_bin(junk * int(rng.integers(1, 120)), ("cifar10", "cifar100")[i % 4 // 2])
        except dataio.DataFormatError as exc:
            unstructured += exc.offset is None and exc.record is None
        except ValueError as exc:
            unstructured += "label" not in str(exc)
        except Exception:
            unstructured += 1
    assert record(12, "I/O fixtures and 10k fuzz", ok and unstructured == 0, f"{unstructured} unstructured errors")
