"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed as they are produced and repeated in the terminal
summary. The end-to-end criteria share session fixtures, so the full default
task is trained once per seed.
"""

import math
import time
from dataclasses import dataclass, replace
from statistics import median

import numpy as np
import pytest

from guidedgan import functional as F
from guidedgan.autodiff import Tensor, tsum
from guidedgan.cli import main
from guidedgan.config import ExperimentConfig
from guidedgan.experiments import (PipelineResult, Splits, correlation_rows, make_splits,
                                   mtr_comparison, run_pipeline, scaling_study,
                                   snapshot_generators, train_clean_am)
from guidedgan.gradcheck import check_gradients
from guidedgan.losses import (LossConfig, discriminator_loss, generator_loss, gradient_penalty,
                              total_discriminator_loss)
from guidedgan.metrics import ErrorCounts, error_rate, evaluate, pearson, seer
from guidedgan.models import (AcousticModelSpec, DiscriminatorSpec, GeneratorSpec,
                              build_acoustic_model, build_compact_discriminator,
                              build_ed_generator, build_fc_generator, build_large_discriminator)
from guidedgan.nn import (BatchNorm1d, Conv1d, ConvTranspose1d, Dropout, Linear, SNLinear,
                          SpectralNormState, spectral_normalize, state_hash)
from guidedgan.training import AmResult, GanResult, train_gan

CFG = ExperimentConfig()
SEEDS = tuple(CFG.seeds)
OTHER_AM_OFFSET = 100
SN_ITERATIONS = 20
ENTRIES = 150          # finite-difference probes per tensor for network-level checks


def rand(shape, seed):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


# ---------------------------------------------------------------------------
# 1-4: unit-level criteria
# ---------------------------------------------------------------------------

def _toy_gradchecks():
    """(name, loss closure, tensors, max_entries) at toy width F=8, h=16, W=32, C=10."""
    rng = np.random.default_rng(0)
    cases = []

    def add(name, fn, tensors, max_entries=None):
        cases.append((name, fn, tensors, max_entries))

    x = Tensor(rand((2, 3, 9), 1), requires_grad=True)
    for name, layer in [("conv1d", Conv1d(3, 4, 5, padding=2, rng=rng)),
                        ("conv1d stride 2", Conv1d(3, 4, 3, stride=2, padding=1, rng=rng)),
                        ("conv-transpose1d", ConvTranspose1d(3, 4, 4, stride=2, rng=rng))]:
        add(name, lambda layer=layer: tsum(F.leaky_relu(layer(x)) ** 2), [x] + layer.parameters())

    rows = Tensor(rand((6, 5), 2), requires_grad=True)
    target = rand((6, 4), 3)
    lin, bn = Linear(5, 4, rng), BatchNorm1d(4)
    add("linear + batchnorm", lambda: tsum((bn(lin(rows)) - target) ** 2),
        [rows] + lin.parameters() + bn.parameters())
    sn = SNLinear(5, 4, rng, n_iter=3)
    sn.eval()
    add("spectral-norm linear", lambda: tsum(F.sigmoid(sn(rows))), [rows] + sn.parameters())
    drop = Dropout(0.3, rng)

    def dropped():
        drop._rng = np.random.default_rng(7)
        return tsum(drop(rows) ** 2)

    add("dropout (fixed mask)", dropped, [rows])
    add("relu / leaky relu", lambda: tsum(F.relu(rows) * F.leaky_relu(rows, 0.2)), [rows])
    add("max-pool", lambda: tsum(F.maxpool1d(x, 2) ** 2), [x])
    labels = np.arange(6) % 5
    add("log-softmax + nll", lambda: F.nll_loss(F.log_softmax(rows), labels), [rows])
    frames = Tensor(rand((3, 7), 4), requires_grad=True)
    add("context splice", lambda: tsum(F.context_splice(frames, 2) ** 2), [frames])

    f, h, w, c = 8, 16, 32, 10
    xg = Tensor(rand((1, f, w), 5), requires_grad=True)
    fc = build_fc_generator(GeneratorSpec(feature_dim=f, channels=[h] * 4))
    add("fully-convolutional generator", lambda: tsum(fc(xg) ** 2), [xg] + fc.parameters(), ENTRIES)
    ed = build_ed_generator(GeneratorSpec(kind="encoder-decoder", feature_dim=f, channels=[h] * 5))
    add("encoder-decoder generator", lambda: tsum(ed(xg) ** 2), [xg] + ed.parameters(), ENTRIES)
    xd = Tensor(rand((2, f, w), 6), requires_grad=True)
    for kind, build, depth in [("compact", build_compact_discriminator, 4),
                               ("large", build_large_discriminator, 8)]:
        d = build(DiscriminatorSpec(kind=kind, feature_dim=f, window=w, channels=[h] * depth))
        d.eval()
        add(f"{kind} discriminator", lambda d=d: tsum(d(xd)), [xd] + d.parameters(), ENTRIES)
    am = build_acoustic_model(AcousticModelSpec(feature_dim=f, n_senones=c, hidden_units=h,
                                                hidden_layers=2, dropout=0.0))
    xa = Tensor(rand((f, 7), 7), requires_grad=True)
    add("acoustic model", lambda: F.nll_loss(am.frame_log_probs(xa), np.arange(7) % c),
        [xa] + am.parameters(), ENTRIES)
    return cases


def test_criterion_01_gradient_correctness(criteria):
    t0 = time.process_time()
    failures = []
    cases = _toy_gradchecks()
    for name, fn, tensors, max_entries in cases:
        try:
            check_gradients(fn, tensors, rtol=1e-3, atol=1e-5, h=1e-5, max_entries=max_entries)
        except AssertionError as exc:
            failures.append(f"{name}: {str(exc).splitlines()[0]}")
    cpu = time.process_time() - t0
    ok = not failures and cpu < 120
    detail = f"{len(cases)} layers/networks, {len(failures)} failing, {cpu:.1f}s CPU (< 120s)"
    if failures:
        detail += "; " + "; ".join(failures)
    line = criteria.record(1, "finite-difference gradients", ok, detail)
    assert ok, line


def test_criterion_02_analytic_losses(criteria):
    half = Tensor(np.full(1, 0.5))
    ns = discriminator_loss(LossConfig("NS-GAN"), half, half).item()
    checks = {"NS-GAN D at 0.5/0.5 = 2 ln 2": abs(ns - 2 * math.log(2)) <= 1e-6}

    d_real = Tensor(rand(8, 1) * 0.1 + 0.5)
    d_fake = Tensor(rand(8, 2) * 0.1 + 0.3)
    lp = F.log_softmax(Tensor(rand((8, 5), 3)))
    labels = np.arange(8) % 5
    g = generator_loss(LossConfig("SN-GAN", 0.0), d_fake, lp, labels).data
    checks["SN-GAN G at lambda=0 bit-exact"] = g.tobytes() == (-d_fake.data.mean()).astype(np.float32).tobytes()
    want_d = (-d_real.data.mean() + d_fake.data.mean()).astype(np.float32)
    d_sn = total_discriminator_loss(LossConfig("SN-GAN"), d_real, d_fake).data
    d_gp0 = total_discriminator_loss(LossConfig("WGAN-GP", gp_weight=0.0), d_real, d_fake,
                                     Tensor(3.0)).data
    checks["SN-GAN D bit-exact"] = d_sn.tobytes() == want_d.tobytes()
    checks["lambda_gp=0 bit-exact"] = d_gp0.tobytes() == want_d.tobytes()

    rng = np.random.default_rng(0)
    xc, xf = rng.standard_normal((4, 3, 8)), rng.standard_normal((4, 3, 8))
    for scale, want in [(1.0, 0.0), (2.0, 1.0)]:
        w = rng.standard_normal((3, 8))
        w *= scale / np.linalg.norm(w)
        wt = Tensor(w)
        gp = gradient_penalty(lambda x: tsum(x * wt, axis=(1, 2)), xc, xf, np.random.default_rng(1))
        checks[f"GP norm-{scale:g} fixture = {want:g}"] = abs(gp.item() - want) <= 1e-6
    ok = all(checks.values())
    detail = ", ".join(f"{k}: {'ok' if v else 'FAIL'}" for k, v in checks.items())
    line = criteria.record(2, "analytic loss cases", ok, detail)
    assert ok, line


def _power_oracle(m: np.ndarray, tol=1e-14, max_iter=200_000) -> float:
    """Float64 power method on M^T M run to convergence."""
    v = np.ones(m.shape[1]) / math.sqrt(m.shape[1])
    prev = 0.0
    for _ in range(max_iter):
        u = m @ v
        u /= np.linalg.norm(u)
        v = m.T @ u
        s = np.linalg.norm(v)
        v /= s
        if abs(s - prev) <= tol * s:
            break
        prev = s
    return s


def _normalised_top_sv(weights, n_iter, seed=1):
    rng = np.random.default_rng(seed)
    out = []
    for w in weights:
        state = SpectralNormState.random(64, rng, n_iter=n_iter)
        normed = spectral_normalize(Tensor(w), state).data.astype(np.float64)
        out.append(_power_oracle(normed))
    return np.array(out)


def test_criterion_03_spectral_normalisation(criteria):
    rng = np.random.default_rng(0)
    weights = [rng.standard_normal((64, 64)).astype(np.float32) for _ in range(20)]
    oracle_err = max(abs(_power_oracle(w.astype(np.float64))
                         - np.linalg.svd(w.astype(np.float64), compute_uv=False)[0]) for w in weights)
    tops = _normalised_top_sv(weights, SN_ITERATIONS)
    at_five = _normalised_top_sv(weights, 5)
    in_band = (tops >= 0.95) & (tops <= 1.05)
    ok = bool(in_band.all()) and oracle_err < 1e-6
    detail = (f"{SN_ITERATIONS} iterations: {int(in_band.sum())}/20 in [0.95, 1.05], "
              f"range [{tops.min():.4f}, {tops.max():.4f}]; at 5 iterations "
              f"{int(((at_five >= 0.95) & (at_five <= 1.05)).sum())}/20, max {at_five.max():.4f}; "
              f"oracle vs SVD {oracle_err:.1e}")
    line = criteria.record(3, "spectral normalisation", ok, detail)
    assert ok, line


def test_criterion_04_error_rate_arithmetic(criteria):
    counts = ErrorCounts(insertions=984, deletions=1317, substitutions=8228, ref_length=54402)
    shown = f"{100 * error_rate(counts):.2f}"
    ok = shown == "19.35" and counts.total == 10529
    line = criteria.record(4, "error-rate arithmetic", ok, f"{shown}% from {counts.total} errors")
    assert ok, line


# ---------------------------------------------------------------------------
# shared end-to-end runs on the default task
# ---------------------------------------------------------------------------

@dataclass
class SeedRun:
    seed: int
    splits: Splits
    am: AmResult
    am_hash: str
    pipeline: PipelineResult
    cpu_seconds: float
    other_am: AmResult


@pytest.fixture(scope="module")
def runs():
    out = []
    for seed in SEEDS:
        t0 = time.process_time()
        splits = make_splits(CFG, seed)
        am = train_clean_am(CFG, splits, seed)
        am_hash = state_hash(am.model)
        pipeline = run_pipeline(CFG, seed, splits, am, keep_snapshots=seed == SEEDS[0])
        cpu = time.process_time() - t0
        other = train_clean_am(CFG, splits, seed + OTHER_AM_OFFSET)
        out.append(SeedRun(seed, splits, am, am_hash, pipeline, cpu, other))
    return out


@pytest.fixture(scope="module")
def ablations(runs):
    return [train_gan(r.splits.clean_train, r.splits.noisy_train, r.am.model, r.splits.noisy_dev,
                      replace(CFG.gan, seed=r.seed, guidance_weight=0.0)) for r in runs]


@pytest.fixture(scope="module")
def scaling(runs):
    tables, gans = [], []
    for r in runs:
        collected = []
        tables.append(scaling_study(CFG, r.splits, r.am.model, CFG.splits.hours, r.seed,
                                    collect=collected))
        gans.append(collected)
    return tables, gans


def test_criterion_05_guided_gan_effect(runs, criteria):
    parts, ok = [], True
    for r in runs:
        p = r.pipeline
        ratio = p.noisy_dev_seer / p.clean_dev_seer
        rel = 1 - p.gan_dev_seer / p.noisy_dev_seer
        seed_ok = ratio >= 1.3 and rel >= 0.15 and p.ft_dev_seer <= p.gan_dev_seer
        ok &= seed_ok
        parts.append(f"seed {r.seed}: clean {p.clean_dev_seer:.4f} noisy {p.noisy_dev_seer:.4f} "
                     f"(x{ratio:.2f}) GAN {p.gan_dev_seer:.4f} ({100 * rel:.1f}% rel) "
                     f"GAN+FT {p.ft_dev_seer:.4f}")
    cpu = sum(r.cpu_seconds for r in runs)
    ok &= cpu < 20 * 60
    line = criteria.record(5, "end-to-end guided GAN", ok, "; ".join(parts) + f"; {cpu:.0f}s CPU (< 1200s)")
    assert ok, line


def test_criterion_06_guidance_ablation(runs, ablations, criteria):
    guided = [r.pipeline.noisy_dev_seer - r.pipeline.gan_dev_seer for r in runs]
    unguided = [r.pipeline.noisy_dev_seer - a.best_seer for r, a in zip(runs, ablations)]
    ok = median(unguided) < median(guided)
    detail = (f"median SeER improvement lambda=0 {median(unguided):+.4f} vs lambda={CFG.gan.guidance_weight:g} "
              f"{median(guided):+.4f}; lambda=0 best dev SeER per seed "
              + ", ".join(f"{a.best_seer:.4f}" for a in ablations))
    line = criteria.record(6, "guidance ablation", ok, detail)
    assert ok, line


def test_criterion_07_data_scaling(scaling, criteria):
    tables, _ = scaling
    hours = CFG.splits.hours
    med = [median(t[i]["dev_SeER"] for t in tables) for i in range(len(hours))]
    decreasing = all(a > b for a, b in zip(med, med[1:]))
    diminishing = (med[0] - med[1]) > (med[-2] - med[-1])
    ok = decreasing and diminishing
    detail = (", ".join(f"{h:g}h {m:.4f}" for h, m in zip(hours, med))
              + f"; strictly decreasing {decreasing}; first gain {med[0] - med[1]:.4f} > "
              f"last gain {med[-2] - med[-1]:.4f}: {diminishing}")
    line = criteria.record(7, "data-scaling trend", ok, detail)
    assert ok, line


def test_criterion_08_seer_ter_correlation(runs, ablations, criteria):
    r0 = runs[0]
    sp = r0.splits
    snaps = snapshot_generators(r0.pipeline.gan)
    _, r_snap = correlation_rows(r0.am.model, snaps, sp.noisy_dev, sp.senone_to_token)

    gen = r0.pipeline.gan.generator
    ft = r0.pipeline.finetuned.model
    systems = [(r0.am.model, None, sp.dev), (r0.am.model, None, sp.noisy_dev),
               (r0.am.model, gen, sp.noisy_dev), (ft, gen, sp.noisy_dev), (ft, None, sp.noisy_dev),
               (r0.other_am.model, None, sp.noisy_dev), (r0.other_am.model, gen, sp.noisy_dev)]
    reports = [evaluate(am, g, corpus, sp.senone_to_token) for am, g, corpus in systems]
    r_mixed = pearson([x.seer for x in reports], [x.token_error_rate for x in reports])
    ok = len(snaps) >= 10 and r_snap >= 0.8 and len(systems) >= 6 and r_mixed >= 0.6
    detail = (f"{len(snaps)} checkpoints of one run r = {r_snap:.3f} (>= 0.8); "
              f"{len(systems)} heterogeneous systems r = {r_mixed:.3f} (>= 0.6)")
    line = criteria.record(8, "SeER/TER correlation", ok, detail)
    assert ok, line


def test_criterion_09_cross_model_specificity(runs, criteria):
    parts, ok = [], True
    for r in runs:
        nd = r.splits.noisy_dev
        base = seer(r.other_am.model, None, nd)
        with_gen = seer(r.other_am.model, r.pipeline.gan.generator, nd)
        ok &= with_gen >= base - 0.01
        guided = r.pipeline.noisy_dev_seer - r.pipeline.gan_dev_seer
        parts.append(f"seeds {r.seed}/{r.seed + OTHER_AM_OFFSET}: AM-B {base:.4f} -> {with_gen:.4f} "
                     f"(AM-A gain {guided:.4f})")
    line = criteria.record(9, "cross-model specificity", ok, "; ".join(parts))
    assert ok, line


def test_criterion_10_frozen_guide_integrity(runs, ablations, scaling, criteria):
    _, scaling_gans = scaling
    checked, problems = 0, []
    for r, ablation, extra in zip(runs, ablations, scaling_gans):
        results: list[GanResult] = [r.pipeline.gan, ablation, *extra]
        if state_hash(r.am.model) != r.am_hash:
            problems.append(f"seed {r.seed}: acoustic model hash changed")
        for res in results:
            checked += 1
            column = [row["dev_SeER"] for row in res.log.rows]
            argmin = res.log.rows[int(np.argmin(column))]["epoch"]
            if res.am_hash != r.am_hash:
                problems.append(f"seed {r.seed}: hash recorded by the run differs")
            if res.g_steps != res.d_steps:
                problems.append(f"seed {r.seed}: {res.g_steps} G vs {res.d_steps} D steps")
            if res.best_epoch != argmin or res.best_seer != min(column):
                problems.append(f"seed {r.seed}: best epoch {res.best_epoch} vs argmin {argmin}")
            if seer(r.am.model, res.generator, r.splits.noisy_dev) != res.best_seer:
                problems.append(f"seed {r.seed}: returned generator does not reproduce its SeER")
    ok = not problems and checked == len(SEEDS) * (2 + len(CFG.splits.hours))
    detail = f"{checked} GAN runs checked" + ("; " + "; ".join(problems) if problems else ", all invariants hold")
    line = criteria.record(10, "frozen-guide integrity", ok, detail)
    assert ok, line


def test_criterion_11_reproducibility(tmp_path, monkeypatch, criteria):
    monkeypatch.setenv("GGAN_THREADS", "0")
    short = ["--set", "am_training.max_epochs=2", "--set", "gan.max_epochs=2"]
    dirs = []
    for name in ("a", "b"):
        out = tmp_path / name
        codes = [main(["gen-data", "--out", str(out / "data"), *short]),
                 main(["train-am", "--data", str(out / "data"), "--out", str(out / "am.ggan"), *short]),
                 main(["train-gan", "--data", str(out / "data"), "--am", str(out / "am.ggan"),
                       "--out", str(out / "gan.ggan"), *short])]
        assert codes == [0, 0, 0]
        dirs.append(out)
    files = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*")
                   if p.is_file() and not p.name.endswith(".time.csv"))
    differ = [str(f) for f in files if (dirs[0] / f).read_bytes() != (dirs[1] / f).read_bytes()]
    ok = not differ and any(f.suffix == ".ggan" for f in files) and any(f.suffix == ".csv" for f in files)
    detail = f"{len(files)} logs/checkpoints compared byte for byte, {len(differ)} differ"
    if differ:
        detail += ": " + ", ".join(differ)
    line = criteria.record(11, "reproducibility", ok, detail)
    assert ok, line


def test_criterion_12_mtr_harness(runs, criteria):
    r0 = runs[0]
    rows = mtr_comparison(CFG, r0.splits, r0.pipeline)
    ok = len(rows) == 3 and all(
        0 <= row["dev_SeER"] <= 1 and 0 <= row["test_SeER"] <= 1 and row["wall_clock_s"] > 0
        for row in rows)
    table = "; ".join(f"{row['system']}: dev {row['dev_SeER']:.4f} test {row['test_SeER']:.4f} "
                      f"{row['wall_clock_s']:.0f}s" for row in rows)
    line = criteria.record(12, "MTR comparison harness", ok, table)
    assert ok, line
