"""Property suite: every invariant of the package as an executable oracle.

``run_all`` returns one :class:`OracleResult` per check, ordered by name.
Failures are results, not exceptions.  The fast tier runs in well under a
minute; ``slow=True`` adds small training runs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dsp import AudioClip, MelConfig, frame_normalize, mel_spectrogram, power_contour
from .estimator import EstimatorModel
from .evaluation import keep_mask, kde_density, level_grid
from .recording import (FactorTable, adaptive_factor, learned_factor_loss, scalar_product_loss,
                        squared_error)

FD_EPS = 1e-5
GRAD_TOL = 1e-4


@dataclass
class OracleResult:
    name: str
    expected: float
    actual: float
    tolerance: float
    passed: bool
    detail: str = ""


def _result(name, expected, actual, tol, detail="") -> OracleResult:
    return OracleResult(name, float(expected), float(actual), float(tol),
                        bool(abs(actual - expected) <= tol), detail)


# ---------------------------------------------------------------- gradients


def numeric_grad(f, params, eps: float = FD_EPS) -> list[np.ndarray]:
    """Central differences of the scalar ``f()`` w.r.t. each parameter."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            gf[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def gradcheck(f, params, eps: float = FD_EPS) -> float:
    """Max relative error between tape gradients and central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, 1e-6)``.
    """
    for p in params:
        p.zero_grad()
    with ad.Tape():
        loss = f()
    ad.backward(loss)
    analytic = [p.grad.copy() for p in params]
    numeric = numeric_grad(f, params, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def _away_from(rng, shape, points, margin=1e-2, scale=1.0):
    """Random values at least ``margin`` away from every kink in ``points``."""
    x = rng.standard_normal(shape) * scale
    for k in points:
        close = np.abs(x - k) < margin
        x[close] = k + margin * np.sign(x[close] - k + 1e-300) * 2
    return x


def _min_abs_preactivation(model, mel) -> float:
    h = frame_normalize(mel)
    worst = np.inf
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        pre = ad.conv1d(h, w.data, b.data).data
        worst = min(worst, float(np.min(np.abs(pre))))
        h = np.maximum(pre, 0.0)
    return worst


def grad_cases(rng) -> dict:
    """Named builders: each returns (scalar loss closure, parameters)."""
    P = ad.Parameter

    def weighted(out_fn, params):
        # random projection so every output entry matters
        r = {}

        def f():
            out = out_fn()
            if out.shape == ():
                return out
            if "w" not in r:
                r["w"] = rng.standard_normal(out.shape)
            return ad.sum_(ad.mul(out, r["w"]))
        return f, params

    cases = {}

    def binary(name, op, lo=None):
        def build():
            a = P(rng.standard_normal((3, 4)), "a")
            b = P(rng.uniform(0.5, 2.0, (4,)) if lo else rng.standard_normal((4,)), "b")
            return weighted(lambda: op(a, b), [a, b])
        cases[name] = build

    binary("add", ad.add)
    binary("sub", ad.sub)
    binary("mul", ad.mul)
    binary("div", ad.div, lo=True)

    def unary(name, op, sampler):
        def build():
            a = P(sampler((3, 5)), "a")
            return weighted(lambda: op(a), [a])
        cases[name] = build

    unary("neg", ad.neg, rng.standard_normal)
    unary("scale", lambda a: ad.scale(a, -2.5), rng.standard_normal)
    unary("square", ad.square, rng.standard_normal)
    unary("sqrt", ad.sqrt, lambda s: rng.uniform(0.2, 3.0, s))
    unary("exp", ad.exp, rng.standard_normal)
    unary("log", ad.log, lambda s: rng.uniform(0.2, 3.0, s))
    unary("relu", ad.relu, lambda s: _away_from(rng, s, [0.0]))
    unary("softplus", ad.softplus, lambda s: 3 * rng.standard_normal(s))
    unary("clip", lambda a: ad.clip(a, -0.5, 0.7), lambda s: _away_from(rng, s, [-0.5, 0.7]))
    unary("sum", lambda a: ad.sum_(a, axis=0), rng.standard_normal)
    unary("mean", lambda a: ad.mean(a, axis=-1), rng.standard_normal)
    unary("sum_all", ad.sum_, rng.standard_normal)
    unary("reshape", lambda a: ad.reshape(a, (5, 3)), rng.standard_normal)
    unary("take", lambda a: ad.take(a, np.array([2, 0, 2, 1])), rng.standard_normal)

    def build_dot():
        a, b = P(rng.standard_normal((2, 6)), "a"), P(rng.standard_normal((2, 6)), "b")
        return weighted(lambda: ad.dot(a, b), [a, b])
    cases["dot"] = build_dot

    def build_concat():
        a, b = P(rng.standard_normal((3, 2)), "a"), P(rng.standard_normal((3, 4)), "b")
        return weighted(lambda: ad.concat([a, b], axis=-1), [a, b])
    cases["concat"] = build_concat

    def build_dense():
        x, w, b = P(rng.standard_normal((5, 4)), "x"), P(rng.standard_normal((4, 3)), "w"), P(rng.standard_normal(3), "b")
        return weighted(lambda: ad.dense(x, w, b), [x, w, b])
    cases["dense"] = build_dense

    def conv(k, batch, act):
        def build():
            shape = (2, 7, 3) if batch else (7, 3)
            x = P(rng.standard_normal(shape), "x")
            w = P(rng.standard_normal((k, 3, 4)) * 0.5, "w")
            b = P(rng.standard_normal(4) * 0.1, "b")
            if act:
                # keep pre-activations away from the relu kink
                for _ in range(20):
                    pre = ad.conv1d(x.data, w.data, b.data).data
                    if np.min(np.abs(pre)) > 1e-3:
                        break
                    b.data = b.data + 0.013
            return weighted(lambda: ad.conv1d(x, w, b, activation="relu" if act else None), [x, w, b])
        return build

    cases["conv1d_k1"] = conv(1, False, False)
    cases["conv1d_k3"] = conv(3, False, False)
    cases["conv1d_k5_batch"] = conv(5, True, False)
    cases["conv1d_k3_relu"] = conv(3, True, True)

    def build_le():
        p = rng.uniform(0.1, 2.0, (3, 8))
        q = P(rng.uniform(0.1, 2.0, (3, 8)), "q")
        la = P(rng.standard_normal(3) * 0.3, "log_a")
        return (lambda: ad.sum_(learned_factor_loss(p, q, la))), [q, la]
    cases["learned_factor_loss"] = build_le

    def build_scp():
        p = rng.uniform(0.1, 2.0, (3, 8))
        q = P(rng.uniform(0.1, 2.0, (3, 8)), "q")
        return (lambda: ad.sum_(scalar_product_loss(p, q))), [q]
    cases["scalar_product_loss"] = build_scp

    def build_net():
        # redraw until no relu pre-activation sits within reach of the FD step
        while True:
            model = EstimatorModel(MelConfig(n_mels=6), widths=(5, 4, 1), kernels=(3, 1, 1),
                                   seed=int(rng.integers(1 << 30)))
            mel = rng.standard_normal((2, 9, 6))
            if _min_abs_preactivation(model, mel) > 1e-3:
                break
        p = rng.uniform(0.1, 2.0, (2, 9))
        return (lambda: ad.mean(scalar_product_loss(p, model(mel)))), model.parameters()
    cases["estimator_scp"] = build_net
    return cases


def check_gradients(seed: int = 0, instances: int = 4) -> list[OracleResult]:
    out = []
    rng = np.random.default_rng(seed)
    for name, build in grad_cases(rng).items():
        worst = 0.0
        for _ in range(instances):
            f, params = build()
            worst = max(worst, gradcheck(f, params))
        out.append(_result(f"grad/{name}", 0.0, worst, GRAD_TOL, f"{instances} instances"))
    return out


def check_backward_linearity(seed: int = 0) -> OracleResult:
    rng = np.random.default_rng(seed)
    model = EstimatorModel(MelConfig(n_mels=6), widths=(5, 4, 1), kernels=(3, 1, 1), seed=seed)
    mel = rng.standard_normal((2, 9, 6))
    p1, p2 = rng.uniform(0.1, 2, (2, 9)), rng.uniform(0.1, 2, (2, 9))
    alpha, beta = 0.7, -1.3

    def grads(fn):
        for p in model.parameters():
            p.zero_grad()
        with ad.Tape():
            loss = fn()
        ad.backward(loss)
        return np.concatenate([p.grad.ravel() for p in model.parameters()])

    l1 = lambda: ad.mean(scalar_product_loss(p1, model(mel)))  # noqa: E731
    l2 = lambda: ad.sum_(ad.square(ad.sub(model(mel), p2)))  # noqa: E731
    g1, g2 = grads(l1), grads(l2)
    g = grads(lambda: ad.add(ad.scale(l1(), alpha), ad.scale(l2(), beta)))
    err = float(np.max(np.abs(g - (alpha * g1 + beta * g2))))
    return _result("autodiff/backward_linearity", 0.0, err, 1e-12)


def check_conv_k1_dense(seed: int = 0) -> OracleResult:
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((11, 7)), rng.standard_normal((7, 5)), rng.standard_normal(5)
    a = ad.conv1d(x, w[None], b).data
    d = ad.dense(x, w, b).data
    return _result("autodiff/conv1d_k1_equals_dense", 0.0, float(np.sum(a != d)), 0.0, "count of differing entries")


# ---------------------------------------------------------------- recording factor


def _positive_pairs(rng, n, length=8):
    return rng.uniform(0.5, 1.5, (n, length)), rng.uniform(0.5, 1.5, (n, length))


def check_factor_grid(seed: int = 0, pairs: int = 1000, step: float = 1e-4) -> OracleResult:
    """Closed-form factor vs brute-force argmin of the squared error on a grid.

    The optimum is a q**2-weighted mean of p/q, so the grid spans
    [min p/q, max p/q].
    """
    rng = np.random.default_rng(seed)
    P, Q = _positive_pairs(rng, pairs)
    worst = 0.0
    for p, q in zip(P, Q):
        ratio = p / q
        grid = np.arange(ratio.min() - step, ratio.max() + 2 * step, step)
        errs = np.sum((p[None, :] - grid[:, None] * q[None, :]) ** 2, axis=1)
        worst = max(worst, abs(adaptive_factor(p, q) - grid[np.argmin(errs)]))
    return _result("recording/adaptive_factor_vs_grid", 0.0, worst, step, f"{pairs} pairs, grid step {step}")


def check_scp_identity(seed: int = 0, pairs: int = 1000) -> OracleResult:
    rng = np.random.default_rng(seed + 1)
    P, Q = _positive_pairs(rng, pairs)
    a = adaptive_factor(P, Q)
    e_hat = squared_error(P, Q, a)
    e_scp = scalar_product_loss(P, Q).data
    err = float(np.max(np.abs(e_scp * np.sum(P * P, axis=1) - e_hat)))
    return _result("recording/scp_identity", 0.0, err, 1e-9, "e_scp * |p|^2 vs e_a at the optimum")


def check_factor_optimality(seed: int = 0, pairs: int = 200) -> OracleResult:
    rng = np.random.default_rng(seed + 2)
    P, Q = _positive_pairs(rng, pairs)
    grid = np.linspace(0.0, 4.0, 4001)
    worst = -np.inf
    for p, q in zip(P, Q):
        e_hat = squared_error(p, q, adaptive_factor(p, q))
        e_grid = np.sum((p[None, :] - grid[:, None] * q[None, :]) ** 2, axis=1)
        worst = max(worst, float(e_hat - e_grid.min()))
    return OracleResult("recording/adaptive_factor_optimal", 0.0, worst, 1e-9, worst <= 1e-9,
                        "max(e_a_hat - min_grid e_a)")


def check_scp_scale(seed: int = 0) -> list[OracleResult]:
    rng = np.random.default_rng(seed + 3)
    P, Q = rng.uniform(0.01, 2.0, (50, 16)), rng.uniform(0.01, 2.0, (50, 16))
    base = scalar_product_loss(P, Q).data
    worst_q = worst_p = 0.0
    for c in (1e-3, 1.0, 1e3):
        worst_q = max(worst_q, float(np.max(np.abs(scalar_product_loss(P, c * Q).data - base))))
        worst_p = max(worst_p, float(np.max(np.abs(scalar_product_loss(c * P, Q).data - base))))
    R = rng.standard_normal((500, 6))
    S = rng.standard_normal((500, 6))
    vals = scalar_product_loss(R, S).data
    out_of_range = float(np.sum((vals < 0) | (vals > 1)))
    return [
        _result("recording/scp_scale_invariance_q", 0.0, worst_q, 1e-10),
        _result("recording/scp_scale_invariance_p", 0.0, worst_p, 1e-10),
        _result("recording/scp_range", 0.0, out_of_range, 0.0, "count outside [0, 1]"),
    ]


def check_le_sparsity(seed: int = 0) -> OracleResult:
    from .trainer import AdamState, adam_step, batch_objective

    rng = np.random.default_rng(seed + 4)
    model = EstimatorModel(MelConfig(n_mels=6), widths=(5, 1), kernels=(3, 1), seed=seed, variant="le")
    model.factors = FactorTable(["a", "b", "c"])
    before = model.factors.param("c").data.copy()
    state = AdamState()
    for k in range(3):
        params = model.parameters()
        with ad.Tape():
            loss, extra = batch_objective(model, rng.standard_normal((4, 8, 6)), rng.uniform(0.1, 1, (4, 8)),
                                          ["a", "b", "a", "b"])
            for p in params + extra:
                p.zero_grad()
            ad.backward(loss)
        adam_step(params + extra, [p.grad for p in params + extra], state, 1e-2, k + 1)
    moved = float(np.any(model.factors.param("c").data != before))
    touched = float(model.factors.param("a").data != 0.0)
    return OracleResult("trainer/le_gradient_sparsity", 0.0, moved, 0.0, moved == 0.0 and touched == 1.0,
                        "absent group's factor must stay bit-identical")


# ---------------------------------------------------------------- dsp / estimator


def _tone_clip(seed: int) -> AudioClip:
    rng = np.random.default_rng(seed + 5)
    t = np.arange(12000) / 24000
    x = sum(rng.uniform(0.05, 0.2) * np.sin(2 * np.pi * f * t) for f in (220, 440, 660, 1500, 3100))
    return AudioClip(x + 1e-3 * rng.standard_normal(t.size), 24000)


def check_frame_normalize(seed: int = 0) -> list[OracleResult]:
    rng = np.random.default_rng(seed + 6)
    x = rng.standard_normal((40, 80)) * 3
    diffs = 0
    for c in (-50.0, -1e-3, 0.37, 12.0):
        diffs += int(np.sum(frame_normalize(x + c) != frame_normalize(x)))
    per_frame = rng.standard_normal((40, 1)) * 10
    diffs += int(np.sum(frame_normalize(x + per_frame) != frame_normalize(x)))
    clip = _tone_clip(seed)
    cfg = MelConfig()
    m1 = frame_normalize(mel_spectrogram(clip, cfg)).values
    gain_err = 0.0
    for g in (1e-2, 0.3, 3.0):
        m2 = frame_normalize(mel_spectrogram(clip.scaled(g), cfg)).values
        gain_err = max(gain_err, float(np.max(np.abs(m2 - m1))))
    p1 = power_contour(clip, cfg)
    hom = max(float(np.max(np.abs(power_contour(clip.scaled(g), cfg) / (g * g * p1) - 1))) for g in (0.1, 2.0))
    return [
        _result("dsp/frame_normalize_additive_exact", 0.0, diffs, 0.0, "count of differing entries"),
        _result("dsp/gain_erasure_audio", 0.0, gain_err, 1e-9),
        _result("dsp/power_homogeneity", 0.0, hom, 1e-12, "relative"),
    ]


def check_estimator(seed: int = 0) -> list[OracleResult]:
    rng = np.random.default_rng(seed + 7)
    model = EstimatorModel(seed=seed)
    mel = rng.standard_normal((30, 80)) * 2 - 5
    base = model.predict(mel)
    gain_diff = sum(int(np.sum(model.predict(mel + c) != base)) for c in (-7.0, 0.5, 20.0))
    leaks = 0
    needs = 0
    for t in (0, 1, 10, 28, 29):
        for off in (-5, -4, -3, 3, 4, 5):
            s = t + off
            if 0 <= s < 30:
                m2 = mel.copy()
                m2[s] += rng.standard_normal(80) * 3
                leaks += int(model.predict(m2)[t] != base[t])
        for off in (-2, 2):
            s = t + off
            if 0 <= s < 30:
                m2 = mel.copy()
                m2[s] += rng.standard_normal(80) * 3
                needs += int(model.predict(m2)[t] == base[t])
    return [
        _result("estimator/gain_bit_invariance", 0.0, gain_diff, 0.0, "count of differing frames"),
        _result("estimator/locality_outside_5_frames", 0.0, leaks, 0.0, "outputs changed by frames beyond +-2"),
        _result("estimator/depends_on_edge_of_field", 0.0, needs, 0.0, "outputs unchanged by frames at +-2"),
        _result("estimator/positivity", 1.0, float(np.all(base > 0)), 0.0),
    ]


def check_boundary_filter() -> OracleResult:
    voiced = np.ones(60, dtype=bool)
    voiced[20:30] = False
    voiced[45:50] = False
    dropped = int(np.sum(voiced & ~keep_mask(voiced, 0.0125)))
    transitions = 4
    return _result("eval/boundary_frames_per_transition", 4.0, dropped / transitions, 0.0)


def check_histogram_mass(seed: int = 0) -> OracleResult:
    rng = np.random.default_rng(seed + 8)
    worst = 0.0
    grid = level_grid()
    for _ in range(5):
        d = kde_density(rng.uniform(-30, -6, 500), grid)
        worst = max(worst, abs(d.sum() * (grid[1] - grid[0]) - 1.0))
    return _result("eval/histogram_mass", 0.0, worst, 1e-6)


def check_schedule_and_adam() -> list[OracleResult]:
    from .trainer import AdamState, TrainConfig, TrainState, adam_step, plateau_schedule

    cfg = TrainConfig()
    st = TrainState(lr=1e-4)
    plateau_schedule(st, 1.0, cfg)
    for i in range(4):
        st.update += cfg.plateau_patience_updates + 1
        plateau_schedule(st, 2.0, cfg)
    theta = ad.Parameter(np.array(0.0), "theta")
    adam_step([theta], [np.array(1.0)], AdamState(), 0.1, 1)
    return [
        _result("trainer/four_plateaus", 1e-5, st.lr, 1e-18),
        _result("trainer/adam_first_step", -0.1, float(theta.data), 1e-8),
    ]


# ---------------------------------------------------------------- determinism


def _tiny_ae_bytes(seed: int, corrupt: bool) -> bytes:
    from .autoencoder import save, train_ae
    from .evaluation import LabelledItem
    from .trainer import TrainConfig

    rng = np.random.default_rng(seed)
    cfg = MelConfig(n_mels=12)
    level_model = EstimatorModel(cfg, widths=(6, 1), kernels=(3, 1), seed=seed)
    items = []
    for i in range(4):
        T = 30
        voiced = np.ones(T, dtype=bool)
        voiced[10:13] = False
        items.append(LabelledItem(f"f{i}.wav", rng.standard_normal((T, 12)) - 4, voiced,
                                  f0=np.where(voiced, 200.0 + 10 * i, 0.0)))
    tc = TrainConfig(batch_size=4, crop_frames=16, max_updates=6, validation_interval=3, val_crops=4, seed=seed)
    ae = train_ae(items, level_model, tc, bottleneck=2).model
    if corrupt:
        w = ae.decoder[0][0].data
        raw = w.view(np.uint64)
        raw.flat[0] ^= np.uint64(1)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ae.vxl"
        save(ae, path)
        return path.read_bytes()


def determinism_replay(seed: int = 0, corrupt: bool = False) -> OracleResult:
    """Train a tiny AE twice and compare the serialised bytes.

    ``corrupt`` flips the lowest bit of one decoder weight in the second run,
    which must make the check fail.
    """
    a = hashlib.sha256(_tiny_ae_bytes(seed, False)).hexdigest()
    b = hashlib.sha256(_tiny_ae_bytes(seed, corrupt)).hexdigest()
    same = float(a == b)
    return OracleResult("determinism/replay", 1.0, same, 0.0, same == 1.0, f"{a[:12]} vs {b[:12]}")


# ---------------------------------------------------------------- slow tier


def check_training(seed: int = 0) -> list[OracleResult]:
    from .synth import SynthSpec, synthesize_corpus
    from .trainer import TrainConfig, train_estimator

    out = []
    with tempfile.TemporaryDirectory() as tmp:
        spec = SynthSpec(n_speakers=2, files_per_speaker=10, duration_s=1.5, seed=seed)
        m = synthesize_corpus(spec, Path(tmp) / "ad")
        res = train_estimator(m, "ad", TrainConfig.desk(max_updates=300, validation_interval=100, seed=seed))
        first, last = res.train_losses[:20].mean(), res.train_losses[-20:].mean()
        out.append(OracleResult("slow/ad_loss_decreases", first, last, first, bool(last < first),
                                "mean of last 20 vs first 20 updates"))
        spec = SynthSpec(n_speakers=2, files_per_speaker=8, duration_s=1.5, gain_mode="speaker",
                         gain_range_db=(-6.0, 0.0), seed=seed)
        m = synthesize_corpus(spec, Path(tmp) / "le")
        res = train_estimator(m, "le", TrainConfig.desk(max_updates=1000, validation_interval=250, seed=seed))
        gains = {r.group: r.gain_db for r in m}
        f = res.model.factors
        learned = 10 * math.log10(f.factor("s00") / f.factor("s01"))
        true = gains["s00"] - gains["s01"]
        out.append(_result("slow/le_factor_ratio_db", true, learned, 1.0, "power ratio between two speakers"))
    return out


# ---------------------------------------------------------------- driver


def run_all(seed: int = 0, slow: bool = False) -> list[OracleResult]:
    results: list[OracleResult] = []
    results += check_gradients(seed)
    results.append(check_backward_linearity(seed))
    results.append(check_conv_k1_dense(seed))
    results.append(check_factor_grid(seed))
    results.append(check_scp_identity(seed))
    results.append(check_factor_optimality(seed))
    results += check_scp_scale(seed)
    results.append(check_le_sparsity(seed))
    results += check_frame_normalize(seed)
    results += check_estimator(seed)
    results.append(check_boundary_filter())
    results.append(check_histogram_mass(seed))
    results += check_schedule_and_adam()
    results.append(determinism_replay(seed))
    if slow:
        results += check_training(seed)
    return sorted(results, key=lambda r: r.name)


def format_table(results: list[OracleResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  {'actual':>11}  {'expected':>11}  {'tolerance':>9}"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.actual:11.4g}  "
                     f"{r.expected:11.4g}  {r.tolerance:9.2g}")
    return "\n".join(lines)


def write_report(results: list[OracleResult], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["name", "expected", "actual", "tolerance", "passed", "detail"])
    for r in results:
        w.writerow([r.name, repr(float(r.expected)), repr(float(r.actual)), repr(float(r.tolerance)), int(r.passed), r.detail])
    Path(path).write_text(buf.getvalue())
