"""End-to-end acceptance checks, one test group per numbered criterion.

A per-criterion PASS/FAIL summary is printed at the end of the pytest run.
Criterion 7 needs the UCR Chinatown files and only runs when
``TSDISTILL_CHINATOWN`` points at ``Chinatown_TRAIN.tsv``.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import grad_check, t64
from tsdistill.checkpoint import file_digest, read_metrics
from tsdistill.cli import main
from tsdistill.config import RunConfig
from tsdistill.data import (
    load_labeled_tsv,
    synth_classification,
    synth_sine_forecast,
    write_labeled_tsv,
    z_normalize,
)
from tsdistill.distill import (
    EMASchedule,
    MaskConfig,
    MaskPlan,
    apply_mask,
    distill_loss,
    ema_delta,
    sample_mask_plan,
    total_steps_for,
    train_step,
)
from tsdistill.encoder import init_encoder
from tsdistill.heads import ridge_solve
from tsdistill.ndgrad import OneCycleSchedule, Tensor, onecycle_lr
from tsdistill.ndgrad import functional as F
from tsdistill.pipeline import (
    classification_probe,
    forecast_probe,
    last_value_baseline,
    pretrain,
    series_windows,
    train_portion,
)
from tsdistill.distill import DistillConfig, TargetConfig, init_train_state
from tsdistill.encoder import EncoderConfig

# 20 shapes [B, C, T] for the gradient suite
GRAD_SHAPES = [
    (1, 1, 1), (1, 1, 2), (1, 2, 3), (2, 1, 4), (2, 2, 5), (1, 3, 6), (3, 1, 7), (2, 3, 8),
    (1, 4, 9), (4, 2, 10), (2, 2, 11), (1, 1, 12), (3, 3, 13), (2, 4, 14), (1, 2, 16),
    (2, 1, 17), (3, 2, 19), (1, 3, 21), (2, 2, 24), (1, 1, 32),
]


def naive_conv1d(x, w, b, dilation):
    B, Cin, T = x.shape
    Cout, _, k = w.shape
    pad = dilation * (k - 1) // 2
    out = np.zeros((B, Cout, T))
    for bi in range(B):
        for o in range(Cout):
            for t in range(T):
                acc = b[o]
                for c in range(Cin):
                    for j in range(k):
                        src = t + j * dilation - pad
                        if 0 <= src < T:
                            acc += w[o, c, j] * x[bi, c, src]
                out[bi, o, t] = acc
    return out


# --- 1 ------------------------------------------------------------------------------

@pytest.mark.criterion(1)
def test_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(100)
    worst = {}

    def record(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for B, C, T in GRAD_SHAPES:
        shape = (B, C, T)
        a, b = t64(rng.normal(size=shape)), t64(rng.uniform(0.5, 2.0, size=shape))
        c = rng.normal(size=shape)
        record("arith", grad_check(lambda ts: ((ts[0] * ts[1] - ts[1]) / ts[1] + ts[0]).mean(), [a, b]))
        bias = t64(rng.normal(size=(1, C, 1)))
        record("broadcast", grad_check(lambda ts: (ts[0] * ts[1] * c).sum(), [a, bias]))
        record("shape", grad_check(lambda ts: (F.transpose(ts[0], (2, 0, 1)).reshape(-1) * c.transpose(2, 0, 1).reshape(-1)).sum(), [a]))

        for k, d in ((3, 1), (3, 2), (1, 1)):
            w, bb = t64(rng.normal(size=(2, C, k))), t64(rng.normal(size=2))
            cc = rng.normal(size=(B, 2, T))
            record("conv1d", grad_check(lambda ts: (F.conv1d(ts[0], ts[1], ts[2], d) * cc).sum(), [a, w, bb]))

        g, be = t64(rng.uniform(0.5, 1.5, size=C)), t64(rng.normal(size=C))
        rm, rv = rng.normal(size=C), rng.uniform(0.5, 2.0, size=C)
        record("bn_eval", grad_check(
            lambda ts: (F.batch_norm1d(ts[0], ts[1], ts[2], rm.copy(), rv.copy(), False) * c).sum(), [a, g, be]))
        if B * T >= 2:
            record("bn_train", grad_check(
                lambda ts: (F.batch_norm1d(ts[0], ts[1], ts[2], rm.copy(), rv.copy(), True) * c).sum(), [a, g, be]))

        x = rng.normal(size=shape)
        x[np.abs(x) < 1e-2] = 0.3
        for act in ("gelu", "relu"):
            record(act, grad_check(lambda ts: (F.ACTIVATIONS[act](ts[0]) * c).sum(), [t64(x)]))
        record("dropout", grad_check(lambda ts: (F.dropout(ts[0], 0.4, True, np.random.default_rng(1)) * c).sum(), [a]))

        target = rng.normal(size=shape)
        p = target + rng.normal(size=shape) * 1.5
        p[np.abs(np.abs(p - target) - 1.0) < 1e-3] += 0.01
        weight = rng.uniform(size=shape)
        record("smooth_l1", grad_check(lambda ts: F.smooth_l1(ts[0], target, 1.0, weight=weight), [t64(p)]))

        emb = t64(rng.normal(size=C))
        plans = [MaskPlan(T, [(0, max(1, T // 2))]) for _ in range(B)]
        record("apply_mask", grad_check(lambda ts: (apply_mask(ts[0], plans, ts[1]) * c).sum(), [a, emb]))

    # a full composed training graph: mask -> encoder (train-mode BN) -> head -> masked loss
    for seed, T in ((0, 12), (1, 9), (2, 16)):
        state = init_train_state(EncoderConfig(width=4, num_blocks=2, dropout_rate=0.0),
                                 DistillConfig(target=TargetConfig(top_k=2)), 10, seed, np.float64)
        r = np.random.default_rng(seed)
        x = r.normal(size=(2, 1, T))
        masks = np.zeros((3, 2, T), dtype=bool)
        masks[0, 0, 1:4] = masks[1, 1, T - 3:] = masks[2, :, :2] = True
        targets = r.normal(size=(2, T, 4))
        record("train_graph", grad_check(lambda _: distill_loss(state, x, targets, masks),
                                         state.trainable(), entries=5, rng=r))

    elapsed = time.perf_counter() - start
    print({k: f"{v:.2e}" for k, v in worst.items()}, f"{elapsed:.1f}s")
    assert max(worst.values()) < 1e-4, worst
    assert elapsed < 60


# --- 2 ------------------------------------------------------------------------------

@pytest.mark.criterion(2)
def test_conv_oracle_100_instances():
    rng = np.random.default_rng(200)
    for _ in range(100):
        B, Cin, Cout = rng.integers(1, 4, size=3)
        T = int(rng.integers(1, 33))
        k = int(rng.choice([1, 3, 5]))
        d = int(rng.integers(1, 9))
        x, w, b = rng.normal(size=(B, Cin, T)), rng.normal(size=(Cout, Cin, k)), rng.normal(size=Cout)
        out = F.conv1d(Tensor(x), Tensor(w), Tensor(b), d).data
        assert np.max(np.abs(out - naive_conv1d(x, w, b, d))) <= 1e-6


@pytest.mark.criterion(2)
def test_ridge_hand_system():
    sol = ridge_solve(np.array([[1.0, 2.0], [3.0, 5.0]]), np.array([1.0, 2.0]), 1.0)
    # centered normal equations [[3, 3], [3, 5.5]] w = [1, 1.5]
    assert np.max(np.abs(sol.weights - np.array([1.0 / 7.5, 0.2]))) <= 1e-9
    assert abs(float(sol.intercept) - 8.0 / 15.0) <= 1e-9


@pytest.mark.criterion(2)
def test_smooth_l1_closed_form():
    rng = np.random.default_rng(201)
    d = rng.normal(scale=2.0, size=1000)
    for beta in (0.5, 1.0, 2.0):
        for v in d:
            got = F.smooth_l1(Tensor(np.array([v])), np.array([0.0]), beta).item()
            a = abs(v)
            expected = 0.5 * v * v / beta if a < beta else a - 0.5 * beta
            assert got == expected


# --- 3 ------------------------------------------------------------------------------

@pytest.mark.criterion(3)
@pytest.mark.parametrize("total", [1, 200, 1440, 12345])
def test_schedule_exactness(total):
    s = EMASchedule(total)
    assert ema_delta(s, 0) == 0.9996
    assert ema_delta(s, total) == 0.99996
    lr = OneCycleSchedule(max_lr=1e-3, total_steps=total, warmup_fraction=0.1)
    assert onecycle_lr(lr, 0) == 1e-3 / 25.0
    assert onecycle_lr(lr, total * 0.1) == 1e-3
    assert onecycle_lr(lr, total) == 1e-3 / 1e4


# --- 4 ------------------------------------------------------------------------------

@pytest.mark.criterion(4)
def test_masking_statistics():
    start = time.perf_counter()
    T, B = 200, 8
    for p in (0.1, 0.3, 0.5):
        cfg = MaskConfig(mask_prob=p)
        upper = p + cfg.max_block_len(T) / (B * T)
        rng = np.random.default_rng(int(p * 10))
        for _ in range(1000):
            plans = sample_mask_plan([T] * B, cfg, rng)
            masked = 0
            for plan in plans:
                prev = 0
                for a, b in plan.intervals:
                    assert prev <= a < b <= T
                    prev = b
                masked += plan.masked_count
            frac = masked / (B * T)
            assert p < frac <= upper
    assert time.perf_counter() - start < 30


# --- 5 and 8: desk-scale classification ------------------------------------------------------

@pytest.fixture(scope="module")
def classification_run(tmp_path_factory):
    rng = np.random.default_rng(0)
    train = synth_classification(3, 150, 256, 0.3, rng, "train")
    test = synth_classification(3, 150, 256, 0.3, rng, "test")
    train, stats = z_normalize(train)
    test, _ = z_normalize(test, stats)
    cfg = RunConfig(width=64, num_blocks=7, num_students=3, batch_size=8, seed=0)
    assert cfg.total_steps == 0 and total_steps_for(256, cfg.steps_per_kilostep) == 200

    init_state = init_train_state(cfg.encoder_config(1), cfg.distill_config(), 200, cfg.seed)
    init_acc, _ = classification_probe(init_state.teacher, train, test, cfg.logistic_cv(), cfg.seed)

    start = time.perf_counter()

    def probe(enc):
        return classification_probe(enc, train, test, cfg.logistic_cv(), cfg.seed)[0]

    res = pretrain(cfg, train, tmp_path_factory.mktemp("cls"), probe_fn=probe)
    elapsed = time.perf_counter() - start
    print(f"init {init_acc:.4f} best {res.record.best_score:.4f} history {res.record.history} "
          f"steps {len(res.losses)} {elapsed:.0f}s min collapse {min(res.collapse):.3f}")
    return dict(init=init_acc, result=res, elapsed=elapsed)


@pytest.mark.criterion(5)
def test_classification_accuracy(classification_run):
    res = classification_run["result"]
    assert res.exit_code == 0
    assert len(res.losses) == 200
    assert classification_run["elapsed"] < 600
    assert res.record.best_score >= 0.95


@pytest.mark.criterion(5)
def test_classification_margin_over_untrained(classification_run):
    best = classification_run["result"].record.best_score
    assert best - classification_run["init"] >= 0.20, (
        f"trained {best:.4f} vs untrained {classification_run['init']:.4f}")


@pytest.mark.criterion(8)
def test_no_collapse_on_classification_run(classification_run):
    assert min(classification_run["result"].collapse) > 0.05


@pytest.mark.criterion(8)
def test_no_masking_keeps_student_bitwise():
    cfg = RunConfig(width=16, num_blocks=3, top_k=3, mask_prob=0.0)
    state = init_train_state(cfg.encoder_config(1), cfg.distill_config(), 100, seed=0)
    before = [p.data.copy() for p in state.trainable()]
    batch = np.random.default_rng(0).normal(size=(8, 1, 64)).astype(np.float32)
    for _ in range(100):
        train_step(state, batch)
    for a, p in zip(before, state.trainable()):
        assert a.tobytes() == p.data.tobytes()


# --- 6 ------------------------------------------------------------------------------

@pytest.mark.criterion(6)
def test_desk_scale_forecasting(tmp_path):
    start = time.perf_counter()
    cfg = RunConfig(width=64, horizons=(24,), forecast_context=200, probe_every=720, seed=0)
    series = synth_sine_forecast(4000, 50, 0.1, np.random.default_rng(0))
    _, stats = z_normalize(train_portion(series, cfg))
    series, _ = z_normalize(series, stats)
    values = series.values[0]
    windows = series_windows(series, cfg)

    res = pretrain(cfg, train_portion(series, cfg), tmp_path, crop_window=cfg.forecast_context)
    mse, _ = forecast_probe(res.state.teacher, values, windows, cfg.ridge_cv())[24]
    base, _ = last_value_baseline(values, windows, "test", 24)
    elapsed = time.perf_counter() - start
    print(f"ridge {mse:.4f} lvcf {base:.4f} ratio {mse / base:.3f} steps {len(res.losses)} {elapsed:.0f}s")
    assert len(res.losses) == total_steps_for(2400)
    assert mse <= 0.7 * base
    assert elapsed < 600


# --- 7 ------------------------------------------------------------------------------

@pytest.mark.criterion(7)
def test_chinatown_spot_check(tmp_path):
    path = os.environ.get("TSDISTILL_CHINATOWN")
    if not path:
        pytest.skip("set TSDISTILL_CHINATOWN to Chinatown_TRAIN.tsv to run")
    train_path = Path(path)
    test_path = train_path.with_name(train_path.name.replace("TRAIN", "TEST"))
    start = time.perf_counter()
    train = load_labeled_tsv(train_path)
    test = load_labeled_tsv(test_path, {n: i for i, n in enumerate(train.label_names)}, "test")
    train, stats = z_normalize(train)
    test, _ = z_normalize(test, stats)
    cfg = RunConfig(seed=0)

    def probe(enc):
        return classification_probe(enc, train, test, cfg.logistic_cv(), cfg.seed)[0]

    res = pretrain(cfg, train, tmp_path, probe_fn=probe)
    assert res.record.best_score >= 0.90
    assert time.perf_counter() - start < 900


# --- 9 ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def determinism_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("det")
    data = synth_classification(3, 30, 128, 0.3, np.random.default_rng(9))
    write_labeled_tsv(root / "d_TRAIN.tsv", data)
    write_labeled_tsv(root / "d_TEST.tsv", synth_classification(3, 30, 128, 0.3, np.random.default_rng(10)))
    cfg = root / "c.cfg"
    cfg.write_text("width = 16\nnum_blocks = 3\ntop_k = 3\ntotal_steps = 24\nprobe_every = 8\ncrop_window = 100\n")
    args = ["pretrain", "--config", str(cfg), "--data", str(root / "d_TRAIN.tsv"), "--out"]
    for name in ("a", "b"):
        assert main(args + [str(root / name)]) == 0
    assert main(args + [str(root / "r"), "--resume", str(root / "a" / "checkpoint_000008.ckpt")]) == 0
    return root


def _rows(path):
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in read_metrics(path)]


@pytest.mark.criterion(9)
def test_fixed_seed_reruns_identical(determinism_runs):
    a, b = determinism_runs / "a", determinism_runs / "b"
    assert _rows(a / "metrics.tsv") == _rows(b / "metrics.tsv")
    for name in ("checkpoint_000008.ckpt", "checkpoint_000016.ckpt", "final.ckpt"):
        assert file_digest(a / name) == file_digest(b / name)


@pytest.mark.criterion(9)
def test_resume_equals_uninterrupted(determinism_runs):
    a, r = determinism_runs / "a", determinism_runs / "r"
    assert file_digest(a / "final.ckpt") == file_digest(r / "final.ckpt")
    assert _rows(r / "metrics.tsv") == _rows(a / "metrics.tsv")[8:]
