import math

import numpy as np
import numpy.testing as npt
import pytest

from mixtrain import schedule as S
from mixtrain.schedule import (AdamW, ConfigError, NonFiniteGradient, TrainConfig,
                               adamw_step, config_from_kv, config_to_kv, lr_at, plan)
from mixtrain.tensor import Tensor


def cfg(**kw):
    return TrainConfig(**kw).validate()


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------

def test_plan_symmetric_half():
    s = plan(cfg(method="mixtraining", e_ssl=100, e_sl=100, rho=0.5))
    assert (s.e_mix, s.pure_ssl_epochs, s.pure_sl_epochs, s.total_epochs) == (50, 50, 50, 150)


def test_plan_asymmetric_floor():
    s = plan(cfg(method="mixtraining", e_ssl=100, e_sl=60, rho=0.75))
    assert (s.e_mix, s.pure_ssl_epochs, s.pure_sl_epochs) == (45, 55, 15)


def test_plan_fully_merged():
    s = plan(cfg(method="mixtraining", e_ssl=50, e_sl=50, rho=1.0))
    assert (s.pure_ssl_epochs, s.e_mix, s.pure_sl_epochs) == (0, 50, 0)


def test_plan_ssl_sl_forces_no_merge():
    s = plan(cfg(method="ssl_sl", e_ssl=100, e_sl=100, rho=0.9))
    assert s.e_mix == 0 and s.total_epochs == 200


def test_plan_sl_ignores_ssl_epochs():
    s = plan(cfg(method="sl", e_ssl=77, e_sl=10))
    assert (s.pure_ssl_epochs, s.e_mix, s.pure_sl_epochs, s.total_epochs) == (0, 0, 10, 10)


def test_plan_degenerate_zero_epochs():
    s = plan(cfg(method="mixtraining", e_ssl=0, e_sl=30, rho=1.0))
    assert s.e_mix == 0 and s.total_epochs == 30


def test_plan_invariants_on_grid():
    rhos = (0.0, 0.25, 0.5, 0.75, 1.0)
    for e_ssl in range(0, 201, 7):
        for e_sl in range(0, 201, 9):
            for rho in rhos:
                s = plan(cfg(method="mixtraining", e_ssl=e_ssl, e_sl=e_sl, rho=rho))
                assert s.e_mix == math.floor(rho * min(e_ssl, e_sl))
                assert s.pure_ssl_epochs >= 0 and s.pure_sl_epochs >= 0
                assert s.total_epochs == e_ssl + e_sl - s.e_mix
                assert s.total_epochs <= e_ssl + e_sl
                assert (s.total_epochs == e_ssl + e_sl) == (s.e_mix == 0)


# ---------------------------------------------------------------------------
# lr schedule
# ---------------------------------------------------------------------------

def test_lr_first_warmup_epoch():
    c = cfg(base_lr_ssl=1.0, warmup_ssl=20)
    assert lr_at("ssl", 0, 100, c) == pytest.approx(1.0 / 20)


def test_lr_warmup_end_hits_base():
    c = cfg(base_lr_ssl=1.0, warmup_ssl=20)
    assert lr_at("ssl", 19, 100, c) == pytest.approx(1.0)


def test_lr_cosine_no_warmup_last_epoch():
    c = cfg(base_lr_sl=2.0, warmup_sl=0)
    L = 40
    want = 2.0 * 0.5 * (1 + math.cos(math.pi * (L - 1) / L))
    assert lr_at("sl", L - 1, L, c) == pytest.approx(want)


def test_lr_continuous_at_junction():
    c = cfg(base_lr_ssl=1.0, warmup_ssl=20)
    assert lr_at("ssl", 19, 100, c) == pytest.approx(lr_at("ssl", 20, 100, c))


def test_lr_warmup_scales_with_phase_length():
    c = cfg(base_lr_ssl=1.0, warmup_ssl=20)
    # 10-epoch phase keeps the 20% warmup fraction: 2 warmup epochs
    assert lr_at("ssl", 0, 10, c) == pytest.approx(0.5)
    assert lr_at("ssl", 1, 10, c) == pytest.approx(1.0)


def test_lr_mix_phase_uses_ssl_base():
    c = cfg(base_lr_ssl=0.3, base_lr_sl=0.9, warmup_ssl=0, warmup_sl=0)
    assert lr_at("mix", 0, 10, c) == pytest.approx(0.3)


def test_lr_epoch_out_of_range():
    with pytest.raises(ConfigError):
        lr_at("ssl", 5, 5, cfg())


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

def test_adamw_zero_grad_params_untouched():
    p = Tensor(np.ones(4, dtype=np.float32), requires_grad=True)
    opt = AdamW({"w": p}, no_decay=set(), weight_decay=0.0)
    p.grad = np.zeros(4, dtype=np.float32)
    opt.step(0.1)
    npt.assert_array_equal(p.data, np.ones(4, dtype=np.float32))


def test_adamw_decay_only():
    p = Tensor(np.full(3, 2.0, dtype=np.float64), requires_grad=True)
    opt = AdamW({"w": p}, no_decay=set(), weight_decay=0.1)
    p.grad = np.zeros(3)
    opt.step(1.0)
    npt.assert_allclose(p.data, np.full(3, 1.8), rtol=1e-12)


def test_adamw_skips_decay_on_flagged_names():
    p = Tensor(np.full(3, 2.0, dtype=np.float64), requires_grad=True)
    opt = AdamW({"ln.b": p}, no_decay={"ln.b"}, weight_decay=0.1)
    p.grad = np.zeros(3)
    opt.step(1.0)
    npt.assert_array_equal(p.data, np.full(3, 2.0))


def test_adamw_missing_grad_skipped_and_steps_per_param():
    a = Tensor(np.ones(2, dtype=np.float64), requires_grad=True)
    b = Tensor(np.ones(2, dtype=np.float64), requires_grad=True)
    opt = AdamW({"a": a, "b": b}, no_decay=set(), weight_decay=0.0)
    a.grad = np.full(2, 0.5)
    opt.step(0.01)
    assert opt.steps == {"a": 1, "b": 0}
    npt.assert_array_equal(b.data, np.ones(2))


def test_adamw_nan_grad_aborts():
    p = Tensor(np.ones(2, dtype=np.float64), requires_grad=True)
    opt = AdamW({"w": p}, no_decay=set())
    p.grad = np.array([1.0, np.nan])
    with pytest.raises(NonFiniteGradient, match="'w'"):
        opt.step(0.1)


def test_adamw_step_deterministic_and_shape_preserving(rng):
    p1 = rng.normal(size=(3, 4))
    p2 = p1.copy()
    g = rng.normal(size=(3, 4))
    m1, v1 = np.zeros_like(p1), np.zeros_like(p1)
    m2, v2 = np.zeros_like(p2), np.zeros_like(p2)
    adamw_step(p1.reshape(-1), g.reshape(-1), m1.reshape(-1), v1.reshape(-1),
               1, 1e-3, (0.9, 0.95), 1e-8, 0.05)
    adamw_step(p2.reshape(-1), g.reshape(-1), m2.reshape(-1), v2.reshape(-1),
               1, 1e-3, (0.9, 0.95), 1e-8, 0.05)
    npt.assert_array_equal(p1, p2)
    assert p1.shape == (3, 4)


def test_adamw_first_step_direction_matches_scalar_recurrence(rng):
    # from the published recurrence: with m=v=0 the bias corrections cancel,
    # so the first step is exactly -lr * g / (|g| + eps)
    g = np.array([0.4, -1.7, 0.002])
    p = np.zeros(3)
    m, v = np.zeros(3), np.zeros(3)
    adamw_step(p, g, m, v, 1, 0.1, (0.9, 0.95), 1e-8, 0.0)
    expect = -0.1 * g / (np.abs(g) + 1e-8)
    npt.assert_allclose(p, expect, rtol=1e-10)


# ---------------------------------------------------------------------------
# config round-trip
# ---------------------------------------------------------------------------

def test_config_kv_roundtrip(tmp_path):
    c = cfg(method="ssl_sl", alpha=0.9, lam=0.25, betas=(0.8, 0.9), augment=False)
    text = config_to_kv(c)
    assert "lambda=0.25" in text and "betas=0.8,0.9" in text
    pairs = dict(line.split("=", 1) for line in text.strip().splitlines())
    back = config_from_kv(pairs)
    assert back == c


def test_config_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        config_from_kv({"learning_rate": "1"})


def test_config_validation():
    with pytest.raises(ConfigError):
        cfg(rho=1.3)
    with pytest.raises(ConfigError):
        cfg(method="pretrain")
    with pytest.raises(ConfigError):
        cfg(p=0.0)
