import copy
import csv
import io

import numpy as np
import pytest

from mipgrid.data import procedural_dataset
from mipgrid.field import RadianceField
from mipgrid.render import generate_rays, render_rays
from mipgrid.scalecoord import discrete_scale
from mipgrid.train import (
    AdamState,
    NonFiniteError,
    TrainConfig,
    TrainingAborted,
    backward,
    block_lr,
    build_index_maps,
    gradient_check,
    metrics_csv,
    ray_weights,
    run,
    step,
    training_rays,
    weighted_loss,
    window_means,
)


@pytest.fixture(scope="module")
def tiny_data():
    return procedural_dataset(n_train=2, n_test=1, width=16, focal=20.0, supersample=2)


def tiny_cfg(**kw):
    base = dict(
        resolution=(6, 6, 6),
        density_rank=2,
        appearance_rank=2,
        appearance_channels=3,
        hidden=8,
        iterations=6,
        batch_rays=32,
        n_samples=8,
        log_every=2,
        density_shift=-2.0,
    )
    base.update(kw)
    return TrainConfig(**base)


# ------------------------------------------------------------------ loss


def test_loss_examples():
    assert weighted_loss(np.ones((3, 3)), np.ones((3, 3)), np.ones(3))[0] == 0.0
    value, grad = weighted_loss(np.array([[0.6, 0.5, 0.5]]), np.array([[0.5, 0.5, 0.5]]), np.ones(1))
    assert value == pytest.approx(0.01, rel=1e-12)
    np.testing.assert_allclose(grad, [[0.2, 0, 0]], atol=1e-15)


def test_weighted_contributions():
    pred = np.array([[0.1, 0, 0], [0.1, 0, 0]])
    target = np.zeros((2, 3))
    w = np.array([1.0, 4.0])
    _, grad = weighted_loss(pred, target, w)
    np.testing.assert_allclose(grad[1], 4 * grad[0])
    v1 = weighted_loss(pred[:1], target[:1], w[:1])[0]
    v2 = weighted_loss(pred[1:], target[1:], w[1:])[0]
    assert v2 == pytest.approx(4 * v1)


def test_loss_errors():
    with pytest.raises(ValueError):
        weighted_loss(np.zeros((0, 3)), np.zeros((0, 3)), np.ones(0))
    with pytest.raises(NonFiniteError):
        weighted_loss(np.full((1, 3), np.nan), np.zeros((1, 3)), np.ones(1))


def test_ray_weights_default_and_explicit():
    np.testing.assert_allclose(ray_weights([1, 2, 4, 8]), np.array([1, 4, 16, 64]) / 21.25)
    np.testing.assert_allclose(ray_weights([1, 2], ((1, 3.0), (2, 1.0))), [1.5, 0.5])


def test_scale_weight_balance(tiny_data):
    rays = training_rays(tiny_data, tiny_cfg())
    totals = [rays.weight[rays.factor == f].sum() for f in (1, 2, 4, 8)]
    assert max(totals) / min(totals) - 1 < 0.01
    assert rays.weight.mean() == pytest.approx(1.0)


# ------------------------------------------------------------------ gradients


def test_zero_residual_gives_zero_gradients(tiny_data):
    cfg = tiny_cfg()
    fld = RadianceField.create(cfg.field_config(), np.random.default_rng(0), build_index_maps(cfg, tiny_data.train[1][0].camera))
    batch = generate_rays(tiny_data.train[1][0].camera, [[3, 4], [8, 8]])
    batch.rgb = render_rays(fld, batch, 8, None, 0.0, need_grad=False)[0]
    _, grads, _ = backward(batch, fld, 8)
    for name, g in grads.items():
        assert not np.any(g), name


def test_frozen_kernels_get_zero_gradients(tiny_data):
    cfg = tiny_cfg()
    fld = RadianceField.create(cfg.field_config(), np.random.default_rng(0), build_index_maps(cfg, tiny_data.train[1][0].camera))
    batch = training_rays(tiny_data, cfg).take(np.arange(0, 600, 37))
    frozen = set(fld.kernel_names())
    _, grads, _ = backward(batch, fld, 8, frozen=frozen)
    assert frozen
    for n in frozen:
        assert not np.any(grads[n])
    _, free, _ = backward(batch, fld, 8)
    assert any(np.any(free[n]) for n in frozen)


@pytest.mark.parametrize("family,kind", [("vm", "disc"), ("planes", "2d")])
def test_gradient_check_small(tiny_data, family, kind):
    cfg = tiny_cfg(family=family, scale_kind=kind, scales=2, stdevs=(1.0, 2.0), factors=(1, 2), density_shift=0.0)
    cam = tiny_data.train[1][0].camera
    fld = RadianceField.create(cfg.field_config(), np.random.default_rng(3), build_index_maps(cfg, cam))
    batch = generate_rays(cam, [[5, 7], [10, 6]])
    batch.rgb = np.array([[0.9, 0.1, 0.3], [0.2, 0.7, 0.4]])
    report = gradient_check(fld, batch, n_samples=8, max_entries=6)
    assert report.passed, report.errors


# ------------------------------------------------------------------ adam


def test_adam_first_step_closed_form(rng):
    p = {"a": rng.standard_normal(5)}
    g = {"a": rng.standard_normal(5)}
    before = p["a"].copy()
    st = AdamState()
    step(st, p, g, {"a": 0.1})
    np.testing.assert_allclose(p["a"] - before, -0.1 * g["a"] / (np.abs(g["a"]) + st.eps), rtol=1e-12)


def test_adam_zero_gradient(rng):
    p = {"a": rng.standard_normal(4)}
    before = p["a"].copy()
    st = AdamState()
    step(st, p, {"a": np.zeros(4)}, {"a": 0.1})
    np.testing.assert_array_equal(p["a"], before)
    # later zero-gradient steps only decay the moments
    step(st, p, {"a": np.ones(4)}, {"a": 0.1})
    m, v = st.m["a"].copy(), st.v["a"].copy()
    step(st, p, {"a": np.zeros(4)}, {"a": 0.1})
    np.testing.assert_allclose(st.m["a"], 0.9 * m, rtol=1e-15)
    np.testing.assert_allclose(st.v["a"], 0.99 * v, rtol=1e-15)


def test_adam_recurrence(rng):
    p = {"a": rng.standard_normal(3)}
    gs = [rng.standard_normal(3) for _ in range(4)]
    x = p["a"].copy()
    m = np.zeros(3)
    v = np.zeros(3)
    st = AdamState()
    for t, g in enumerate(gs, 1):
        step(st, p, {"a": g}, {"a": 0.05})
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        x = x - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.99**t)) + 1e-8)
        np.testing.assert_allclose(p["a"], x, rtol=1e-13)


def test_adam_skip_and_lrs():
    p = {"a": np.ones(2), "b": np.ones(2)}
    step(AdamState(), p, {"a": np.ones(2), "b": np.ones(2)}, {"a": 0.1, "b": 0.2}, skip={"a"})
    np.testing.assert_array_equal(p["a"], 1.0)
    np.testing.assert_allclose(p["b"], 0.8, rtol=1e-7)
    cfg = tiny_cfg()
    assert block_lr("density.bank0.vec_x", cfg) == cfg.lr_kernel
    assert block_lr("appearance.mat_yz", cfg) == cfg.lr_grid
    assert block_lr("decoder.w1", cfg) == block_lr("basis", cfg) == cfg.lr_decoder


# ------------------------------------------------------------------ run


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_cfg(upsample=((5, (8, 8, 8)),), kernel_start_iteration=2)
    with pytest.raises(ValueError):
        tiny_cfg(lr_grid=0.0)
    with pytest.raises(ValueError):
        tiny_cfg(loss_weights=(1.0,))
    with pytest.raises(ValueError):
        tiny_cfg(iterations=-1)


def test_index_maps_hit_training_scales(tiny_data):
    cfg = tiny_cfg()
    (m,) = build_index_maps(cfg, tiny_data.train[1][0].camera)
    assert [m(discrete_scale(v[0].camera)) for _, v in sorted(tiny_data.train.items())] == [0.0, 1.0, 2.0, 3.0]
    (c,) = build_index_maps(cfg.replace(scale_kind="cont", reference_distance=4.0), tiny_data.train[1][0].camera)
    np.testing.assert_allclose(c.anchors, np.array(m.anchors) * 4.0)
    p, s = build_index_maps(cfg.replace(scale_kind="2d"), tiny_data.train[1][0].camera)
    assert s.scales == 4 and all(2.6 < a < 5.4 for a in s.anchors)


def test_zero_iterations_is_initialization(tiny_data):
    cfg = tiny_cfg(iterations=0)
    res = run(cfg, tiny_data)
    ref = RadianceField.create(
        cfg.field_config(), np.random.default_rng(cfg.seed), build_index_maps(cfg, tiny_data.train[1][0].camera)
    )
    assert res.rows == []
    for k, v in ref.parameters().items():
        np.testing.assert_array_equal(res.field.parameters()[k], v)


def _strip_seconds(rows):
    return [{k: v for k, v in r.items() if k != "seconds"} for r in rows]


def test_run_is_deterministic(tiny_data):
    cfg = tiny_cfg(upsample=((2, (8, 8, 8)),), kernel_start_iteration=3)
    a, b = run(cfg, tiny_data), run(cfg, tiny_data)
    assert _strip_seconds(a.rows) == _strip_seconds(b.rows)
    pa, pb = a.field.parameters(), b.field.parameters()
    for k in pa:
        np.testing.assert_array_equal(pa[k], pb[k])
    assert a.field.config.resolution == (8, 8, 8)


def test_kernels_bitwise_constant_until_start(tiny_data):
    cfg = tiny_cfg(iterations=4, kernel_start_iteration=10)
    res = run(cfg, tiny_data)
    init = run(cfg.replace(iterations=0), tiny_data).field.parameters()
    params = res.field.parameters()
    for n in res.field.kernel_names():
        np.testing.assert_array_equal(params[n], init[n])
    assert not np.array_equal(params["density.vec_x"], init["density.vec_x"])


def test_fixed_kernels_never_move(tiny_data):
    res = run(tiny_cfg(learn_kernels=False), tiny_data)
    init = run(tiny_cfg(iterations=0), tiny_data).field.parameters()
    for n in res.field.kernel_names():
        np.testing.assert_array_equal(res.field.parameters()[n], init[n])


def test_nan_aborts_with_last_good_state(tiny_data):
    bad = copy.deepcopy(tiny_data)
    for views in bad.train.values():
        for v in views:
            v.image[...] = np.nan
    with pytest.raises(TrainingAborted) as info:
        run(tiny_cfg(), bad)
    for arr in info.value.result.field.parameters().values():
        assert np.all(np.isfinite(arr))


def test_metrics_csv_columns(tiny_data):
    res = run(tiny_cfg(eval_every=4, eval_views=1, eval_samples=8), tiny_data)
    rows = list(csv.DictReader(io.StringIO(metrics_csv(res.rows))))
    assert list(rows[0]) == ["iteration", "loss", "train_psnr", "eval_psnr_x1", "eval_psnr_x2", "eval_psnr_x4", "eval_psnr_x8", "seconds"]
    assert [int(r["iteration"]) for r in rows] == [0, 2, 4, 5]
    assert float(rows[-1]["eval_psnr_x8"]) > 0 and rows[1]["eval_psnr_x1"] == ""
    assert float(rows[0]["loss"]) == res.rows[0]["loss"]
    assert metrics_csv([]) == ""


def test_window_means():
    np.testing.assert_array_equal(window_means(np.arange(10.0), 3), [1.0, 4.0, 7.0])
