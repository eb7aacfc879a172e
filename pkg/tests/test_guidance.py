import json

import numpy as np
import pytest

from guidelab import autodiff as ad
from guidelab import diffusion as df
from guidelab import guidance as gd
from guidelab import scenes
from guidelab import segmentation as seg

from fd import fd_gradient, max_rel_err


@pytest.fixture(scope="module")
def sched():
    return df.build_schedule(40, 1e-3, 0.25)


@pytest.fixture(scope="module")
def tiny_world(sched):
    """Small trained-ish models plus one scene, shared across tests."""
    cfg = scenes.SceneConfig(seed=21, size=16, min_objects=1, max_objects=2,
                             min_radius=3, max_radius=4)
    data = scenes.gen_dataset(cfg, 4)
    scorer = seg.train_seg(data, None, 0.0, steps=120, seed=0, width=8, log_every=0)
    pairs = [
        (s.image, scenes.make_condition(s, s.instances[0], cfg.num_classes).channels())
        for s in data
    ]
    denoiser, _ = df.train_denoiser(pairs, sched, steps=150, seed=0, width=8, log_every=0)
    return cfg, data, scorer, denoiser


def region_of(sample):
    return sample.instances[0].mask.astype(np.float64)


# -- loss values ---------------------------------------------------------------


def test_entropy_uniform_maximum():
    probs = np.full((4, 3, 3), 0.25)
    region = np.ones((3, 3))
    got = gd.loss_entropy(ad.Tensor(probs), region)
    assert got.item() == pytest.approx(np.log(4), abs=1e-9)


def test_entropy_one_hot_minimum():
    probs = np.zeros((4, 2, 2))
    probs[1] = 1.0
    got = gd.loss_entropy(ad.Tensor(probs), np.ones((2, 2)))
    assert got.item() == pytest.approx(0.0, abs=1e-9)


def test_entropy_half_half():
    probs = np.array([[[0.5]], [[0.5]]])
    got = gd.loss_entropy(ad.Tensor(probs), np.ones((1, 1)))
    assert got.item() == pytest.approx(np.log(2), abs=1e-12)


def test_entropy_empty_region_rejected():
    with pytest.raises(ValueError):
        gd.loss_entropy(ad.Tensor(np.full((2, 2, 2), 0.5)), np.zeros((2, 2)))


def test_ce_correct_one_hot_is_zero():
    gt = np.array([[1, 0], [2, 1]])
    probs = np.eye(3)[gt].transpose(2, 0, 1)
    got = gd.loss_ce(ad.Tensor(probs), gt, np.ones((2, 2)))
    assert got.item() == pytest.approx(0.0, abs=1e-9)


def test_ce_uniform_is_log_c():
    gt = np.zeros((2, 2), dtype=int)
    probs = np.full((4, 2, 2), 0.25)
    got = gd.loss_ce(ad.Tensor(probs), gt, np.ones((2, 2)))
    assert got.item() == pytest.approx(np.log(4), abs=1e-12)


def test_ce_two_pixel_hand_value():
    gt = np.array([[0, 0]])
    probs = np.stack([np.array([[0.5, 0.25]]), np.array([[0.5, 0.75]])])
    got = gd.loss_ce(ad.Tensor(probs), gt, np.ones((1, 2)))
    assert got.item() == pytest.approx(-(np.log(0.5) + np.log(0.25)) / 2, abs=1e-12)
    assert got.item() == pytest.approx(1.0397, abs=1e-4)


def test_ce_rejects_out_of_range_class():
    with pytest.raises(ValueError):
        gd.loss_ce(ad.Tensor(np.full((2, 1, 1), 0.5)), np.array([[5]]), np.ones((1, 1)))


def test_mcd_identical_passes_zero():
    p = ad.Tensor(np.full((3, 2, 2), 1 / 3))
    got = gd.loss_mcd([p, p, p], np.ones((2, 2)))
    assert got.item() == 0.0


def test_mcd_two_pass_hand_value():
    a = ad.Tensor(np.array([[[0.2]]]))
    b = ad.Tensor(np.array([[[0.4]]]))
    got = gd.loss_mcd([a, b], np.ones((1, 1)))
    assert got.item() == pytest.approx(0.01, abs=1e-15)


def test_mcd_matches_variance_oracle():
    rng = np.random.default_rng(0)
    maps = [rng.random((3, 4, 4)) for _ in range(3)]
    region = (rng.random((4, 4)) < 0.7).astype(float)
    region[0, 0] = 1.0
    got = gd.loss_mcd([ad.Tensor(m) for m in maps], region)
    stack = np.stack(maps)
    var = stack.var(axis=0, ddof=0)
    expect = var[:, region.astype(bool)].mean()
    assert got.item() == pytest.approx(expect, abs=1e-12)


def test_mcd_requires_two_passes():
    with pytest.raises(ValueError):
        gd.loss_mcd([ad.Tensor(np.ones((2, 2, 2)))], np.ones((2, 2)))


# -- schedulers -----------------------------------------------------------------


def test_schedule_factor_values(sched):
    flat = df.NoiseSchedule(beta=np.array([0.1]), alpha=np.array([0.9]),
                            alpha_bar=np.array([0.9]))
    assert gd.schedule_factor("constant", 0, flat) == 1.0
    assert gd.schedule_factor("early", 0, flat) == pytest.approx(0.9)
    assert gd.schedule_factor("late", 0, flat) == pytest.approx(np.sqrt(0.1))


def test_schedule_factor_identity(sched):
    for t in range(sched.steps):
        early = gd.schedule_factor("early", t, sched)
        late = gd.schedule_factor("late", t, sched)
        assert abs(early + late**2 - 1.0) < 1e-12


def test_schedule_factor_errors(sched):
    with pytest.raises(ValueError):
        gd.schedule_factor("weird", 0, sched)
    with pytest.raises(ValueError):
        gd.schedule_factor("early", sched.steps, sched)


def test_guidance_spec_validation():
    with pytest.raises(ValueError):
        gd.GuidanceSpec(loss_kind="bogus")
    with pytest.raises(ValueError):
        gd.GuidanceSpec(loss_kind="entropy", eta=1.0)  # missing region
    with pytest.raises(ValueError):
        gd.GuidanceSpec(loss_kind="entropy", eta=-1.0, region=np.ones((2, 2)))
    with pytest.raises(ValueError):
        gd.GuidanceSpec(loss_kind="mcd", mc_n=1, region=np.ones((2, 2)))
    with pytest.raises(ValueError):
        gd.GuidanceSpec(loss_kind="entropy", schedule="sometimes", region=np.ones((2, 2)))


# -- guided stepping --------------------------------------------------------------


def test_guided_step_eta_zero_bitwise_identity(sched, tiny_world):
    cfg, data, scorer, denoiser = tiny_world
    sample = data[0]
    cond = scenes.make_condition(sample, sample.instances[0], cfg.num_classes)
    rng = np.random.default_rng(3)
    x_t = rng.standard_normal((1, 16, 16))
    spec = gd.GuidanceSpec(loss_kind="entropy", eta=0.0, region=region_of(sample))
    got, trace = gd.guided_step(
        x_t, 20, 19, denoiser, scorer, cond.channels(), spec, sched,
        gt_mask=sample.class_mask, w=2.0, mc_rng=np.random.default_rng(0),
    )
    with ad.no_grad():
        eps_c = denoiser.predict(ad.Tensor(x_t), 20, cond.channels(), sched)
        eps_u = denoiser.predict(ad.Tensor(x_t), 20, None, sched)
        eps = df.cfg_mix(eps_c, eps_u, 2.0)
        ref = df.ddim_step(ad.Tensor(x_t), eps, 20, 19, sched)
    assert got.tobytes() == ref.data.tobytes()
    assert trace.loss is not None and trace.eta_t == 0.0


def test_guided_step_loss_none_same_as_eta_zero(sched, tiny_world):
    cfg, data, scorer, denoiser = tiny_world
    sample = data[0]
    cond = scenes.make_condition(sample, sample.instances[0], cfg.num_classes)
    x_t = np.random.default_rng(4).standard_normal((1, 16, 16))
    none_spec = gd.GuidanceSpec(loss_kind="none")
    zero_spec = gd.GuidanceSpec(loss_kind="ce", eta=0.0, region=region_of(sample))
    a, tr_a = gd.guided_step(x_t, 12, 11, denoiser, scorer, cond.channels(),
                             none_spec, sched, gt_mask=sample.class_mask, w=1.0)
    b, _ = gd.guided_step(x_t, 12, 11, denoiser, scorer, cond.channels(),
                          zero_spec, sched, gt_mask=sample.class_mask, w=1.0)
    assert a.tobytes() == b.tobytes()
    assert tr_a.loss is None


def _composed_loss_fn(spec, scorer, eps_data, t, sched, gt_mask, mc_seed):
    """The exact guidance objective as a function of raw x_t, for FD probing."""

    def f(x_raw):
        with ad.no_grad():
            x0 = df.estimate_clean(ad.Tensor(x_raw), ad.Tensor(eps_data), t, sched)
            if spec.loss_kind == "entropy":
                score = gd.loss_entropy(seg.predict_probs(scorer, x0), spec.region)
            elif spec.loss_kind == "ce":
                score = gd.loss_ce(seg.predict_probs(scorer, x0), gt_mask, spec.region)
            else:
                passes = seg.mc_passes(scorer, x0, spec.mc_n,
                                       rng=np.random.default_rng(mc_seed))
                score = gd.loss_mcd(passes, spec.region)
        return score.item()

    return f


@pytest.mark.parametrize("loss_kind", ["entropy", "ce", "mcd"])
def test_guidance_gradient_matches_finite_differences(sched, tiny_world, loss_kind):
    cfg, data, scorer, denoiser = tiny_world
    rng = np.random.default_rng(8)
    small = scenes.gen_dataset(
        scenes.SceneConfig(seed=31, size=8, min_objects=1, max_objects=1,
                           min_radius=3, max_radius=3), 1)[0]
    region = small.instances[0].mask.astype(float)
    scorer8 = seg.train_seg([small], None, 0.0, steps=60, seed=1, width=8, log_every=0)

    t = 18
    eps = rng.standard_normal((1, 8, 8))
    x_t = df.forward_diffuse(ad.Tensor(small.image[None] * 0.8), t, eps, sched).data
    spec = gd.GuidanceSpec(loss_kind=loss_kind, eta=1.0, region=region, mc_n=3)

    # tape gradient with frozen noise prediction
    x_leaf = ad.Tensor(x_t, requires_grad=True)
    for p in scorer8.parameters():
        p.requires_grad = False
    try:
        x0 = df.estimate_clean(x_leaf, ad.Tensor(eps), t, sched)
        if loss_kind == "entropy":
            score = gd.loss_entropy(seg.predict_probs(scorer8, x0), region)
        elif loss_kind == "ce":
            score = gd.loss_ce(seg.predict_probs(scorer8, x0), small.class_mask, region)
        else:
            score = gd.loss_mcd(
                seg.mc_passes(scorer8, x0, 3, rng=np.random.default_rng(77)), region)
        ad.backward(score)
        analytic = x_leaf.grad.copy()
    finally:
        for p in scorer8.parameters():
            p.requires_grad = True

    f = _composed_loss_fn(spec, scorer8, eps, t, sched, small.class_mask, mc_seed=77)
    numeric = fd_gradient(lambda x: f(x), [x_t.copy()])[0]
    assert max_rel_err(analytic, numeric) < 1e-3


def test_gradient_zero_outside_scorer_receptive_field(sched, tiny_world):
    cfg, data, scorer, denoiser = tiny_world
    sample = data[0]
    region = np.zeros((16, 16))
    region[7:9, 7:9] = 1.0
    rng = np.random.default_rng(9)
    eps = rng.standard_normal((1, 16, 16))
    t = 15
    x_t = df.forward_diffuse(ad.Tensor(sample.image[None] * 0.8), t, eps, sched).data

    x_leaf = ad.Tensor(x_t, requires_grad=True)
    for p in scorer.parameters():
        p.requires_grad = False
    try:
        x0 = df.estimate_clean(x_leaf, ad.Tensor(eps), t, sched)
        score = gd.loss_entropy(seg.predict_probs(scorer, x0), region)
        ad.backward(score)
        g = x_leaf.grad[0]
    finally:
        for p in scorer.parameters():
            p.requires_grad = True

    # scorer is 4 stacked 3x3 convs plus a 1x1 head: radius-4 receptive field
    reach = scenes.binary_dilate(region.astype(bool), 4, diagonal=True)
    assert np.all(g[~reach] == 0.0)
    assert np.any(g[region.astype(bool)] != 0.0)


def test_guided_step_first_order_descent(sched, tiny_world):
    cfg, data, scorer, denoiser = tiny_world
    rng = np.random.default_rng(12)
    wins = 0
    trials = 20
    for trial in range(trials):
        sample = data[trial % len(data)]
        region = region_of(sample)
        t = int(rng.integers(10, 30))
        eps = rng.standard_normal((1, 16, 16))
        x_t = df.forward_diffuse(ad.Tensor(sample.image[None]), t, eps, sched).data

        def region_entropy(x):
            with ad.no_grad():
                x0 = df.estimate_clean(ad.Tensor(x), ad.Tensor(eps), t, sched)
                return gd.loss_entropy(seg.predict_probs(scorer, x0), region).item()

        spec = gd.GuidanceSpec(loss_kind="entropy", eta=0.5, region=region)
        x_leaf = ad.Tensor(x_t, requires_grad=True)
        for p in scorer.parameters():
            p.requires_grad = False
        try:
            x0 = df.estimate_clean(x_leaf, ad.Tensor(eps), t, sched)
            score = gd.loss_entropy(seg.predict_probs(scorer, x0), region)
            ad.backward(ad.neg(score))
            g = x_leaf.grad
        finally:
            for p in scorer.parameters():
                p.requires_grad = True
        stepped = x_t - spec.eta * g
        if region_entropy(stepped) >= region_entropy(x_t):
            wins += 1
    assert wins >= 18, f"entropy increased in only {wins}/{trials} trials"


def test_generate_guided_eta_zero_matches_sample(sched, tiny_world):
    cfg, data, scorer, denoiser = tiny_world
    sample = data[1]
    cond = scenes.make_condition(sample, sample.instances[0], cfg.num_classes)
    for loss_kind in ("none", "entropy", "ce", "mcd"):
        for schedule in ("constant", "early", "late"):
            spec = gd.GuidanceSpec(
                loss_kind=loss_kind, eta=0.0, schedule=schedule,
                region=None if loss_kind == "none" else region_of(sample), mc_n=2,
            )
            img, trace = gd.generate_guided(
                denoiser, scorer, cond, spec, sched, w=1.5, seed=99,
                gt_mask=sample.class_mask,
            )
            ref = df.sample(denoiser, cond, sched, w=1.5, seed=99)
            assert img.tobytes() == ref.tobytes(), (loss_kind, schedule)
            assert len(trace) == sched.steps


def test_generate_guided_trace_contents(sched, tiny_world):
    cfg, data, scorer, denoiser = tiny_world
    sample = data[2]
    cond = scenes.make_condition(sample, sample.instances[0], cfg.num_classes)
    spec = gd.GuidanceSpec(loss_kind="entropy", eta=5.0, schedule="late",
                           region=region_of(sample))
    img, trace = gd.generate_guided(denoiser, scorer, cond, spec, sched, w=1.0,
                                    seed=5, gt_mask=sample.class_mask)
    assert len(trace) == sched.steps
    assert np.all(img >= -1) and np.all(img <= 1)
    for i, tr in enumerate(trace):
        assert tr.step == i
        assert tr.t == sched.steps - 1 - i
        assert tr.eta_t == pytest.approx(5.0 * gd.schedule_factor("late", tr.t, sched))
        assert tr.loss is not None and np.isfinite(tr.loss)
        assert tr.grad_norm is not None and tr.grad_norm >= 0


def test_guided_chain_deterministic(sched, tiny_world):
    cfg, data, scorer, denoiser = tiny_world
    sample = data[0]
    cond = scenes.make_condition(sample, sample.instances[0], cfg.num_classes)
    spec = gd.GuidanceSpec(loss_kind="mcd", eta=3.0, region=region_of(sample), mc_n=2)
    a, _ = gd.generate_guided(denoiser, scorer, cond, spec, sched, w=1.0, seed=17,
                              gt_mask=sample.class_mask)
    b, _ = gd.generate_guided(denoiser, scorer, cond, spec, sched, w=1.0, seed=17,
                              gt_mask=sample.class_mask)
    assert np.array_equal(a, b)


def test_backprop_through_denoiser_changes_gradient(sched, tiny_world):
    cfg, data, scorer, denoiser = tiny_world
    sample = data[0]
    cond = scenes.make_condition(sample, sample.instances[0], cfg.num_classes)
    x_t = np.random.default_rng(14).standard_normal((1, 16, 16))
    outs = {}
    for flag in (False, True):
        spec = gd.GuidanceSpec(loss_kind="entropy", eta=10.0, region=region_of(sample),
                               backprop_through_denoiser=flag)
        out, tr = gd.guided_step(x_t, 25, 24, denoiser, scorer, cond.channels(),
                                 spec, sched, gt_mask=sample.class_mask, w=1.0)
        outs[flag] = out
        assert not tr.skipped
    assert not np.array_equal(outs[False], outs[True])


def test_write_trace_jsonl(tmp_path, sched, tiny_world):
    cfg, data, scorer, denoiser = tiny_world
    sample = data[0]
    cond = scenes.make_condition(sample, sample.instances[0], cfg.num_classes)
    spec = gd.GuidanceSpec(loss_kind="entropy", eta=1.0, region=region_of(sample))
    _, trace = gd.generate_guided(denoiser, scorer, cond, spec, sched, w=1.0, seed=1,
                                  gt_mask=sample.class_mask)
    path = tmp_path / "trace.jsonl"
    gd.write_trace(path, trace)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == sched.steps
    rec = json.loads(lines[0])
    assert set(rec) == {"step", "t", "eta_t", "loss", "grad_norm", "skipped"}
