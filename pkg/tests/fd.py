"""Finite-difference oracles shared by the unit and acceptance suites."""

import numpy as np

from guidelab import autodiff as ad


def fd_gradient(f, arrays, h=1e-5):
    """Central-difference gradient of a scalar function of raw arrays.

    ``f`` is called as ``f(*arrays)`` and must return a float; ``arrays`` are
    mutated in place during probing and restored afterwards.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*arrays)
            flat[i] = orig - h
            fm = f(*arrays)
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(a, b, floor=1e-6):
    """Worst elementwise relative error with an absolute floor for tiny grads."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_op_gradients(build, arrays, tol, h=1e-5, floor=1e-6):
    """Compare tape gradients of ``build`` against central differences.

    ``build`` maps a list of Tensors to a scalar Tensor; the FD side re-runs
    the same forward computation under ``no_grad`` so only the backward pass
    is under test.
    """
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    loss = build(tensors)
    ad.backward(loss)
    analytic = [t.grad.copy() for t in tensors]

    def forward(*raw):
        with ad.no_grad():
            return build([ad.Tensor(a) for a in raw]).item()

    numeric = fd_gradient(forward, [a.copy() for a in arrays], h=h)
    worst = max(max_rel_err(an, nu, floor=floor) for an, nu in zip(analytic, numeric))
    assert worst < tol, f"gradient mismatch: worst rel err {worst:.3e} >= {tol:g}"
    return worst


def _away_from(x, kinks, margin):
    """Shift samples that landed within ``margin`` of any kink point."""
    for k in kinks:
        close = np.abs(x - k) < margin
        x = np.where(close, k + margin * np.sign(x - k + 1e-300) * 2.0, x)
    return x


def op_gradcheck_cases(rng):
    """One randomized gradient-check case per differentiable op.

    Returns a list of (op name, builder, input arrays, tolerance) tuples with
    inputs drawn inside each op's safe domain and away from kinks so the
    central-difference oracle stays valid.
    """
    def shp():
        return tuple(int(rng.integers(1, 5)) for _ in range(int(rng.integers(1, 4))))

    def pair():
        s = shp()
        return rng.normal(size=s), rng.normal(size=s)

    proj_cache = {}

    def proj(t):
        # fixed random projection so the scalar loss probes the full Jacobian
        key = t.shape
        if key not in proj_cache:
            proj_cache[key] = rng.normal(size=key)
        return ad.tsum(ad.mul(t, proj_cache[key]))

    a, b = pair()
    pos = np.abs(rng.normal(size=shp())) + 0.5
    den = rng.normal(size=a.shape)
    den = np.where(np.abs(den) < 0.3, 0.3 * np.sign(den) + (den == 0) * 0.3, den)
    kinky = _away_from(rng.normal(size=shp()), [0.0], 1e-3)
    clampy = _away_from(rng.normal(size=shp()), [-0.5, 0.5], 1e-3)
    m, k, n = (int(rng.integers(1, 5)) for _ in range(3))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h_img, w_img = int(rng.integers(3, 7)), int(rng.integers(3, 7))
    soft = rng.normal(size=(int(rng.integers(2, 5)), int(rng.integers(2, 5))))
    red = rng.normal(size=shp())
    mask_vals = rng.normal(size=(3, 4))
    mask = (rng.random((3, 4)) < 0.6).astype(np.float64)
    if mask.sum() == 0:
        mask[0, 0] = 1.0
    cat_a = rng.normal(size=(2, 3))
    cat_b = rng.normal(size=(4, 3))
    drop_in = rng.normal(size=(4, 5))
    drop_seed = int(rng.integers(0, 2**31))

    return [
        ("add", lambda ts: proj(ad.add(ts[0], ts[1])), [a, b], 1e-4),
        ("sub", lambda ts: proj(ad.sub(ts[0], ts[1])), [a, b], 1e-4),
        ("mul", lambda ts: proj(ad.mul(ts[0], ts[1])), [a, b], 1e-4),
        ("div", lambda ts: proj(ad.div(ts[0], ts[1])), [a.copy(), den], 1e-4),
        ("neg", lambda ts: proj(ad.neg(ts[0])), [a.copy()], 1e-4),
        ("exp", lambda ts: proj(ad.exp(ts[0])), [a.copy()], 1e-4),
        ("log", lambda ts: proj(ad.log(ts[0])), [pos], 1e-4),
        ("sqrt", lambda ts: proj(ad.sqrt(ts[0])), [pos.copy() + 0.1], 1e-4),
        ("clamp_min", lambda ts: proj(ad.clamp_min(ts[0], -0.5)), [clampy], 1e-4),
        ("clamp", lambda ts: proj(ad.clamp(ts[0], -0.5, 0.5)), [clampy.copy()], 1e-4),
        (
            "matmul",
            lambda ts: proj(ad.matmul(ts[0], ts[1])),
            [rng.normal(size=(m, k)), rng.normal(size=(k, n))],
            1e-4,
        ),
        (
            "conv2d",
            lambda ts: proj(ad.conv2d(ts[0], ts[1], padding=1)),
            [rng.normal(size=(cin, h_img, w_img)), rng.normal(size=(cout, cin, 3, 3))],
            1e-4,
        ),
        ("relu", lambda ts: proj(ad.relu(ts[0])), [kinky], 1e-4),
        ("silu", lambda ts: proj(ad.silu(ts[0])), [a.copy()], 1e-4),
        ("softmax", lambda ts: proj(ad.softmax(ts[0], axis=1)), [soft], 1e-4),
        ("log_softmax", lambda ts: proj(ad.log_softmax(ts[0], axis=0)), [soft.copy()], 1e-4),
        ("sum", lambda ts: ad.tsum(ad.mul(ts[0], 1.7)), [red], 1e-4),
        ("sum_axis", lambda ts: proj(ad.tsum(ts[0], axis=0)), [rng.normal(size=(3, 4))], 1e-4),
        ("mean", lambda ts: ad.tmean(ad.mul(ts[0], ts[0])), [red.copy()], 1e-4),
        ("masked_mean", lambda ts: ad.masked_mean(ad.mul(ts[0], ts[0]), mask), [mask_vals], 1e-4),
        ("reshape", lambda ts: proj(ad.reshape(ts[0], (6,))), [rng.normal(size=(2, 3))], 1e-4),
        (
            "concat",
            lambda ts: proj(ad.concat([ts[0], ts[1]], axis=0)),
            [cat_a, cat_b],
            1e-4,
        ),
        (
            "dropout",
            lambda ts: ad.tsum(
                ad.dropout(ts[0], 0.4, np.random.default_rng(drop_seed))
            ),
            [drop_in],
            1e-4,
        ),
    ]
