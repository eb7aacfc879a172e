"""Noise schedule, conditional denoiser, and deterministic reverse stepping.

The denoiser is a small conv net predicting the injected noise from the
noisy image plus constant per-pixel time features.  A parallel control
branch consumes structural conditioning channels (edge map, instance mask,
class value) and feeds the backbone through zero-initialized 1x1
projections, so an untrained model ignores the condition entirely.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint

log = logging.getLogger(__name__)


# -- schedule -----------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise levels: beta, alpha = 1 - beta, and their running product."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.beta)


def build_schedule(steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta ramp from ``beta_start`` to ``beta_end`` over ``steps``."""
    if steps < 2:
        raise ValueError(f"schedule needs at least 2 steps, got {steps}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
        )
    beta = np.linspace(beta_start, beta_end, steps)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _check_t(t: int, sched: NoiseSchedule) -> None:
    if not 0 <= t < sched.steps:
        raise ValueError(f"t={t} outside [0, {sched.steps})")


def forward_diffuse(x0, t: int, eps, sched: NoiseSchedule) -> ad.Tensor:
    """Mix a clean image with noise at level t."""
    _check_t(t, sched)
    ab = sched.alpha_bar[t]
    return ad.add(ad.mul(x0, np.sqrt(ab)), ad.mul(eps, np.sqrt(1.0 - ab)))


def estimate_clean(x_t, eps_hat, t: int, sched: NoiseSchedule, clip: bool = True) -> ad.Tensor:
    """One-shot clean-image estimate from the current sample and predicted noise.

    Clipped to the valid pixel range by default, which is what the scorer
    expects; pass ``clip=False`` for the raw algebraic estimate.
    """
    _check_t(t, sched)
    ab = sched.alpha_bar[t]
    if ab < 1e-8:
        raise ValueError(f"alpha_bar[{t}]={ab:.3e} too small for a stable estimate")
    raw = ad.mul(ad.sub(x_t, ad.mul(eps_hat, np.sqrt(1.0 - ab))), 1.0 / np.sqrt(ab))
    return ad.clamp(raw, -1.0, 1.0) if clip else raw


def ddim_step(x_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule) -> ad.Tensor:
    """Deterministic reverse step from level t to t_prev (t_prev = -1 is clean)."""
    _check_t(t, sched)
    if t_prev >= t:
        raise ValueError(f"t_prev={t_prev} must precede t={t}")
    if t_prev < -1:
        raise ValueError(f"t_prev={t_prev} below -1")
    x0 = estimate_clean(x_t, eps_hat, t, sched, clip=False)
    ab_prev = 1.0 if t_prev < 0 else sched.alpha_bar[t_prev]
    if t_prev < 0:
        return x0
    return ad.add(ad.mul(x0, np.sqrt(ab_prev)), ad.mul(eps_hat, np.sqrt(1.0 - ab_prev)))


def cfg_mix(eps_cond, eps_uncond, w: float) -> ad.Tensor:
    """Classifier-free mix: push the prediction toward the conditional branch."""
    if w < 0:
        raise ValueError(f"cfg weight must be >= 0, got {w}")
    if w == 1.0:
        return ad.as_tensor(eps_cond)
    if w == 0.0:
        return ad.as_tensor(eps_uncond)
    eps_cond, eps_uncond = ad.as_tensor(eps_cond), ad.as_tensor(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("cfg_mix operands must share a shape")
    return ad.add(eps_uncond, ad.mul(ad.sub(eps_cond, eps_uncond), w))


# -- conditioning -------------------------------------------------------------


@dataclass
class ControlCondition:
    """Structural conditioning for one redraw: edges, target region, class value.

    ``edge_map`` is the normalized Sobel magnitude of the real image,
    ``instance_mask`` marks the region being redrawn, and the class enters as
    a constant channel with value ``class_id / num_classes``.
    """

    edge_map: np.ndarray
    instance_mask: np.ndarray
    class_id: int
    num_classes: int

    def __post_init__(self) -> None:
        self.edge_map = np.asarray(self.edge_map, dtype=np.float64)
        self.instance_mask = np.asarray(self.instance_mask, dtype=np.float64)
        if self.edge_map.shape != self.instance_mask.shape:
            raise ValueError("condition channels must share spatial extents")
        if not np.all((self.instance_mask == 0) | (self.instance_mask == 1)):
            raise ValueError("instance mask must be binary")

    def channels(self) -> np.ndarray:
        h, w = self.edge_map.shape
        cls = np.full((h, w), self.class_id / self.num_classes)
        return np.stack([self.edge_map, self.instance_mask, cls])


N_CONTROL_CHANNELS = 3
N_TIME_CHANNELS = 3


def time_channels(t: int, sched: NoiseSchedule, h: int, w: int) -> np.ndarray:
    """Constant feature maps telling the net where it sits in the schedule."""
    ab = sched.alpha_bar[t]
    vals = (t / sched.steps, np.sqrt(ab), np.sqrt(1.0 - ab))
    return np.broadcast_to(np.asarray(vals)[:, None, None], (N_TIME_CHANNELS, h, w)).copy()


# -- denoiser -----------------------------------------------------------------


def _he_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    std = np.sqrt(2.0 / (c_in * k * k))
    return rng.normal(scale=std, size=(c_out, c_in, k, k))


class ConditionalDenoiser:
    """Noise predictor with an additive, zero-initialized control branch."""

    PARAM_NAMES = (
        "w_in", "b_in", "w_mid", "b_mid", "w_mid2", "b_mid2", "w_out", "b_out",
        "w_c1", "b_c1", "w_c2", "b_c2", "w_inj1", "b_inj1", "w_inj2", "b_inj2",
    )

    def __init__(self, width: int = 16, seed: int = 0):
        rng = np.random.default_rng(seed)
        F = width
        cin = 1 + N_TIME_CHANNELS

        def bias(c):
            return np.zeros((c, 1, 1))

        self.width = F
        self.w_in = ad.Tensor(_he_conv(rng, F, cin, 3), requires_grad=True)
        self.b_in = ad.Tensor(bias(F), requires_grad=True)
        self.w_mid = ad.Tensor(_he_conv(rng, F, F, 3), requires_grad=True)
        self.b_mid = ad.Tensor(bias(F), requires_grad=True)
        self.w_mid2 = ad.Tensor(_he_conv(rng, F, F, 3), requires_grad=True)
        self.b_mid2 = ad.Tensor(bias(F), requires_grad=True)
        self.w_out = ad.Tensor(_he_conv(rng, 1, F, 3), requires_grad=True)
        self.b_out = ad.Tensor(bias(1), requires_grad=True)
        self.w_c1 = ad.Tensor(_he_conv(rng, F, N_CONTROL_CHANNELS, 3), requires_grad=True)
        self.b_c1 = ad.Tensor(bias(F), requires_grad=True)
        self.w_c2 = ad.Tensor(_he_conv(rng, F, F, 3), requires_grad=True)
        self.b_c2 = ad.Tensor(bias(F), requires_grad=True)
        # conditioning enters through these; zero so a fresh model ignores it
        self.w_inj1 = ad.Tensor(np.zeros((F, F, 1, 1)), requires_grad=True)
        self.b_inj1 = ad.Tensor(bias(F), requires_grad=True)
        self.w_inj2 = ad.Tensor(np.zeros((F, F, 1, 1)), requires_grad=True)
        self.b_inj2 = ad.Tensor(bias(F), requires_grad=True)

    def parameters(self) -> list[ad.Tensor]:
        return [getattr(self, n) for n in self.PARAM_NAMES]

    def predict(self, x_t, t: int, cond_channels, sched: NoiseSchedule) -> ad.Tensor:
        """Predict the noise component of ``x_t`` at level ``t``.

        ``cond_channels`` is a (3, h, w) array or None; None behaves exactly
        like all-zero conditioning, which is also how conditioning is dropped
        during training.
        """
        x_t = ad.as_tensor(x_t)
        if x_t.data.ndim == 2:
            x_t = ad.reshape(x_t, (1,) + x_t.shape)
        _, h, w = x_t.shape
        if cond_channels is None:
            cond_channels = np.zeros((N_CONTROL_CHANNELS, h, w))
        inp = ad.concat([x_t, ad.Tensor(time_channels(t, sched, h, w))], axis=0)
        c = ad.silu(ad.add(ad.conv2d(cond_channels, self.w_c1, padding=1), self.b_c1))
        c = ad.silu(ad.add(ad.conv2d(c, self.w_c2, padding=1), self.b_c2))
        h1 = ad.silu(ad.add(ad.conv2d(inp, self.w_in, padding=1), self.b_in))
        h1 = ad.add(h1, ad.add(ad.conv2d(c, self.w_inj1, padding=0), self.b_inj1))
        h2 = ad.silu(ad.add(ad.conv2d(h1, self.w_mid, padding=1), self.b_mid))
        h2 = ad.add(h2, ad.add(ad.conv2d(c, self.w_inj2, padding=0), self.b_inj2))
        h3 = ad.silu(ad.add(ad.conv2d(h2, self.w_mid2, padding=1), self.b_mid2))
        return ad.add(ad.conv2d(h3, self.w_out, padding=1), self.b_out)

    # -- persistence ----------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n).data.copy() for n in self.PARAM_NAMES}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n in self.PARAM_NAMES:
            getattr(self, n).data = np.array(state[n], dtype=np.float64)

    def save(self, path) -> None:
        checkpoint.save_tensors(path, self.state())

    @classmethod
    def load(cls, path) -> "ConditionalDenoiser":
        state = checkpoint.load_tensors(path)
        model = cls(width=state["w_in"].shape[0])
        model.load_state(state)
        return model


# -- training and sampling ----------------------------------------------------


def train_denoiser(
    pairs,
    sched: NoiseSchedule,
    steps: int,
    cond_drop_prob: float = 0.1,
    seed: int = 0,
    lr: float = 2e-3,
    width: int = 16,
    log_every: int = 500,
) -> tuple[ConditionalDenoiser, list[float]]:
    """Fit the noise predictor on (image, condition channel) pairs.

    Conditioning is zeroed with probability ``cond_drop_prob`` per draw so the
    same weights double as the unconditional model for classifier-free
    mixing.  A non-finite loss aborts training and restores the last
    snapshot.
    """
    if not 0.0 <= cond_drop_prob <= 1.0:
        raise ValueError(f"cond_drop_prob must be in [0, 1], got {cond_drop_prob}")
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty training stream")
    rng = np.random.default_rng(seed)
    model = ConditionalDenoiser(width=width, seed=int(rng.integers(2**31)))
    opt = ad.AdamW(lr=lr, weight_decay=1e-4)
    losses: list[float] = []
    snapshot = model.state()
    snapshot_every = max(1, steps // 10)
    for step in range(steps):
        image, cond = pairs[int(rng.integers(len(pairs)))]
        x0 = image[None] if image.ndim == 2 else image
        t = int(rng.integers(sched.steps))
        eps = rng.standard_normal(x0.shape)
        dropped = rng.random() < cond_drop_prob
        try:
            x_t = forward_diffuse(ad.Tensor(x0), t, eps, sched)
            pred = model.predict(x_t, t, None if dropped else cond, sched)
            loss = ad.tmean(ad.mul(ad.sub(pred, eps), ad.sub(pred, eps)))
            ad.backward(loss)
            opt.step(model.parameters())
        except FloatingPointError as err:
            log.error("denoiser training diverged at step %d (%s); restoring snapshot", step, err)
            model.load_state(snapshot)
            break
        losses.append(loss.item())
        if (step + 1) % snapshot_every == 0:
            snapshot = model.state()
        if log_every and (step + 1) % log_every == 0:
            recent = float(np.mean(losses[-log_every:]))
            log.info("denoiser step %d/%d mse %.4f", step + 1, steps, recent)
    return model, losses


def sample(
    model: ConditionalDenoiser,
    cond: ControlCondition | None,
    sched: NoiseSchedule,
    w: float,
    seed: int,
    shape: tuple[int, int] | None = None,
) -> np.ndarray:
    """Run the full reverse chain; a pure function of (weights, cond, seed, w)."""
    if cond is None and shape is None:
        raise ValueError("need a condition or an explicit shape")
    ch = cond.channels() if cond is not None else None
    h, wd = ch.shape[1:] if ch is not None else shape
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    with ad.no_grad():
        x = ad.Tensor(rng.standard_normal((1, h, wd)))
        for t in range(sched.steps - 1, -1, -1):
            eps_c = model.predict(x, t, ch, sched)
            eps = eps_c if w == 1.0 else cfg_mix(eps_c, model.predict(x, t, None, sched), w)
            x = ddim_step(x, eps, t, t - 1, sched)
        out = ad.clamp(x, -1.0, 1.0)
    return out.data[0]
