"""Acquisition-style losses and the guided reverse-diffusion step.

At every denoising step the chain estimates the clean image, scores it with
the segmentation model, and nudges the current sample along the gradient
that INCREASES the chosen informativeness measure (prediction entropy,
cross-entropy against the known labels, or MC-dropout committee variance)
over the redrawn region.  The applied update is written as descent on the
negated measure, so one sign convention covers all three losses.

The noise prediction is computed once per step and reused for the actual
denoising update after the nudge; by default it is treated as a constant
while differentiating (the estimate is then linear in the current sample),
with ``backprop_through_denoiser`` available to push the gradient through
the noise predictor as well.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .diffusion import (
    ConditionalDenoiser,
    ControlCondition,
    NoiseSchedule,
    cfg_mix,
    ddim_step,
    estimate_clean,
)
from .segmentation import SegmentationModel, mc_passes, predict_probs

log = logging.getLogger(__name__)

LOSS_KINDS = ("none", "entropy", "ce", "mcd")
SCHEDULE_KINDS = ("constant", "early", "late")
PROB_FLOOR = 1e-12


@dataclass
class GuidanceSpec:
    """What to maximize, how hard, and on which schedule.

    ``eta`` is the base strength; the effective per-step strength is
    ``eta * schedule_factor(schedule, t)``.  ``region`` restricts the loss to
    the redrawn instance.  ``mc_n`` is the committee size for the mcd loss.
    """

    loss_kind: str = "none"
    eta: float = 0.0
    schedule: str = "constant"
    mc_n: int = 4
    region: np.ndarray | None = None
    backprop_through_denoiser: bool = False

    def __post_init__(self) -> None:
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.schedule not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.loss_kind == "mcd" and self.mc_n < 2:
            raise ValueError("mcd needs at least 2 passes")
        if self.loss_kind != "none":
            if self.region is None or not np.any(self.region):
                raise ValueError("active guidance needs a nonempty region")
            self.region = np.asarray(self.region, dtype=np.float64)


@dataclass
class StepTrace:
    step: int
    t: int
    eta_t: float
    loss: float | None
    grad_norm: float | None
    skipped: bool = False

    def as_dict(self) -> dict:
        return {
            "step": self.step,
            "t": self.t,
            "eta_t": self.eta_t,
            "loss": self.loss,
            "grad_norm": self.grad_norm,
            "skipped": self.skipped,
        }


# -- losses ---------------------------------------------------------------------


def loss_entropy(probs, region) -> ad.Tensor:
    """Mean per-pixel prediction entropy over the region (to be maximized)."""
    p = ad.clamp_min(ad.as_tensor(probs), PROB_FLOOR)
    ent = ad.neg(ad.tsum(ad.mul(p, ad.log(p)), axis=0))
    return ad.masked_mean(ent, np.asarray(region, dtype=np.float64))


def loss_ce(probs, gt_mask: np.ndarray, region) -> ad.Tensor:
    """Mean cross-entropy against the true labels over the region."""
    probs = ad.as_tensor(probs)
    C = probs.shape[0]
    gt_mask = np.asarray(gt_mask)
    if gt_mask.max() >= C:
        raise ValueError(f"ground-truth class {gt_mask.max()} >= C={C}")
    onehot = np.eye(C)[gt_mask].transpose(2, 0, 1)
    p = ad.clamp_min(probs, PROB_FLOOR)
    ce = ad.neg(ad.tsum(ad.mul(onehot, ad.log(p)), axis=0))
    return ad.masked_mean(ce, np.asarray(region, dtype=np.float64))


def loss_mcd(passes: list, region) -> ad.Tensor:
    """Population variance of committee predictions, averaged over classes
    and region pixels; the gradient flows through every pass."""
    if len(passes) < 2:
        raise ValueError("mcd variance needs at least 2 passes")
    n = len(passes)
    mean = passes[0]
    for p in passes[1:]:
        mean = ad.add(mean, p)
    mean = ad.mul(mean, 1.0 / n)
    var = None
    for p in passes:
        d = ad.sub(p, mean)
        sq = ad.mul(d, d)
        var = sq if var is None else ad.add(var, sq)
    var = ad.mul(var, 1.0 / n)
    return ad.masked_mean(var, np.asarray(region, dtype=np.float64))


def schedule_factor(kind: str, t: int, sched: NoiseSchedule) -> float:
    """Per-step guidance weight derived from the cumulative noise schedule."""
    if not 0 <= t < sched.steps:
        raise ValueError(f"t={t} outside [0, {sched.steps})")
    if kind == "constant":
        return 1.0
    if kind == "early":
        return float(sched.alpha_bar[t])
    if kind == "late":
        return float(np.sqrt(1.0 - sched.alpha_bar[t]))
    raise ValueError(f"unknown schedule kind {kind!r}")


# -- guided stepping --------------------------------------------------------------


@contextlib.contextmanager
def _frozen(params):
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s


def _informativeness(
    spec: GuidanceSpec,
    seg_model: SegmentationModel,
    x0: ad.Tensor,
    gt_mask: np.ndarray | None,
    mc_rng: np.random.Generator,
) -> ad.Tensor:
    if spec.loss_kind == "entropy":
        return loss_entropy(predict_probs(seg_model, x0), spec.region)
    if spec.loss_kind == "ce":
        if gt_mask is None:
            raise ValueError("ce guidance needs the ground-truth class mask")
        return loss_ce(predict_probs(seg_model, x0), gt_mask, spec.region)
    if spec.loss_kind == "mcd":
        passes = mc_passes(seg_model, x0, spec.mc_n, rng=mc_rng)
        return loss_mcd(passes, spec.region)
    raise ValueError(f"no informativeness measure for {spec.loss_kind!r}")


def guided_step(
    x_t: np.ndarray,
    t: int,
    t_prev: int,
    denoiser: ConditionalDenoiser,
    seg_model: SegmentationModel,
    cond_channels: np.ndarray | None,
    spec: GuidanceSpec,
    sched: NoiseSchedule,
    gt_mask: np.ndarray | None = None,
    w: float = 1.0,
    mc_rng: np.random.Generator | None = None,
    step_index: int = 0,
) -> tuple[np.ndarray, StepTrace]:
    """One reverse step with an optional informativeness nudge.

    Order of operations: predict noise (with classifier-free mixing), estimate
    the clean image, differentiate the negated informativeness w.r.t. the
    current sample, nudge, then run the usual deterministic step reusing the
    SAME noise prediction.  A non-finite gradient skips the nudge for this
    step and logs, rather than aborting the chain.
    """
    if mc_rng is None:
        mc_rng = np.random.default_rng(0)
    eta_t = spec.eta * schedule_factor(spec.schedule, t, sched)

    x_leaf = ad.Tensor(x_t, requires_grad=True)
    guidance_params = seg_model.parameters() + denoiser.parameters()
    with _frozen(guidance_params):
        if spec.backprop_through_denoiser:
            eps_c = denoiser.predict(x_leaf, t, cond_channels, sched)
            eps = eps_c if w == 1.0 else cfg_mix(eps_c, denoiser.predict(x_leaf, t, None, sched), w)
        else:
            with ad.no_grad():
                eps_c = denoiser.predict(x_leaf, t, cond_channels, sched)
                eps = eps_c if w == 1.0 else cfg_mix(eps_c, denoiser.predict(x_leaf, t, None, sched), w)

        loss_val = None
        grad_norm = None
        skipped = False
        x_hat_data = x_t
        if spec.loss_kind != "none":
            x0 = estimate_clean(x_leaf, eps if spec.backprop_through_denoiser else eps.detach(),
                                t, sched)
            score = _informativeness(spec, seg_model, x0, gt_mask, mc_rng)
            ad.backward(ad.neg(score))
            g = x_leaf.grad
            loss_val = score.item()
            if np.all(np.isfinite(g)):
                grad_norm = float(np.sqrt(np.sum(g * g)))
                if eta_t != 0.0:
                    x_hat_data = x_t - eta_t * g
            else:
                skipped = True
                log.warning("non-finite guidance gradient at t=%d; skipping nudge", t)

    with ad.no_grad():
        x_prev = ddim_step(ad.Tensor(x_hat_data), eps.detach(), t, t_prev, sched)
    trace = StepTrace(step=step_index, t=t, eta_t=eta_t, loss=loss_val,
                      grad_norm=grad_norm, skipped=skipped)
    return x_prev.data, trace


def generate_guided(
    denoiser: ConditionalDenoiser,
    seg_model: SegmentationModel,
    cond: ControlCondition | None,
    spec: GuidanceSpec,
    sched: NoiseSchedule,
    w: float,
    seed: int,
    gt_mask: np.ndarray | None = None,
    shape: tuple[int, int] | None = None,
) -> tuple[np.ndarray, list[StepTrace]]:
    """Full guided chain; with eta = 0 it matches unguided sampling exactly.

    The initial noise is drawn from the same stream unguided sampling uses,
    and MC-dropout masks come from a separate stream, so turning guidance on
    or off never perturbs the chain's own randomness.
    """
    if cond is None and shape is None:
        raise ValueError("need a condition or an explicit shape")
    ch = cond.channels() if cond is not None else None
    h, wd = ch.shape[1:] if ch is not None else shape
    chain_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    mc_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    x = chain_rng.standard_normal((1, h, wd))
    trace: list[StepTrace] = []
    for i, t in enumerate(range(sched.steps - 1, -1, -1)):
        x, tr = guided_step(
            x, t, t - 1, denoiser, seg_model, ch, spec, sched,
            gt_mask=gt_mask, w=w, mc_rng=mc_rng, step_index=i,
        )
        trace.append(tr)
    return np.clip(x[0], -1.0, 1.0), trace


def write_trace(path, trace: list[StepTrace]) -> None:
    """Line-delimited trace records for the plotting harness."""
    import json

    with open(path, "w") as fh:
        for tr in trace:
            fh.write(json.dumps(tr.as_dict()) + "\n")
