"""Scalar training objectives.

Every loss is a pure function of tensors so it can be checked against closed
forms and finite differences in isolation. Reduction convention: means over
pixels and batch throughout, which keeps the loss weights meaningful.
Adversarial terms follow the Wasserstein-critic recipe (raw scores, gradient
penalty); classification uses a 2n category space of n real-modality labels
followed by n fake-translated-from labels.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .data import BACKGROUND


class NonFiniteLossError(ArithmeticError):
    """Raised when a loss or penalty evaluates to NaN/inf."""


@dataclass(frozen=True)
class LossWeights:
    lambda_cls_r: float = 1.0
    lambda_cls_f: float = 1.0
    lambda_rec: float = 1.0
    lambda_cross: float = 50.0
    lambda_u: float = 0.01
    lambda_gp: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")


# ---------------------------------------------------------------------------
# adversarial (Wasserstein critic)


def critic_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """mean(fake) - mean(real), means over batch and patch positions."""
    return fake_scores.mean() - real_scores.mean()


def generator_adv_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    return -fake_scores.mean()


def gradient_penalty(critic, real_batch, fake_batch, rng: torch.Generator) -> torch.Tensor:
    """Two-sided gradient penalty on random interpolates.

    `critic` maps a batch to scores of any shape; scores are reduced to one
    scalar per example (mean over patch positions) before differentiation.
    The returned scalar keeps its graph so it can be differentiated again
    w.r.t. critic parameters.
    """
    if real_batch.shape != fake_batch.shape:
        raise ValueError(
            f"real batch {tuple(real_batch.shape)} != fake batch {tuple(fake_batch.shape)}"
        )
    b = real_batch.shape[0]
    u_shape = (b,) + (1,) * (real_batch.dim() - 1)
    u = torch.rand(u_shape, generator=rng, dtype=real_batch.dtype)
    mixed = (u * real_batch + (1.0 - u) * fake_batch).detach().requires_grad_(True)
    scores = critic(mixed)
    per_example = scores.reshape(b, -1).mean(dim=1)
    (grads,) = torch.autograd.grad(per_example.sum(), mixed, create_graph=True)
    norms = grads.reshape(b, -1).norm(2, dim=1)
    penalty = ((norms - 1.0) ** 2).mean()
    if not torch.isfinite(penalty):
        raise NonFiniteLossError("gradient penalty is non-finite")
    return penalty


# ---------------------------------------------------------------------------
# classification


def fake_category(source: torch.Tensor, n_modalities: int) -> torch.Tensor:
    """Category id for 'fake, translated from source s': n + s."""
    return source + n_modalities


def cls_loss_real(
    cls_logits_real: torch.Tensor,
    source: torch.Tensor,
    cls_logits_fake: torch.Tensor,
    fake_source: torch.Tensor,
    lambda_u: float,
) -> torch.Tensor:
    """Real-image modality classification plus the untraceable term.

    The critic learns the true modality of real images and, weighted by
    lambda_u, to tag fakes with the modality they were translated from.
    """
    real_term = F.cross_entropy(cls_logits_real, source)
    fake_term = F.cross_entropy(cls_logits_fake, fake_source)
    return real_term + lambda_u * fake_term


def cls_loss_fake(cls_logits_fake: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Generator-side term: fakes should classify as REAL target modality."""
    return F.cross_entropy(cls_logits_fake, target)


# ---------------------------------------------------------------------------
# pixel losses


def shape_consistency_loss(soft_mask: torch.Tensor, stencil: torch.Tensor) -> torch.Tensor:
    if soft_mask.shape != stencil.shape:
        raise ValueError("soft mask and stencil shapes differ")
    return F.mse_loss(soft_mask, stencil)


def reconstruction_loss(reconstructed: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    if reconstructed.shape != original.shape:
        raise ValueError("reconstruction shape differs from original")
    return F.l1_loss(reconstructed, original)


def mask_whole(whole: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Restrict a whole image to the target area, background elsewhere.

    Same background convention (-1) as the dataset's target-area extraction;
    the crossing loss requires both streams to share one masking semantics.
    """
    return torch.where(mask > 0, whole, torch.as_tensor(BACKGROUND, dtype=whole.dtype))


def crossing_loss(whole_fake: torch.Tensor, mask: torch.Tensor, area_fake: torch.Tensor) -> torch.Tensor:
    """L1 between the masked whole-image fake and the target-area fake."""
    if whole_fake.shape != area_fake.shape or whole_fake.shape != mask.shape:
        raise ValueError("crossing loss inputs must share one shape")
    return (mask_whole(whole_fake, mask) - area_fake).abs().mean()


# ---------------------------------------------------------------------------
# totals (one per player)


def total_d_loss(adv, gp, cls_real, weights: LossWeights):
    return adv + weights.lambda_gp * gp + weights.lambda_cls_r * cls_real


def total_g_loss(adv_x, adv_r, cls_f_x, cls_f_r, rec_x, rec_r, crossing, weights: LossWeights):
    return (
        adv_x + adv_r
        + weights.lambda_cls_f * (cls_f_x + cls_f_r)
        + weights.lambda_rec * (rec_x + rec_r)
        + weights.lambda_cross * crossing
    )


def total_gs_loss(shape_x, shape_r):
    return shape_x + shape_r


# ---------------------------------------------------------------------------
# per-step report


CSV_FIELDS = (
    "step",
    "adv_x", "adv_r", "gp_x", "gp_r",
    "cls_r_x", "cls_r_r", "cls_f_x", "cls_f_r",
    "shape_x", "shape_r", "rec_x", "rec_r", "cross",
    "total_Dx", "total_Dr", "total_G", "total_GS",
)
CSV_HEADER = ",".join(CSV_FIELDS)


@dataclass
class LossReport:
    """All scalar components of one training step.

    adv_x / adv_r hold the critic losses from the discriminator step;
    g_adv_x / g_adv_r hold the generator-side adversarial terms (diagnostic
    only, not part of the CSV contract).
    """

    step: int = 0
    adv_x: float = 0.0
    adv_r: float = 0.0
    gp_x: float = 0.0
    gp_r: float = 0.0
    cls_r_x: float = 0.0
    cls_r_r: float = 0.0
    cls_f_x: float = 0.0
    cls_f_r: float = 0.0
    shape_x: float = 0.0
    shape_r: float = 0.0
    rec_x: float = 0.0
    rec_r: float = 0.0
    cross: float = 0.0
    total_Dx: float = 0.0
    total_Dr: float = 0.0
    total_G: float = 0.0
    total_GS: float = 0.0
    g_adv_x: float = 0.0
    g_adv_r: float = 0.0

    def check_finite(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not torch.isfinite(torch.as_tensor(float(v))):
                raise NonFiniteLossError(f"loss component {f.name} is non-finite: {v}")

    def csv_row(self) -> str:
        cells = [str(self.step)]
        cells += [f"{float(getattr(self, k)):.8g}" for k in CSV_FIELDS[1:]]
        return ",".join(cells)
