import math

import numpy as np
import pytest
import torch

from gradcheck import analytic_grad, finite_diff_grad, relative_error
from roigan.losses import (
    LossReport,
    LossWeights,
    cls_loss_fake,
    cls_loss_real,
    critic_loss,
    crossing_loss,
    generator_adv_loss,
    gradient_penalty,
    mask_whole,
    reconstruction_loss,
    shape_consistency_loss,
    total_d_loss,
    total_g_loss,
    total_gs_loss,
)


LN6 = math.log(6.0)


# ---------------------------------------------------------------------------
# adversarial terms


def test_critic_loss_closed_forms():
    real = torch.ones(4, 1, 3, 3)
    fake = torch.zeros(4, 1, 3, 3)
    assert critic_loss(real, fake).item() == pytest.approx(-1.0)
    assert critic_loss(real, real).item() == pytest.approx(0.0)
    assert generator_adv_loss(torch.full((4, 1, 3, 3), 2.5)).item() == pytest.approx(-2.5)


def test_gradient_penalty_linear_critic():
    # critic f(x) = sum_i x_i has gradient all-ones: penalty = (sqrt(d) - 1)^2
    rng = torch.Generator().manual_seed(0)
    for d in (4, 9, 25):
        real = torch.randn(6, d, generator=torch.Generator().manual_seed(1))
        fake = torch.randn(6, d, generator=torch.Generator().manual_seed(2))
        gp = gradient_penalty(lambda v: v.sum(dim=1), real, fake, rng)
        assert gp.item() == pytest.approx((math.sqrt(d) - 1.0) ** 2, rel=1e-6)


def test_gradient_penalty_unit_gradient_critic_is_zero():
    rng = torch.Generator().manual_seed(3)
    real = torch.randn(5, 8)
    fake = torch.randn(5, 8)
    gp = gradient_penalty(lambda v: v[:, 0], real, fake, rng)
    assert gp.item() == pytest.approx(0.0, abs=1e-12)


def test_gradient_penalty_output_scale():
    # doubling the critic maps (g-1)^2 -> (2g-1)^2 pointwise
    rng = torch.Generator().manual_seed(4)
    d = 9
    real, fake = torch.randn(4, d), torch.randn(4, d)
    gp2 = gradient_penalty(lambda v: 2.0 * v.sum(dim=1), real, fake, rng)
    assert gp2.item() == pytest.approx((2 * math.sqrt(d) - 1.0) ** 2, rel=1e-6)


def test_gradient_penalty_supports_second_order():
    # d(penalty)/dw for f(x) = <w, x> equals 2(|w|-1) w / |w|
    w = torch.randn(12, dtype=torch.double).requires_grad_(True)
    rng = torch.Generator().manual_seed(5)
    real = torch.randn(3, 12, dtype=torch.double)
    fake = torch.randn(3, 12, dtype=torch.double)
    gp = gradient_penalty(lambda v: v @ w, real, fake, rng)
    gp.backward()
    norm = w.detach().norm()
    expected = 2.0 * (norm - 1.0) * w.detach() / norm
    assert relative_error(w.grad, expected) < 1e-9


def test_gradient_penalty_shape_mismatch():
    rng = torch.Generator().manual_seed(0)
    with pytest.raises(ValueError):
        gradient_penalty(lambda v: v.sum(dim=1), torch.zeros(2, 3), torch.zeros(2, 4), rng)


# ---------------------------------------------------------------------------
# classification terms


def test_cls_real_uniform_logits():
    logits = torch.zeros(4, 6)
    s = torch.zeros(4, dtype=torch.long)
    s_fake = torch.full((4,), 3, dtype=torch.long)
    for lam in (0.01, 0.5):
        val = cls_loss_real(logits, s, logits, s_fake, lam)
        assert val.item() == pytest.approx(LN6 * (1 + lam), rel=1e-6)


def test_cls_real_confident_goes_to_zero():
    logits = torch.full((2, 6), -50.0)
    logits[:, 1] = 50.0
    s = torch.ones(2, dtype=torch.long)
    val = cls_loss_real(logits, s, logits, s, 0.0)
    assert val.item() == pytest.approx(0.0, abs=1e-6)


def test_cls_real_lambda_zero_is_plain_ce():
    rng = torch.Generator().manual_seed(6)
    logits = torch.randn(5, 6, generator=rng)
    junk = torch.randn(5, 6, generator=rng)
    s = torch.tensor([0, 1, 2, 0, 1])
    got = cls_loss_real(logits, s, junk, s + 3, 0.0)
    want = torch.nn.functional.cross_entropy(logits, s)
    assert got.item() == pytest.approx(want.item(), rel=1e-7)


def test_cls_fake_uniform_and_confident():
    logits = torch.zeros(3, 6)
    t = torch.tensor([0, 1, 2])
    assert cls_loss_fake(logits, t).item() == pytest.approx(LN6, rel=1e-6)
    conf = torch.full((1, 6), -40.0)
    conf[0, 2] = 40.0
    assert cls_loss_fake(conf, torch.tensor([2])).item() == pytest.approx(0.0, abs=1e-6)


def test_cls_fake_permutation_of_tied_logits():
    # permuting the fake-category logits that share one value changes nothing
    logits = torch.tensor([[1.0, 0.2, -0.3, 0.7, 0.7, 0.7]])
    t = torch.tensor([1])
    base = cls_loss_fake(logits, t).item()
    perm = logits.clone()
    perm[0, [3, 4, 5]] = logits[0, [5, 3, 4]]
    assert cls_loss_fake(perm, t).item() == pytest.approx(base, rel=1e-7)


def test_cls_losses_shift_invariant():
    rng = torch.Generator().manual_seed(7)
    logits = torch.randn(4, 6, generator=rng)
    t = torch.tensor([0, 2, 1, 0])
    shifted = logits + 13.7
    assert cls_loss_fake(shifted, t).item() == pytest.approx(
        cls_loss_fake(logits, t).item(), rel=1e-5
    )
    val_a = cls_loss_real(logits, t, logits, t + 3, 0.3).item()
    val_b = cls_loss_real(shifted, t, shifted, t + 3, 0.3).item()
    assert val_b == pytest.approx(val_a, rel=1e-5)


# ---------------------------------------------------------------------------
# pixel losses


def test_shape_consistency_closed_forms():
    b = torch.cat([torch.ones(1, 1, 2, 2), torch.zeros(1, 1, 2, 2)], dim=-1)
    assert shape_consistency_loss(b, b).item() == pytest.approx(0.0)
    half = torch.full_like(b, 0.5)
    assert shape_consistency_loss(half, b).item() == pytest.approx(0.25)
    assert shape_consistency_loss(torch.zeros(2, 1, 3, 3), torch.ones(2, 1, 3, 3)).item() == pytest.approx(1.0)


def test_reconstruction_closed_forms():
    x = torch.randn(3, 1, 4, 4)
    assert reconstruction_loss(x, x).item() == pytest.approx(0.0)
    assert reconstruction_loss(x + 0.1, x).item() == pytest.approx(0.1, rel=1e-5)
    y = torch.randn(3, 1, 4, 4)
    assert reconstruction_loss(x, y).item() == pytest.approx(reconstruction_loss(y, x).item())


def test_crossing_loss_closed_forms():
    # stream agreement: whole restricted to the mask equals the area output
    rng = torch.Generator().manual_seed(8)
    whole = torch.randn(2, 1, 4, 4, generator=rng)
    mask = (torch.rand(2, 1, 4, 4, generator=rng) > 0.5).float()
    area = mask_whole(whole, mask)
    assert crossing_loss(whole, mask, area).item() == pytest.approx(0.0)

    whole = torch.tensor([[[[0.5, 0.3], [0.2, -0.7]]]])
    mask = torch.tensor([[[[1.0, 0.0], [0.0, 0.0]]]])
    area = torch.full((1, 1, 2, 2), -1.0)
    assert crossing_loss(whole, mask, area).item() == pytest.approx(0.375, rel=1e-6)


def test_crossing_invariant_outside_mask():
    rng = torch.Generator().manual_seed(9)
    whole = torch.randn(1, 1, 4, 4, generator=rng)
    mask = torch.zeros(1, 1, 4, 4)
    mask[0, 0, 1, 1] = 1.0
    area = mask_whole(whole, mask)
    base = crossing_loss(whole, mask, area).item()
    perturbed = whole + (1 - mask) * torch.randn(1, 1, 4, 4, generator=rng)
    assert crossing_loss(perturbed, mask, area).item() == pytest.approx(base, abs=1e-7)


def test_pixel_losses_nonnegative_with_equality_cases():
    rng = torch.Generator().manual_seed(10)
    for _ in range(5):
        a = torch.randn(2, 1, 3, 3, generator=rng)
        b = torch.randn(2, 1, 3, 3, generator=rng)
        assert reconstruction_loss(a, b).item() >= 0.0
        mask = (torch.rand(2, 1, 3, 3, generator=rng) > 0.5).float()
        assert crossing_loss(a, mask, b).item() >= 0.0


# ---------------------------------------------------------------------------
# totals and report composition


def test_total_d_loss_cases():
    w = LossWeights()
    assert total_d_loss(0.0, 0.0, 0.0, w) == pytest.approx(0.0)
    assert total_d_loss(0.5, 0.2, 1.0, w) == pytest.approx(3.5)
    w2 = LossWeights(lambda_cls_r=2.0)
    assert total_d_loss(0.5, 0.2, 1.0, w2) - total_d_loss(0.5, 0.2, 0.0, w2) == pytest.approx(2.0)


def test_total_g_loss_cases():
    w = LossWeights()
    val = total_g_loss(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.01, w)
    assert val == pytest.approx(6.5)
    # zero crossing term: independent of lambda_cross
    for lam in (0.0, 50.0, 500.0):
        wl = LossWeights(lambda_cross=lam)
        assert total_g_loss(1.0, 0.0, 0.5, 0.0, 0.2, 0.0, 0.0, wl) == pytest.approx(1.7)
    assert total_gs_loss(0.1, 0.3) == pytest.approx(0.4)


def test_report_composition_identity():
    rng = np.random.default_rng(11)
    for _ in range(50):
        w = LossWeights(
            lambda_cls_r=rng.uniform(0, 3),
            lambda_cls_f=rng.uniform(0, 3),
            lambda_rec=rng.uniform(0, 3),
            lambda_cross=rng.uniform(0, 100),
            lambda_u=rng.uniform(0, 1),
            lambda_gp=rng.uniform(0, 20),
        )
        vals = {k: rng.normal() for k in (
            "adv_x", "adv_r", "gp_x", "gp_r", "cls_r_x", "cls_r_r",
            "cls_f_x", "cls_f_r", "shape_x", "shape_r", "rec_x", "rec_r",
            "cross", "g_adv_x", "g_adv_r",
        )}
        vals["gp_x"], vals["gp_r"] = abs(vals["gp_x"]), abs(vals["gp_r"])
        report = LossReport(
            **vals,
            total_Dx=total_d_loss(vals["adv_x"], vals["gp_x"], vals["cls_r_x"], w),
            total_Dr=total_d_loss(vals["adv_r"], vals["gp_r"], vals["cls_r_r"], w),
            total_G=total_g_loss(
                vals["g_adv_x"], vals["g_adv_r"], vals["cls_f_x"], vals["cls_f_r"],
                vals["rec_x"], vals["rec_r"], vals["cross"], w,
            ),
            total_GS=total_gs_loss(vals["shape_x"], vals["shape_r"]),
        )
        recon_dx = report.adv_x + w.lambda_gp * report.gp_x + w.lambda_cls_r * report.cls_r_x
        recon_g = (
            report.g_adv_x + report.g_adv_r
            + w.lambda_cls_f * (report.cls_f_x + report.cls_f_r)
            + w.lambda_rec * (report.rec_x + report.rec_r)
            + w.lambda_cross * report.cross
        )
        assert abs(report.total_Dx - recon_dx) <= 1e-6 * max(abs(recon_dx), 1.0)
        assert abs(report.total_G - recon_g) <= 1e-6 * max(abs(recon_g), 1.0)
        assert abs(report.total_GS - (report.shape_x + report.shape_r)) <= 1e-6


def test_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(lambda_rec=-0.1)


def test_csv_row_matches_header():
    from roigan.losses import CSV_FIELDS, CSV_HEADER
    report = LossReport(step=3)
    row = report.csv_row()
    assert len(row.split(",")) == len(CSV_FIELDS)
    assert CSV_HEADER.startswith("step,adv_x,adv_r,gp_x,gp_r,cls_r_x")


# ---------------------------------------------------------------------------
# gradients vs central finite differences (small version; the acceptance
# suite runs the full 20-trial protocol)


def _fd_check(fn, x, tol=1e-3):
    g_a = analytic_grad(fn, x)
    g_fd = finite_diff_grad(fn, x)
    assert relative_error(g_a, g_fd) < tol


def test_gradients_match_finite_differences():
    rng = torch.Generator().manual_seed(12)
    for _ in range(3):
        x = torch.randn(2, 1, 4, 4, generator=rng)
        y = torch.randn(2, 1, 4, 4, generator=rng)
        mask = (torch.rand(2, 1, 4, 4, generator=rng) > 0.5).double()
        logits = torch.randn(3, 6, generator=rng)
        t = torch.tensor([0, 1, 2])

        _fd_check(lambda v: reconstruction_loss(v, y.double()), x)
        _fd_check(lambda v: shape_consistency_loss(torch.sigmoid(v), mask), x)
        _fd_check(lambda v: crossing_loss(v, mask, y.double()), x)
        _fd_check(lambda v: crossing_loss(x.double(), mask, v), y)
        _fd_check(lambda v: cls_loss_fake(v, t), logits)
        _fd_check(lambda v: cls_loss_real(v, t, logits.double(), t + 3, 0.4), logits)
        _fd_check(lambda v: generator_adv_loss(v), x)
        _fd_check(lambda v: critic_loss(v, y.double()), x)
