import pytest

from ccda.verify.gradcheck import analytic_grad, run_gradcheck

EXPECTED = {
    "seg_cross_entropy", "dice_loss", "blend_pred", "basic_d1", "basic_adv1",
    "fine_cbce_source[l=0]", "fine_cbce_source[l=1]", "fine_cbce_target[l=0]", "fine_cbce_target[l=1]",
    "fine_losses.d2", "fine_losses.adv2", "fine_losses.d_fine", "fine_losses.adv_fine",
    "coarse_losses.d_coarse", "coarse_losses.adv_coarse", "compose_totals.total_D", "compose_totals.total_ES",
}


def test_every_loss_passes_small_run():
    results = run_gradcheck(seed=1, sizes=(3, 4, 4), instances=2)
    assert {r.name for r in results} == EXPECTED
    assert all(r.passed for r in results), [(r.name, r.max_rel_error) for r in results if not r.passed]


def test_sign_flipped_gradient_is_reported():
    def flipped(case):
        return {k: -v for k, v in analytic_grad(case).items()}

    results = run_gradcheck(seed=0, sizes=(2, 3, 3), instances=1, grad_fn=flipped)
    assert not any(r.passed for r in results)


def test_zero_size_rejected():
    with pytest.raises(ValueError):
        run_gradcheck(sizes=(0, 4, 4), instances=1)
