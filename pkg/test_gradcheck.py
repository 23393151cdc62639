import pytest

import tape
from gradcheck import (ABS_TOL, END_TO_END_TOL, LOSS_TOL, STEP, corr_full_case, corr_truncated_case, end_to_end_case,
                       focal_case, giou_minmax_case, giou_moment_case, run_suite, suite_passed)
from scenes import Rng


@pytest.mark.parametrize("build", [focal_case, giou_minmax_case, giou_moment_case,
                                   corr_truncated_case, corr_full_case])
def test_loss_gradients(build):
    objective, params = build(Rng.keyed(1, 0))
    assert tape.grad_check(objective, params, h=STEP, abs_tol=ABS_TOL) < LOSS_TOL


@pytest.mark.parametrize("converter", ["minmax", "moment"])
def test_end_to_end_gradients(converter):
    objective, params = end_to_end_case(Rng.keyed(2, 0), converter)
    assert tape.grad_check(objective, params, h=STEP, abs_tol=ABS_TOL) < END_TO_END_TOL


def test_suite_reports_every_case():
    results = run_suite(seed=0)
    assert [r.name for r in results] == ["focal", "giou_minmax", "giou_moment", "corr_truncated",
                                         "corr_untruncated", "end_to_end_minmax", "end_to_end_moment"]
    assert suite_passed(results)
