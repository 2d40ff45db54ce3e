import numpy as np
import pytest

from advcoreset import attacks, models
from advcoreset.attacks import AttackSpec

from conftest import small_mlp


@pytest.fixture(autouse=True)
def feasibility_checks():
    attacks.CHECK_FEASIBLE = True
    yield
    attacks.CHECK_FEASIBLE = False


def linear_state(w, b):
    d, k = w.shape
    spec = models.ModelSpec(arch="mlp", input_dim=d, classes=k, hidden=())
    theta = np.concatenate([np.asarray(w, float).ravel(), np.asarray(b, float)])
    return models.ModelState(spec=spec, theta=theta)


# ---------------------------------------------------------------- project

def test_project_inside_ball_identity():
    center = np.full(4, 0.5)
    point = center + 0.01
    for norm in ("linf", "l2"):
        assert np.array_equal(attacks.project(point, center, norm, 0.1), point)


def test_project_linf_clamp_formula():
    eps = 8 / 255
    center = np.full(6, 0.5)
    point = np.full(6, 0.9)
    out = attacks.project(point, center, "linf", eps)
    assert np.allclose(out, 0.5 + eps, atol=0)


def test_project_l2_radial_scaling():
    eps = 0.05
    center = np.full(8, 0.5)
    direction = np.ones(8) / np.sqrt(8)
    point = center + 2 * eps * direction
    out = attacks.project(point, center, "l2", eps)
    assert np.linalg.norm(out - center) == pytest.approx(eps, abs=1e-9)
    # still the same direction
    assert np.allclose((out - center) / eps, direction, atol=1e-12)


def test_project_clips_to_box():
    center = np.array([0.02, 0.98])
    point = np.array([-0.5, 1.5])
    out = attacks.project(point, center, "linf", 1.0)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_project_shape_mismatch():
    with pytest.raises(ValueError):
        attacks.project(np.zeros(3), np.zeros(4), "linf", 0.1)


# ------------------------------------------------------------ random_init

def test_random_init_eps_zero_is_identity():
    x = np.array([0.3, 0.7])
    for norm in ("linf", "l2"):
        assert np.array_equal(attacks.random_init(x, norm, 0.0, 7), x)


def test_random_init_deterministic():
    x = np.full((10, 5), 0.5)
    a = attacks.random_init(x, "linf", 0.1, 99)
    b = attacks.random_init(x, "linf", 0.1, 99)
    assert np.array_equal(a, b)
    c = attacks.random_init(x, "linf", 0.1, 100)
    assert not np.array_equal(a, c)


def test_random_init_linf_per_coordinate_uniform():
    # 10^5 draws centered at 0.5 so the box never clips; KS test against
    # the uniform CDF on [-eps, eps] at the 1% level.
    eps = 8 / 255
    n = 100_000
    x = np.full((n, 1), 0.5)
    draws = (attacks.random_init(x, "linf", eps, 4242) - 0.5).ravel()
    assert np.abs(draws).max() <= eps
    sorted_d = np.sort(draws)
    cdf = (sorted_d + eps) / (2 * eps)
    empirical_hi = np.arange(1, n + 1) / n
    empirical_lo = np.arange(0, n) / n
    ks = max(np.abs(empirical_hi - cdf).max(), np.abs(empirical_lo - cdf).max())
    assert ks < 1.63 / np.sqrt(n)  # 1% critical value


def test_random_init_l2_stays_in_ball():
    eps = 0.2
    x = np.full((500, 6), 0.5)
    out = attacks.random_init(x, "l2", eps, 5)
    assert np.linalg.norm(out - x, axis=1).max() <= eps + 1e-12


def test_random_init_respects_box():
    x = np.full((200, 3), 0.01)
    out = attacks.random_init(x, "linf", 0.3, 8)
    assert out.min() >= 0.0 and out.max() <= 1.0


# ----------------------------------------------------------------- attack

def test_attack_eps_zero_identity():
    st = small_mlp(seed=2)
    x = np.array([[0.2, 0.4, 0.6], [0.9, 0.1, 0.5]])
    spec = AttackSpec(norm="linf", epsilon=0.0, step_size=0.1, iters=5,
                      random_init=True)
    out = attacks.attack(st, x, np.array([0, 1]), spec, seed=3)
    assert np.array_equal(out, x)


def test_attack_fgsm_closed_form_linear_model():
    # One linf step on a linear model lands exactly at x + eps*sign(grad).
    w = np.array([[1.0, -2.0], [0.5, 3.0], [-1.5, 0.2]])
    st = linear_state(w, np.zeros(2))
    x = np.array([0.5, 0.5, 0.5])
    y = 0
    eps = 0.05
    z, tape = models.forward(st, x)
    up = models.softmax(z) - models.onehot([y], 2)[0]
    gx = tape.run_backward(up)[1]
    expect = np.clip(x + eps * np.sign(gx), 0.0, 1.0)
    spec = AttackSpec(norm="linf", epsilon=eps, step_size=eps, iters=1)
    out = attacks.attack(st, x, y, spec, seed=0)
    assert np.array_equal(out, expect)


def test_attack_no_init_never_decreases_loss():
    st = small_mlp(seed=6)
    x = np.random.default_rng(1).uniform(0.1, 0.9, size=(8, 3))
    y = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    spec = AttackSpec(norm="linf", epsilon=0.08, step_size=0.02, iters=7)
    out = attacks.attack(st, x, y, spec, seed=0)
    before = models.ce_loss_batch(models.logits(st, x), y)
    after = models.ce_loss_batch(models.logits(st, out), y)
    assert np.all(after >= before - 1e-12)


def test_attack_budget_monotone():
    st = small_mlp(seed=13)
    x = np.random.default_rng(3).uniform(0.1, 0.9, size=(6, 3))
    y = np.array([1, 0, 2, 1, 0, 2])
    base = AttackSpec(norm="linf", epsilon=0.1, step_size=0.02, iters=1)
    l1 = models.ce_loss_batch(
        models.logits(st, attacks.attack(st, x, y, base, seed=0)), y)
    l10 = models.ce_loss_batch(
        models.logits(st, attacks.attack(st, x, y, base.replace(iters=10), seed=0)), y)
    assert np.all(l10 >= l1 - 1e-9)


def test_attack_feasible_iterates_l2():
    # CHECK_FEASIBLE asserts ball+box inside the loop for every iterate.
    st = small_mlp(seed=17)
    x = np.random.default_rng(5).uniform(0, 1, size=(10, 3))
    y = np.array([0, 1, 2] * 3 + [0])
    spec = AttackSpec(norm="l2", epsilon=0.3, step_size=0.1, iters=8,
                      restarts=3, random_init=True)
    out = attacks.attack(st, x, y, spec, seed=11)
    assert np.linalg.norm(out - x, axis=1).max() <= 0.3 + 1e-9
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_attack_deterministic_across_calls():
    st = small_mlp(seed=23)
    x = np.random.default_rng(7).uniform(0, 1, size=(5, 3))
    y = np.array([2, 1, 0, 2, 1])
    spec = AttackSpec(norm="linf", epsilon=0.1, step_size=0.025, iters=10,
                      restarts=4, random_init=True)
    a = attacks.attack(st, x, y, spec, seed=31)
    b = attacks.attack(st, x, y, spec, seed=31)
    assert np.array_equal(a, b)


def test_attack_restart_candidates_shape():
    st = small_mlp(seed=2)
    x = np.random.default_rng(9).uniform(0, 1, size=(4, 3))
    y = np.array([0, 1, 2, 0])
    spec = AttackSpec(norm="linf", epsilon=0.05, step_size=0.02, iters=3,
                      restarts=5, random_init=True)
    cands = attacks.attack(st, x, y, spec, seed=1, return_restarts=True)
    assert cands.shape == (5, 4, 3)


def test_attack_best_restart_wins():
    st = small_mlp(seed=29)
    x = np.random.default_rng(11).uniform(0, 1, size=(6, 3))
    y = np.array([1, 2, 0, 1, 2, 0])
    spec = AttackSpec(norm="linf", epsilon=0.1, step_size=0.03, iters=5,
                      restarts=6, random_init=True)
    best = attacks.attack(st, x, y, spec, seed=77)
    cands = attacks.attack(st, x, y, spec, seed=77, return_restarts=True)
    best_loss = models.ce_loss_batch(models.logits(st, best), y)
    for r in range(6):
        cand_loss = models.ce_loss_batch(models.logits(st, cands[r]), y)
        assert np.all(best_loss >= cand_loss - 1e-12)


def test_attack_soft_target_matches_hard_in_onehot_limit():
    # ce_soft with near-one-hot target logits reduces to the labeled attack.
    st = small_mlp(seed=41)
    x = np.random.default_rng(13).uniform(0.1, 0.9, size=(3, 3))
    y = np.array([0, 1, 2])
    target_logits = np.full((3, 3), -1e4)
    target_logits[np.arange(3), y] = 0.0
    hard = AttackSpec(norm="linf", epsilon=0.06, step_size=0.02, iters=5)
    soft = hard.replace(loss_kind="ce_soft")
    a = attacks.attack(st, x, y, hard, seed=0)
    b = attacks.attack(st, x, target_logits, soft, seed=0)
    assert np.allclose(a, b, atol=1e-9)


def test_attack_error_on_nonfinite_model():
    st = small_mlp(seed=0)
    st.theta[:] = np.nan
    spec = AttackSpec(norm="linf", epsilon=0.1, step_size=0.05, iters=2)
    with pytest.raises(attacks.AttackError):
        attacks.attack(st, np.array([[0.5, 0.5, 0.5]]), np.array([0]), spec, seed=0)


def test_attack_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec(norm="l1", epsilon=0.1, step_size=0.1)
    with pytest.raises(ValueError):
        AttackSpec(norm="linf", epsilon=-0.1, step_size=0.1)
    with pytest.raises(ValueError):
        AttackSpec(norm="linf", epsilon=0.1, step_size=0.1, iters=0)
    with pytest.raises(ValueError):
        AttackSpec(norm="linf", epsilon=0.1, step_size=0.1, loss_kind="mse")
