import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import ctskit.optimizer as opt
from ctskit.consistency import ConsistencyCoeffs, cts_weights
from ctskit.diffusion import UNCOND, Condition, GaussianMixtureOracle, build_schedule, dpm_step, eps_oracle
from ctskit.errors import ParameterError
from ctskit.optimizer import (CtsGradient, OptimizerConfig, RenderState, compositing_weights, cts_gradient,
                              layout_loss, noise_kept, optimize, sample_timesteps, scale_and_normal_losses,
                              theorem2_experiment, timestep_window)

SCHED = build_schedule()
CO = ConsistencyCoeffs()
GM = GaussianMixtureOracle([0.5, 0.5], [[1.5, 0.0], [-1.5, 0.0]], 0.05)


def test_config_validation():
    with pytest.raises(ParameterError):
        OptimizerConfig(n_min=500, n_max=400)
    with pytest.raises(ParameterError):
        OptimizerConfig(t_cut=0)
    with pytest.raises(ParameterError):
        OptimizerConfig(t_cut=990)
    with pytest.raises(ParameterError):
        OptimizerConfig(noise_removal="never")
    with pytest.raises(ParameterError):
        OptimizerConfig.from_dict({"lr": 0.1, "bogus": 1})
    cfg = OptimizerConfig(total_iters=40)
    assert cfg.t_warm_up == 20
    assert OptimizerConfig.from_dict(cfg.to_dict()) == cfg


def test_window_after_warm_up():
    cfg = OptimizerConfig(t_cut=10)
    assert timestep_window(500, cfg) == (30, 980)
    assert timestep_window(2000, cfg) == (30, 980)
    # early iterations shift the window up, clamped at T
    assert timestep_window(1, cfg) == (int(30 + (1 - 1 / 500) * 500), 1000)
    # the default gap floors t_min so that s >= 1
    assert timestep_window(600, OptimizerConfig()) == (101, 980)


def test_iteration_zero_rejected():
    with pytest.raises(ParameterError):
        sample_timesteps(0, OptimizerConfig(), np.random.default_rng(0))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 3000), st.integers(1, 300), st.integers(0, 2**32 - 1))
def test_sampled_pairs_valid(iteration, t_cut, seed):
    cfg = OptimizerConfig(t_cut=t_cut)
    s, t = sample_timesteps(iteration, cfg, np.random.default_rng(seed))
    t_min, t_max = timestep_window(iteration, cfg)
    assert 1 <= s < t and t_min <= t <= t_max
    assert t_cut <= t - s <= 2 * t_cut


def test_noise_modes():
    cfg = OptimizerConfig(total_iters=100)
    assert noise_kept(50, 100, cfg) and not noise_kept(51, 900, cfg)
    t5 = OptimizerConfig(total_iters=100, noise_removal="t500")
    assert noise_kept(99, 501, t5) and not noise_kept(1, 500, t5)
    both = OptimizerConfig(total_iters=100, noise_removal="both")
    assert noise_kept(10, 600, both) and not noise_kept(10, 400, both) and not noise_kept(60, 600, both)


def test_gradient_point_mass_on_mode():
    mu = np.array([0.4, -0.2])
    pm = GaussianMixtureOracle.point_mass(mu)
    g = cts_gradient(RenderState(mu), np.array([0.3, 0.9]), 300, 450, UNCOND, pm, SCHED, CO, in_warmup=False)
    assert np.linalg.norm(g.grad) <= 1e-8


def test_gradient_identity_renderer_verbatim():
    theta, eps = np.array([0.7, 0.4]), np.array([-0.5, 0.1])
    s, t, cond = 320, 470, Condition.subset(0)
    w = cts_weights(s, t, SCHED, CO)
    x_s = SCHED.alpha[s] * theta + SCHED.sigma[s] * eps
    e0 = eps_oracle(GM, x_s, s, UNCOND, SCHED)
    x_st = dpm_step(x_s, s, t, UNCOND, GM, SCHED)
    want1 = w.w1 * (eps_oracle(GM, x_st, t, cond, SCHED) - e0)
    want2 = w.w2 * (eps_oracle(GM, x_s, s, cond, SCHED) - eps)
    warm = cts_gradient(RenderState(theta), eps, s, t, cond, GM, SCHED, CO, in_warmup=True)
    assert np.allclose(warm.grad, want1 + want2, rtol=1e-12, atol=0)
    assert warm.term2 > 0
    late = cts_gradient(RenderState(theta), eps, s, t, cond, GM, SCHED, CO, in_warmup=False)
    # past the cutoff x_s is theta itself and the w2 term is gone
    x_st2 = dpm_step(theta, s, t, UNCOND, GM, SCHED)
    want = w.w1 * (eps_oracle(GM, x_st2, t, cond, SCHED) - eps_oracle(GM, theta, s, UNCOND, SCHED))
    assert np.allclose(late.grad, want, rtol=1e-12, atol=0) and late.term2 == 0.0


def test_gradient_linear_in_oracle_constant(monkeypatch):
    theta, eps = np.array([0.2, 0.9]), np.array([0.1, 0.1])
    s, t, cond = 300, 420, Condition.subset(1)
    base = cts_gradient(RenderState(theta), eps, s, t, cond, GM, SCHED, CO, in_warmup=False).grad
    shift = np.array([0.25, -0.5])
    real = opt.eps_oracle

    def shifted(gm, x, step, c, sched, guidance=1.0):
        out = real(gm, x, step, c, sched, guidance)
        return out + shift if (step == t and c == cond) else out

    monkeypatch.setattr(opt, "eps_oracle", shifted)
    moved = cts_gradient(RenderState(theta), eps, s, t, cond, GM, SCHED, CO, in_warmup=False).grad
    assert np.allclose(moved - base, cts_weights(s, t, SCHED, CO).w1 * shift, rtol=1e-12, atol=1e-15)


def test_gradient_rejects_bad_pair():
    with pytest.raises(ParameterError):
        cts_gradient(RenderState([0.0, 0.0]), np.zeros(2), 400, 400, UNCOND, GM, SCHED, CO, True)


def test_zero_lr_keeps_theta():
    theta0 = np.array([0.3, 0.3])
    rep = optimize(theta0, OptimizerConfig(total_iters=50, lr=0.0), UNCOND, GM, SCHED, CO)
    assert len(rep.records) == 50 and np.array_equal(rep.final_theta, theta0)


def test_optimize_deterministic_and_eps_fixed():
    cfg = OptimizerConfig(total_iters=120, lr=0.1, seed=4)
    a = optimize([1.0, 1.0], cfg, Condition.subset(0), GM, SCHED, CO)
    b = optimize([1.0, 1.0], cfg, Condition.subset(0), GM, SCHED, CO)
    assert a.to_csv() == b.to_csv() and a.eps_hash == b.eps_hash
    assert a.to_csv().splitlines()[0] == "iter,t,s,term1,term2,grad_norm,mode_dist"
    eps = np.array([0.5, -0.5])
    c = optimize([1.0, 1.0], cfg, UNCOND, GM, SCHED, CO, eps=eps)
    assert c.eps_hash == opt._hash_array(eps)


def test_optimize_divergence_aborts():
    cfg = OptimizerConfig(total_iters=200, lr=1e9, divergence=10.0)
    rep = optimize([0.1, 0.1], cfg, UNCOND, GM, SCHED, CO)
    assert rep.status == "diverged" and len(rep.records) < 200


@pytest.mark.xfail(strict=True, reason="on-mode restoring force scales with c_out(t)-c_out(s) ~ 1e-7; theta barely moves")
def test_point_mass_contracts_within_500_iterations():
    mu = np.array([0.5, -0.5])
    pm = GaussianMixtureOracle.point_mass(mu)
    rep = optimize(mu + 0.05, OptimizerConfig(total_iters=500), UNCOND, pm, SCHED, CO)
    assert np.linalg.norm(rep.final_theta - mu) <= 1e-3


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="measured 0/50 seeded starts within 0.1 of the selected mode")
def test_conditioned_runs_reach_selected_mode():
    hits = 0
    for seed in range(50):
        theta0 = np.random.default_rng([seed, 7]).normal(scale=2.0, size=2)
        rep = optimize(theta0, OptimizerConfig(total_iters=1000, lr=0.1, seed=seed), Condition.subset(0), GM, SCHED, CO)
        hits += np.linalg.norm(rep.final_theta - GM.means[0]) < 0.1
    assert hits >= 45


def test_theorem2_point_mass_error_zero():
    mu = np.array([0.2, 0.8])
    pm = GaussianMixtureOracle.point_mass(mu)
    res = theorem2_experiment([25, 50], OptimizerConfig(total_iters=250, lr=0.1), pm, SCHED, CO, seeds=[0, 1],
                              init_center=mu, init_scale=0.0)
    assert all(r.error <= 1e-12 and r.n_converged == 2 for r in res.rows)
    assert res.to_csv().splitlines()[0] == "gap,error,n_converged,n_runs,within_tol"


@pytest.mark.xfail(strict=True, reason="error falls as the gap grows (measured 5.3 at gap 25, 0.25 at gap 200)")
def test_theorem2_coarse_gap_worse_than_fine():
    res = theorem2_experiment([25, 200], OptimizerConfig(total_iters=1000, lr=0.1), GM, SCHED, CO, seeds=range(10),
                              cond_y=Condition.subset(0))
    assert res.rows[1].error > res.rows[0].error


def test_layout_loss_examples():
    assert layout_loss([[0.0, 1.0], [0.0, 2.0], [0.0, 3.0]], [0.5, 1.0, 1.5], [1.0, 2.0, 3.0]).value == 0.0
    assert layout_loss([[0.2, 0.8]], [0.5], [1.0]).value == pytest.approx(0.08)
    h = np.array([1.0, 2.0, 4.0])
    c = np.array([0.0, 1.0, 2.0])
    at_centre = layout_loss([[c[k]] * 3 for k in range(3)], c, h)
    assert at_centre.value == pytest.approx(float(np.sum(2 * (h / 2) ** 2)))
    with pytest.raises(ParameterError):
        layout_loss([[]], [0.0], [1.0])


def test_layout_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    pts = [rng.normal(size=5) for _ in range(3)]
    c, h = rng.normal(size=3), rng.uniform(0.5, 2, size=3)
    res = layout_loss(pts, c, h)
    for k in range(3):
        d = np.zeros(3)
        d[k] = 1e-6
        fd_c = (layout_loss(pts, c + d, h).value - layout_loss(pts, c - d, h).value) / 2e-6
        fd_h = (layout_loss(pts, c, h + d).value - layout_loss(pts, c, h - d).value) / 2e-6
        assert res.grad_center[k] == pytest.approx(fd_c, abs=1e-6)
        assert res.grad_extent[k] == pytest.approx(fd_h, abs=1e-6)


def test_scale_and_normal_examples():
    n = np.array([[0.0, 0.0, 1.0]])
    l_scale, l_normal = scale_and_normal_losses([[1, 2, 3], [4, 5, 6]], [0.5], n, n)
    assert l_scale == 4.5 and l_normal == 0.0
    _, l_normal = scale_and_normal_losses([[1, 1, 1]], [1.0], [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    assert l_normal == 1.0
    with pytest.warns(RuntimeWarning):
        scale_and_normal_losses([[1, 1, 1]], [1.0], [[2.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]])


def test_compositing_weights_forms():
    a = np.array([0.5, 0.5, 1.0])
    assert np.allclose(compositing_weights(a), [0.5, 0.25, 0.25])
    assert np.allclose(compositing_weights(a, literal=True), [0.25, 0.125, 0.0])
