import math

import numpy as np
import pytest
from scipy import integrate, stats

from movesd import autodiff as ad
from movesd.core import AgentState, StepRecord, Trajectory
from movesd.dynamics import (AB_FLOOR, DomainError, DynamicsModel,
                             beta_ll_grad, beta_log_pdf, build_dynamics_dataset,
                             dynamics_update_step, pretrain_dynamics, sample_beta)
from movesd.envsim import FacilitySpec, GridParkConfig


def grid_config(**kw):
    base = dict(width=4, height=4,
                facilities=(FacilitySpec(loc=5, service_rate=1.0),),
                n_agents=2, max_steps=20, seed=0)
    base.update(kw)
    return GridParkConfig(**base)


def walk(locs, agent_id=0):
    states = [AgentState(loc_id=l, time_in_loc=0, start_time=0, population=1)
              for l in locs]
    recs = [StepRecord(state=a, action=0, constraint=None, next_state=b)
            for a, b in zip(states, states[1:])]
    return Trajectory(agent_id=agent_id, records=recs)


class TestLogPdf:
    def test_uniform_density_is_zero_everywhere(self):
        for g in (0.01, 0.25, 0.5, 0.99):
            assert beta_log_pdf(g, 1.0, 1.0) == pytest.approx(0.0, abs=1e-12)

    def test_symmetric_two_two_at_half(self):
        assert beta_log_pdf(0.5, 2.0, 2.0) == pytest.approx(math.log(1.5), abs=1e-12)

    def test_matches_scipy_on_random_points(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            g = rng.uniform(0.01, 0.99)
            a, b = rng.uniform(0.3, 8.0, size=2)
            assert beta_log_pdf(g, a, b) == pytest.approx(
                stats.beta.logpdf(g, a, b), abs=1e-9)

    @pytest.mark.parametrize("a", [0.5, 1.0, 2.0, 5.0])
    @pytest.mark.parametrize("b", [0.5, 1.0, 2.0, 5.0])
    def test_density_integrates_to_one(self, a, b):
        total, _ = integrate.quad(lambda g: math.exp(beta_log_pdf(g, a, b)),
                                  0.0, 1.0)
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_domain_violations_rejected(self):
        with pytest.raises(DomainError):
            beta_log_pdf(0.0, 2.0, 2.0)
        with pytest.raises(DomainError):
            beta_log_pdf(1.0, 2.0, 2.0)
        with pytest.raises(DomainError):
            beta_log_pdf(0.5, -1.0, 2.0)

    def test_array_arguments_broadcast(self):
        g = np.array([0.2, 0.5, 0.8])
        out = beta_log_pdf(g, 2.0, 2.0)
        assert out.shape == (3,)
        assert out[1] == pytest.approx(math.log(1.5))


class TestGradient:
    def test_matches_central_differences(self):
        rng = np.random.default_rng(1)
        eps = 1e-6
        for _ in range(50):
            g = rng.uniform(0.02, 0.98)
            a, b = rng.uniform(0.4, 6.0, size=2)
            da, db = beta_ll_grad(g, a, b)
            fd_a = (beta_log_pdf(g, a + eps, b) - beta_log_pdf(g, a - eps, b)) / (2 * eps)
            fd_b = (beta_log_pdf(g, a, b + eps) - beta_log_pdf(g, a, b - eps)) / (2 * eps)
            assert da == pytest.approx(fd_a, abs=1e-6)
            assert db == pytest.approx(fd_b, abs=1e-6)

    def test_symmetric_at_half(self):
        da, db = beta_ll_grad(0.5, 3.0, 3.0)
        assert da == pytest.approx(db, abs=1e-14)

    def test_mean_gradient_vanishes_at_the_mle(self):
        rng = np.random.default_rng(2)
        sample = rng.beta(2.0, 5.0, size=4000)
        res = stats.fit(stats.beta, sample,
                        bounds={"a": (0.1, 10), "b": (0.1, 10),
                                "loc": (0, 0), "scale": (1, 1)})
        a_hat, b_hat = res.params.a, res.params.b
        da, db = beta_ll_grad(sample, a_hat, b_hat)
        assert np.hypot(da.mean(), db.mean()) < 1e-3

    def test_agrees_with_backward_through_the_density_graph(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            g = rng.uniform(0.05, 0.95)
            a0, b0 = rng.uniform(0.5, 5.0, size=2)
            alpha = ad.Tensor(np.array(a0), requires_grad=True)
            beta = ad.Tensor(np.array(b0), requires_grad=True)
            gt = ad.Tensor(np.array(g))
            ll = ad.add(
                ad.add(ad.mul(ad.sub(alpha, ad.Tensor(np.array(1.0))), ad.log(gt)),
                       ad.mul(ad.sub(beta, ad.Tensor(np.array(1.0))),
                              ad.Tensor(np.array(math.log1p(-g))))),
                ad.sub(ad.lgamma(ad.add(alpha, beta)),
                       ad.add(ad.lgamma(alpha), ad.lgamma(beta))))
            ll.backward()
            da, db = beta_ll_grad(g, a0, b0)
            assert float(alpha.grad) == pytest.approx(da, abs=1e-8)
            assert float(beta.grad) == pytest.approx(db, abs=1e-8)


class TestSampling:
    def test_uniform_case_mean(self):
        rng = np.random.default_rng(4)
        draws = np.array([sample_beta(1.0, 1.0, rng) for _ in range(100_000)])
        assert draws.mean() == pytest.approx(0.5, abs=0.01)

    def test_two_five_mean(self):
        rng = np.random.default_rng(5)
        draws = np.array([sample_beta(2.0, 5.0, rng) for _ in range(100_000)])
        assert draws.mean() == pytest.approx(2 / 7, abs=0.01)

    def test_deterministic_under_fixed_seed(self):
        a = [sample_beta(2.0, 3.0, np.random.default_rng(6)) for _ in range(10)]
        b = [sample_beta(2.0, 3.0, np.random.default_rng(6)) for _ in range(10)]
        assert a == b

    def test_draws_stay_inside_open_interval(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            g = sample_beta(0.05, 0.05, rng)
            assert 0.0 < g < 1.0

    def test_rejects_bad_shapes(self):
        with pytest.raises(DomainError):
            sample_beta(0.0, 1.0, np.random.default_rng(0))


class TestModel:
    def test_zeroed_output_layer_gives_constant_shapes(self):
        m = DynamicsModel(np.random.default_rng(8))
        m.params["W3"].data[:] = 0.0
        m.params["b3"].data[:] = 0.0
        a, b = m.alpha_beta(np.random.default_rng(9).random((5, 3)))
        expect = math.log(2.0) + AB_FLOOR  # softplus(0) + floor
        assert np.allclose(a, expect) and np.allclose(b, expect)
        assert a[0] == pytest.approx(0.6932471806, abs=1e-9)

    def test_outputs_strictly_positive_everywhere(self):
        m = DynamicsModel(np.random.default_rng(10))
        obs = np.random.default_rng(11).standard_normal((1000, 3)) * 5
        a, b = m.alpha_beta(obs)
        assert (a > 0).all() and (b > 0).all()

    def test_wrong_feature_width_rejected(self):
        m = DynamicsModel(np.random.default_rng(12))
        with pytest.raises(ad.ShapeError):
            m.alpha_beta(np.zeros((2, 4)))

    def test_constraint_sample_mode_needs_rng(self):
        m = DynamicsModel(np.random.default_rng(13))
        with pytest.raises(ValueError):
            m.constraint_value(np.zeros((1, 3)))

    def test_mean_mode_is_the_beta_mean(self):
        m = DynamicsModel(np.random.default_rng(14))
        obs = np.random.default_rng(15).random((4, 3))
        a, b = m.alpha_beta(obs)
        assert np.allclose(m.constraint_value(obs, mode="mean"), a / (a + b))

    def test_deterministic_mode_predicts_its_own_scalar(self):
        m = DynamicsModel(np.random.default_rng(16), mode="deterministic")
        obs = np.random.default_rng(17).random((4, 3))
        g = m.constraint_value(obs, mode="sample")
        assert g.shape == (4,)
        assert ((g > 0) & (g < 1)).all()
        with pytest.raises(ValueError):
            m.forward(obs)

    def test_deterministic_mode_fits_constant_durations(self):
        m = DynamicsModel(np.random.default_rng(18), mode="deterministic")
        obs = np.tile(np.array([0.2, 0.4, 0.6]), (256, 1))
        labels = np.full(256, 0.37)
        pretrain_dynamics(m, obs, labels, epochs=300, lr=3e-3, batch_size=None)
        pred = m.constraint_value(obs[:1])
        assert pred[0] == pytest.approx(0.37, abs=0.02)


class TestDataset:
    def test_single_stay_trajectory_clamps_near_one(self):
        cfg = grid_config()
        traj = walk([3] * (cfg.max_steps + 1))
        obs, labels = build_dynamics_dataset([traj], cfg)
        assert len(labels) == 1
        assert labels[0] == 1 - 1e-4

    def test_three_locations_make_three_examples(self):
        cfg = grid_config()
        traj = walk([1, 1, 2, 2, 2, 3, 3])
        obs, labels = build_dynamics_dataset([traj], cfg)
        assert len(labels) == 3
        assert labels.tolist() == pytest.approx([2 / 20, 3 / 20, 1 / 20])

    def test_empty_input_is_empty_dataset(self):
        obs, labels = build_dynamics_dataset([], grid_config())
        assert len(labels) == 0 and obs.shape == (0, 3)

    def test_features_taken_at_stay_entry(self):
        cfg = grid_config()
        traj = walk([1, 1, 2, 2, 2])
        obs, _ = build_dynamics_dataset([traj], cfg)
        assert obs[0][0] == pytest.approx(1 / cfg.n_locs)
        assert obs[0][1] == pytest.approx(0.0)  # entry at t = 0
        assert obs[1][1] == pytest.approx(2 / cfg.max_steps)


class TestPretraining:
    def test_empty_dataset_rejected(self):
        m = DynamicsModel(np.random.default_rng(19))
        with pytest.raises(ValueError):
            pretrain_dynamics(m, np.zeros((0, 3)), np.zeros(0), epochs=1)

    def test_full_batch_likelihood_is_monotone(self):
        rng = np.random.default_rng(20)
        obs = rng.random((64, 3))
        labels = rng.uniform(0.1, 0.6, 64)
        m = DynamicsModel(np.random.default_rng(21))
        res = pretrain_dynamics(m, obs, labels, epochs=40, lr=1e-3,
                                batch_size=None, method="sgd")
        diffs = np.diff(res.epoch_ll)
        assert (diffs >= -1e-9).all()

    def test_same_seed_reproduces_parameters(self):
        rng = np.random.default_rng(22)
        obs = rng.random((40, 3))
        labels = rng.uniform(0.2, 0.8, 40)
        models = []
        for _ in range(2):
            m = DynamicsModel(np.random.default_rng(23))
            pretrain_dynamics(m, obs, labels, epochs=5, lr=1e-3, batch_size=16,
                              rng=np.random.default_rng(24))
            models.append(m.params.get_flat())
        assert np.array_equal(models[0], models[1])

    def test_concentrates_on_deterministic_dwells(self):
        obs = np.tile(np.array([0.5, 0.1, 0.25]), (200, 1))
        labels = np.full(200, 0.3)
        m = DynamicsModel(np.random.default_rng(25))
        pretrain_dynamics(m, obs, labels, epochs=400, lr=5e-3, batch_size=None)
        a, b = m.alpha_beta(obs[:1])
        var = (a[0] * b[0]) / ((a[0] + b[0]) ** 2 * (a[0] + b[0] + 1))
        assert var < 0.01  # sharper than the (zero-variance) data + 0.01

    def test_update_step_raises_the_batch_objective(self):
        rng = np.random.default_rng(26)
        obs = rng.random((64, 3))
        labels = rng.uniform(0.2, 0.5, 64)
        m = DynamicsModel(np.random.default_rng(27))
        opt = ad.Adam(m.params, lr=3e-3, maximize=True)
        values = [dynamics_update_step(m, obs, labels, opt) for _ in range(60)]
        assert values[-1] > values[0]


@pytest.mark.slow
def test_recovers_known_shapes_from_samples():
    rng = np.random.default_rng(28)
    samples = np.clip(rng.beta(2.0, 5.0, size=10_000), 1e-6, 1 - 1e-6)
    obs = np.tile(np.array([0.3, 0.5, 0.25]), (10_000, 1))
    m = DynamicsModel(np.random.default_rng(29))
    pretrain_dynamics(m, obs, samples, epochs=150, lr=3e-3, batch_size=None)
    a, b = m.alpha_beta(obs[:1])
    assert abs(a[0] - 2.0) / 2.0 < 0.10
    assert abs(b[0] - 5.0) / 5.0 < 0.10
