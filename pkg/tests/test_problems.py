import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import dpfedsim as dp


def quad(a, b):
    return dp.QuadraticObjective(a_mat=np.asarray(a, float), b_vec=np.asarray(b, float))


@pytest.fixture(scope="module")
def logistic_client():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(12, 4)) / 2.0
    y = (rng.random(12) < 0.5).astype(float)
    return dp.LogisticObjective(features=z, labels=y, ridge=0.1)


class TestGradient:
    def test_identity_at_optimum_is_zero(self):
        c = quad(np.eye(3), np.zeros(3))
        assert np.array_equal(dp.gradient(c, np.zeros(3)), np.zeros(3))

    def test_two_dim_scaled_identity(self):
        c = quad(2 * np.eye(2), [2.0, 4.0])
        assert np.allclose(dp.gradient(c, np.zeros(2)), [-2.0, -4.0], rtol=0, atol=0)

    def test_logistic_single_sample(self):
        # one sample z=(1,0), label 1, evaluated at the origin:
        # sigmoid(0) = 0.5 so the gradient is (0.5 - 1) * z = (-0.5, 0)
        c = dp.LogisticObjective(
            features=np.array([[1.0, 0.0]]), labels=np.array([1.0]), ridge=0.1
        )
        g = dp.gradient(c, np.zeros(2))
        assert np.allclose(g, [-0.5, 0.0], atol=1e-15)

    def test_dimension_mismatch_rejected(self):
        c = quad(np.eye(3), np.zeros(3))
        with pytest.raises(ValueError):
            dp.gradient(c, np.zeros(4))

    @pytest.mark.parametrize("kind", ["quadratic", "logistic"])
    def test_matches_central_finite_differences(self, kind, logistic_client):
        if kind == "quadratic":
            fed = dp.generate_federation(
                dp.HeterogeneitySpec(zeta=1.0, condition_number=30.0, clients=1, dimension=6),
                seed=11,
            )
            client = fed.clients[0]
        else:
            client = logistic_client
        rng = np.random.default_rng(0)
        h = 1e-6
        for _ in range(10):
            x = rng.normal(size=client.dim)
            g = dp.gradient(client, x)
            fd = np.empty_like(g)
            for k in range(client.dim):
                e = np.zeros(client.dim)
                e[k] = h
                fd[k] = (dp.loss(client, x + e) - dp.loss(client, x - e)) / (2 * h)
            assert np.linalg.norm(fd - g) <= 1e-5 * max(1.0, np.linalg.norm(g))


class TestMinibatch:
    def test_full_batch_equals_gradient(self, logistic_client):
        x = np.full(4, 0.3)
        full = dp.minibatch_gradient(logistic_client, x, range(12))
        assert np.allclose(full, dp.gradient(logistic_client, x), rtol=1e-14)

    def test_singleton_batches_average_to_full(self):
        z = np.array([[1.0, -0.5], [0.25, 2.0]])
        y = np.array([1.0, 0.0])
        c = dp.LogisticObjective(features=z, labels=y, ridge=0.2)
        x = np.array([0.4, -0.7])
        g0 = dp.minibatch_gradient(c, x, [0])
        g1 = dp.minibatch_gradient(c, x, [1])
        # brute-force average over both singleton batches: the ridge term
        # appears in each, so it stays intact in the mean
        assert np.allclose((g0 + g1) / 2, dp.gradient(c, x), rtol=1e-12)

    def test_quadratic_ignores_batch(self):
        c = quad(np.diag([1.0, 4.0]), [1.0, 1.0])
        x = np.array([2.0, -1.0])
        assert np.array_equal(
            dp.minibatch_gradient(c, x, [0]), dp.gradient(c, x)
        )

    def test_empty_batch_rejected(self, logistic_client):
        with pytest.raises(ValueError):
            dp.minibatch_gradient(logistic_client, np.zeros(4), [])

    def test_sampled_batch_deterministic(self, logistic_client):
        from dpfedsim import streams

        key = streams.stream_key(5, streams.DOMAIN_BATCH, 0, 0)
        a = dp.minibatch_gradient(logistic_client, np.zeros(4), 3, key)
        b = dp.minibatch_gradient(logistic_client, np.zeros(4), 3, key)
        assert np.array_equal(a, b)


class TestConstants:
    def test_diagonal(self):
        assert dp.constants(quad(np.diag([1.0, 9.0]), np.zeros(2))) == (1.0, 9.0)

    def test_scaled_identity(self):
        assert dp.constants(quad(3 * np.eye(4), np.zeros(4))) == (3.0, 3.0)

    def test_logistic_identity_features(self):
        c = dp.LogisticObjective(
            features=np.eye(2), labels=np.array([0.0, 1.0]), ridge=0.5
        )
        mu, ell = dp.constants(c)
        assert mu == 0.5
        # lambda_max(Z'Z) = 1 with two samples: 1/(4*2) + 0.5
        assert math.isclose(ell, 0.625, rel_tol=1e-12)

    def test_non_spd_rejected(self):
        with pytest.raises(ValueError):
            quad(np.diag([1.0, -2.0]), np.zeros(2))
        with pytest.raises(ValueError):
            quad([[1.0, 0.5], [0.1, 1.0]], np.zeros(2))

    def test_strong_convexity_smoothness_bracket(self, logistic_client):
        for client in (
            quad(np.diag([2.0, 5.0, 11.0]), [1.0, 0.0, -2.0]),
            logistic_client,
        ):
            mu, ell = dp.constants(client)
            rng = np.random.default_rng(7)
            for _ in range(20):
                x = rng.normal(size=client.dim)
                y = rng.normal(size=client.dim)
                gap = np.dot(dp.gradient(client, x) - dp.gradient(client, y), x - y)
                sq = np.dot(x - y, x - y)
                assert mu * sq - 1e-8 <= gap <= ell * sq + 1e-8


class TestClosedFormOptimum:
    def test_two_client_hand_solution(self):
        fed = dp.Federation.from_clients(
            [quad(np.eye(2), [2.0, 0.0]), quad(np.eye(2), [0.0, 2.0])]
        )
        x_star, h_star = dp.closed_form_optimum(fed)
        # 2I x = (2, 2) so x* = (1, 1); h_i = x* - b_i
        assert np.allclose(x_star, [1.0, 1.0], atol=1e-12)
        assert np.allclose(h_star[0], [-1.0, 1.0], atol=1e-12)
        assert np.allclose(h_star[1], [1.0, -1.0], atol=1e-12)
        assert np.allclose(h_star.sum(axis=0), 0.0, atol=1e-12)

    def test_single_client_zero_control(self):
        a = np.diag([2.0, 3.0])
        fed = dp.Federation.from_clients([quad(a, [4.0, 3.0])])
        x_star, h_star = dp.closed_form_optimum(fed)
        assert np.allclose(x_star, np.linalg.solve(a, [4.0, 3.0]), atol=1e-12)
        assert np.allclose(h_star, 0.0, atol=1e-12)

    def test_identical_clients_zero_controls(self):
        a = np.diag([1.0, 5.0])
        fed = dp.Federation.from_clients([quad(a, [1.0, 2.0])] * 3)
        _, h_star = dp.closed_form_optimum(fed)
        assert np.allclose(h_star, 0.0, atol=1e-10)

    def test_logistic_unsupported(self, logistic_client):
        fed = dp.Federation.from_clients([logistic_client])
        with pytest.raises(NotImplementedError):
            dp.closed_form_optimum(fed)

    def test_star_controls_sum_to_zero(self):
        fed = dp.generate_federation(
            dp.HeterogeneitySpec(zeta=2.0, condition_number=50.0, clients=4, dimension=8),
            seed=3,
        )
        assert np.linalg.norm(fed.star_controls.sum(axis=0)) <= 1e-8
        assert np.linalg.norm(fed.average_gradient(fed.optimum)) <= 1e-8


class TestGeneration:
    def test_zero_spread_shares_optimum(self):
        fed = dp.generate_federation(
            dp.HeterogeneitySpec(zeta=0.0, condition_number=10.0, clients=3, dimension=5),
            seed=1,
        )
        _, h_star = dp.closed_form_optimum(fed)
        assert np.abs(h_star).max() < 1e-9

    def test_same_seed_bitwise_identical(self):
        spec = dp.HeterogeneitySpec(zeta=1.5, condition_number=20.0, clients=3, dimension=6)
        f1 = dp.generate_federation(spec, seed=9)
        f2 = dp.generate_federation(spec, seed=9)
        for c1, c2 in zip(f1.clients, f2.clients):
            assert np.array_equal(c1.a_mat, c2.a_mat)
            assert np.array_equal(c1.b_vec, c2.b_vec)

    def test_spread_separates_client_optima(self):
        fed = dp.generate_federation(
            dp.HeterogeneitySpec(zeta=10.0, condition_number=5.0, clients=3, dimension=5),
            seed=4,
        )
        # brute-force client optima straight from the client systems
        optima = [np.linalg.solve(c.a_mat, c.b_vec) for c in fed.clients]
        for i in range(3):
            for j in range(i + 1, 3):
                assert np.linalg.norm(optima[i] - optima[j]) > 1.0

    def test_condition_number_within_five_percent(self):
        for kappa in (10.0, 100.0, 1000.0):
            fed = dp.generate_federation(
                dp.HeterogeneitySpec(zeta=1.0, condition_number=kappa, clients=3, dimension=12),
                seed=6,
            )
            assert abs(fed.condition_number - kappa) <= 0.05 * kappa

    def test_logistic_generation(self):
        fed = dp.generate_federation(
            dp.HeterogeneitySpec(
                zeta=0.5, condition_number=25.0, clients=2, dimension=4,
                kind="logistic", samples_per_client=16,
            ),
            seed=2,
        )
        assert fed.all_quadratic is False
        assert math.isclose(fed.condition_number, 25.0, rel_tol=1e-9)
        assert fed.optimum is None

    def test_invalid_specs_rejected(self):
        with pytest.raises(ValueError):
            dp.HeterogeneitySpec(zeta=-1.0, condition_number=10.0, clients=2, dimension=2)
        with pytest.raises(ValueError):
            dp.HeterogeneitySpec(zeta=0.0, condition_number=0.5, clients=2, dimension=2)
        with pytest.raises(ValueError):
            dp.HeterogeneitySpec(zeta=0.0, condition_number=10.0, clients=0, dimension=2)
        with pytest.raises(ValueError):
            dp.HeterogeneitySpec(
                zeta=0.0, condition_number=1.0, clients=2, dimension=2, kind="logistic"
            )


class TestNumericOptimum:
    def test_logistic_numeric_optimum(self):
        fed = dp.generate_federation(
            dp.HeterogeneitySpec(
                zeta=0.3, condition_number=10.0, clients=2, dimension=3,
                kind="logistic", samples_per_client=12,
            ),
            seed=5,
        )
        x_star, h_star = dp.numeric_optimum(fed, tol=1e-10)
        assert np.linalg.norm(fed.average_gradient(x_star)) <= 1e-10
        assert np.linalg.norm(h_star.sum(axis=0)) <= 1e-8

    def test_quadratic_numeric_agrees_with_closed_form(self):
        fed = dp.generate_federation(
            dp.HeterogeneitySpec(zeta=1.0, condition_number=8.0, clients=3, dimension=4),
            seed=8,
        )
        x_num, _ = dp.numeric_optimum(fed, tol=1e-12)
        assert np.linalg.norm(x_num - fed.optimum) <= 1e-9


class TestSerialization:
    def test_quadratic_round_trip_bitwise(self, tmp_path):
        fed = dp.generate_federation(
            dp.HeterogeneitySpec(zeta=1.0, condition_number=100.0, clients=3, dimension=7),
            seed=12,
        )
        path = tmp_path / "fed.txt"
        dp.save_federation(fed, str(path))
        back = dp.load_federation(str(path))
        for c1, c2 in zip(fed.clients, back.clients):
            assert np.array_equal(c1.a_mat, c2.a_mat)
            assert np.array_equal(c1.b_vec, c2.b_vec)

    def test_logistic_round_trip_bitwise(self, tmp_path):
        fed = dp.generate_federation(
            dp.HeterogeneitySpec(
                zeta=0.5, condition_number=15.0, clients=2, dimension=3,
                kind="logistic", samples_per_client=9,
            ),
            seed=13,
        )
        path = tmp_path / "fed.txt"
        dp.save_federation(fed, str(path))
        back = dp.load_federation(str(path))
        for c1, c2 in zip(fed.clients, back.clients):
            assert np.array_equal(c1.features, c2.features)
            assert np.array_equal(c1.labels, c2.labels)
            assert c1.ridge == c2.ridge

    def test_bad_file_rejected(self, tmp_path):
        path = tmp_path / "junk.txt"
        path.write_text("not a federation\n")
        with pytest.raises(ValueError):
            dp.load_federation(str(path))


@settings(max_examples=30, deadline=None)
@given(
    eigs=st.lists(st.floats(min_value=0.1, max_value=50.0), min_size=2, max_size=5),
    scale=st.floats(min_value=-3.0, max_value=3.0),
)
def test_gradient_linearity_property(eigs, scale):
    d = len(eigs)
    a = np.diag(eigs)
    c = quad(a, np.zeros(d))
    x = np.full(d, scale)
    assert np.allclose(dp.gradient(c, 2 * x), 2 * dp.gradient(c, x), rtol=1e-12, atol=1e-12)


def test_client_optimum_gradient_vanishes():
    for kappa in (10.0, 100.0, 1000.0):
        fed = dp.generate_federation(
            dp.HeterogeneitySpec(zeta=1.0, condition_number=kappa, clients=3, dimension=12),
            seed=19,
        )
        for c in fed.clients:
            assert np.linalg.norm(dp.gradient(c, c.optimum)) <= 1e-9
