import numpy as np
from django.test import SimpleTestCase

from lab import net
from lab.abstraction import build_policy_table
from lab.exceptions import DimensionMismatch


def random_batch(rng, n, dim, num_actions, num_tasks):
    return net.Batch(
        rng.normal(size=(n, dim)),
        rng.integers(num_actions, size=n),
        rng.integers(num_tasks, size=n),
    )


class ForwardTests(SimpleTestCase):
    def test_softmax_normalises(self):
        rng = np.random.default_rng(0)
        z = rng.normal(scale=50.0, size=(10_000, 5))
        sums = net.softmax(z).sum(axis=1)
        self.assertLess(np.max(np.abs(sums - 1.0)), 1e-9)

    def test_softmax_survives_large_logits(self):
        probs = net.softmax(np.array([1000.0, 1000.0, -1000.0]))
        np.testing.assert_allclose(probs, [0.5, 0.5, 0.0])

    def test_forward_shapes(self):
        p = net.init_params(2, 4, hidden=8, layers=2, rng=np.random.default_rng(1))
        self.assertEqual(net.forward(p, np.array([0.2, 0.3])).shape, (4,))
        self.assertEqual(net.forward(p, np.zeros((5, 2))).shape, (5, 4))
        self.assertEqual(p.num_parameters(), 2 * 8 + 8 + 8 * 8 + 8 + 8 * 4 + 4)

    def test_wrong_input_dimension(self):
        p = net.init_params(2, 4, hidden=8, rng=np.random.default_rng(1))
        with self.assertRaises(DimensionMismatch):
            net.forward(p, np.zeros(4))

    def test_zero_network_is_uniform(self):
        p = net.zero_params(4, 2, hidden=8)
        np.testing.assert_array_equal(net.forward(p, np.ones(4)), [0.5, 0.5])

    def test_logits_match_forward(self):
        rng = np.random.default_rng(2)
        p = net.init_params(3, 5, hidden=6, rng=rng)
        X = rng.normal(size=(4, 3))
        np.testing.assert_allclose(net.softmax(net.logits(p, X)), net.forward(p, X))

    def test_hand_set_network(self):
        p = net.NetParams(
            [np.array([[1.0, -1.0]]), np.array([[1.0, 0.0], [0.0, 2.0]])],
            [np.array([0.0, 0.5]), np.zeros(2)],
        )
        np.testing.assert_allclose(
            net.forward(p, np.array([[-1.0], [1.0], [0.5]])),
            [
                [0.04742587317756678, 0.9525741268224334],
                [0.7310585786300049, 0.2689414213699951],
                [0.6224593312018546, 0.3775406687981454],
            ],
            rtol=1e-12,
        )


class GradientTests(SimpleTestCase):
    def test_finite_differences_on_random_draws(self):
        rng = np.random.default_rng(42)
        for draw in range(20):
            num_actions, num_tasks = (4, 1) if draw % 2 else (2, 2)
            table = build_policy_table(num_actions, num_tasks)
            p = net.init_params(3, table.num_clusters, hidden=5, layers=2, rng=rng)
            batch = random_batch(rng, 8, 3, num_actions, num_tasks)
            self.assertLess(net.finite_diff_check(p, batch, table), 1e-4, f"draw {draw}")

    def test_gradient_with_stochastic_table(self):
        rng = np.random.default_rng(5)
        table = rng.dirichlet(np.ones(3), size=(6, 2))
        p = net.init_params(2, 6, hidden=4, layers=1, rng=rng)
        batch = random_batch(rng, 10, 2, 3, 2)
        self.assertLess(net.finite_diff_check(p, batch, table), 1e-4)

    def test_inflated_gradient_is_caught(self):
        rng = np.random.default_rng(3)
        table = build_policy_table(4, 1)
        p = net.init_params(3, 4, hidden=5, rng=rng)
        batch = random_batch(rng, 8, 3, 4, 1)

        def inflated(p, batch, table):
            loss, grad = net.nll_and_grad(p, batch, table)
            return loss, grad.map(lambda g: 1.1 * g)

        self.assertLess(net.finite_diff_check(p, batch, table), 1e-4)
        self.assertGreater(net.finite_diff_check(p, batch, table, loss_and_grad=inflated), 1e-2)

    def test_uniform_phi_costs_log_num_actions(self):
        rng = np.random.default_rng(4)
        p = net.zero_params(2, 4, hidden=8)
        batch = random_batch(rng, 12, 2, 4, 1)
        self.assertAlmostEqual(net.loss_only(p, batch, build_policy_table(4, 1)), np.log(4), places=12)

    def test_loss_matches_its_definition(self):
        rng = np.random.default_rng(6)
        table = build_policy_table(4, 1)
        p = net.init_params(2, 4, hidden=4, rng=rng)
        batch = random_batch(rng, 6, 2, 4, 1)
        phi = net.forward(p, batch.states)
        expected = -np.mean(np.log(phi[np.arange(6), batch.actions]))
        loss, _ = net.nll_and_grad(p, batch, table)
        self.assertAlmostEqual(loss, expected, places=12)
        self.assertAlmostEqual(net.loss_only(p, batch, table), expected, places=12)

    def test_floored_samples_are_logged_and_counted(self):
        table = np.zeros((2, 1, 3))
        table[0, 0, 0] = table[1, 0, 1] = 1.0
        p = net.zero_params(2, 2, hidden=3, layers=1)
        batch = net.as_batch([((0.1, 0.2), 2, 0), ((0.3, 0.4), 0, 0)])
        stats = {}
        with self.assertLogs("lab.net", "WARNING"):
            loss, grad = net.nll_and_grad(p, batch, table, stats)
        self.assertEqual(stats["floored"], 1)
        self.assertAlmostEqual(loss, -(np.log(1e-12) + np.log(0.5)) / 2)
        self.assertTrue(grad.all_finite())

    def test_empty_batch(self):
        p = net.zero_params(2, 2, hidden=2)
        with self.assertRaises(ValueError):
            net.nll_and_grad(p, net.Batch(np.zeros((0, 2)), np.zeros(0, dtype=int), np.zeros(0, dtype=int)), np.ones((2, 1, 2)))


class AdamTests(SimpleTestCase):
    def test_first_step_moves_each_weight_by_lr(self):
        p = net.zero_params(1, 2, hidden=2, layers=1)
        grad = p.map(lambda w: np.full_like(w, 3.0))
        new_p, state = net.adam_step(p, net.adam_init(p, lr=0.1), grad)
        self.assertEqual(state.t, 1)
        for arr in new_p.arrays():
            np.testing.assert_allclose(arr, -0.1, rtol=1e-6)

    def test_adam_reduces_the_loss(self):
        rng = np.random.default_rng(8)
        table = build_policy_table(2, 1)
        states = rng.normal(size=(64, 2))
        batch = net.Batch(states, (states[:, 0] > 0).astype(int), np.zeros(64, dtype=int))
        p = net.init_params(2, 2, hidden=8, rng=rng)
        adam = net.adam_init(p, lr=0.01)
        start = net.loss_only(p, batch, table)
        for _ in range(300):
            _, grad = net.nll_and_grad(p, batch, table)
            p, adam = net.adam_step(p, adam, grad)
        self.assertLess(net.loss_only(p, batch, table), start / 2)

    def test_zero_gradient_is_a_fixed_point(self):
        p = net.init_params(2, 3, hidden=4, rng=np.random.default_rng(0))
        state = net.adam_init(p)
        new_p = p
        for _ in range(3):
            new_p, state = net.adam_step(new_p, state, p.zeros_like())
        for before, after in zip(p.arrays(), new_p.arrays()):
            np.testing.assert_array_equal(before, after)

    def test_opposite_gradients_give_mirrored_parameters(self):
        p = net.NetParams([np.zeros((1, 2))], [np.zeros(2)])
        grad = net.NetParams([np.array([[0.3, -0.3]])], [np.array([-1.2, 1.2])])
        state = net.adam_init(p, lr=0.01)
        for _ in range(2):
            p, state = net.adam_step(p, state, grad)
        self.assertLess(p.weights[0][0, 0], 0.0)
        self.assertEqual(p.weights[0][0, 0], -p.weights[0][0, 1])
        self.assertEqual(p.biases[0][0], -p.biases[0][1])

    def test_fits_a_separable_toy_labelling(self):
        states = np.concatenate([np.linspace(-1.0, -0.1, 50), np.linspace(0.1, 1.0, 50)])[:, None]
        batch = net.Batch(states, (states[:, 0] > 0).astype(int), np.zeros(100, dtype=int))
        table = build_policy_table(2, 1)
        p = net.init_params(1, 2, hidden=32, layers=1, rng=np.random.default_rng(9))
        adam = net.adam_init(p, lr=1e-3)
        for _ in range(2000):
            loss, grad = net.nll_and_grad(p, batch, table)
            if loss < 0.05:
                break
            p, adam = net.adam_step(p, adam, grad)
        self.assertLess(net.loss_only(p, batch, table), 0.05)
