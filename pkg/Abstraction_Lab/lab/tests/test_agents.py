from dataclasses import replace

import numpy as np
from django.test import SimpleTestCase, tag

from lab import abstraction, agents, demo, envs, net
from lab.exceptions import DimensionMismatch


class ChainEnv:
    """Ten states in a row. Action 0 steps right; stepping right off the end pays 1."""

    num_actions = 2
    state_dim = 1
    horizon = 40

    def __init__(self, length=10):
        self.length = length

    def reset(self, rng):
        return 0

    def step(self, s, a, rng=None, t=None):
        if a == 0 and s == self.length - 1:
            return envs.Transition(s, 1.0, True, success=True)
        nxt = min(s + 1, self.length - 1) if a == 0 else max(s - 1, 0)
        return envs.Transition(nxt, 0.0, False)


def reference_q_learning(length, episodes, alpha, gamma, epsilon, horizon, seed):
    """Plain-loop tabular Q-learning drawing from the generator in the same order."""
    rng = np.random.default_rng(seed)
    q = np.zeros((length, 2))
    for _ in range(episodes):
        s = 0
        for _ in range(horizon):
            if rng.random() < epsilon:
                a = int(rng.integers(2))
            else:
                a = int(np.argmax(q[s]))
            if a == 0 and s == length - 1:
                q[s, a] += alpha * (1.0 - q[s, a])
                break
            nxt = min(s + 1, length - 1) if a == 0 else max(s - 1, 0)
            q[s, a] += alpha * (0.0 + gamma * np.max(q[nxt]) - q[s, a])
            s = nxt
    return q


class IntervalChainEnv(ChainEnv):
    """The same chain laid out on [0, 1], state i at the centre of interval i."""

    def embed(self, i):
        return np.array([(i + 0.5) / self.length])

    def reset(self, rng):
        return self.embed(0)

    def step(self, s, a, rng=None, t=None):
        tr = super().step(int(s[0] * self.length), a, rng, t)
        return replace(tr, next_state=self.embed(tr.next_state))


def interval_model(length=10):
    """A phi whose argmax is the index of the interval holding the state."""
    centres = (np.arange(length) + 0.5) / length
    # Logit c is s^2 - (s - centre_c)^2, largest at the nearest centre.
    params = net.NetParams([2 * centres[None, :]], [-centres**2])
    policy = abstraction.AbstractPolicyTable(np.tile(np.eye(2), (length // 2, 1))[:, None, :])
    return abstraction.AbstractionModel(params, policy, 1, 2, 1)


def lattice_index(s):
    """Exact state index of noise-free Puddle World, whose states sit on a 0.05 lattice."""
    i, j = np.rint(np.asarray(s) / envs.PUDDLE_STEP).astype(int)
    return int(i * 21 + j)



class QLearningTests(SimpleTestCase):
    def test_chain_matches_the_reference_bit_for_bit(self):
        hyper = agents.AgentConfig(alpha=0.1, epsilon=0.3, gamma=0.9)
        for seed in range(5):
            q, curve = agents.run_q_learning(ChainEnv(), int, 10, 30, hyper, np.random.default_rng(seed))
            expected = reference_q_learning(10, 30, 0.1, 0.9, 0.3, ChainEnv.horizon, seed)
            np.testing.assert_array_equal(q.values, expected)
            self.assertEqual(len(curve), 30)

    def test_phi_learning_on_the_interval_chain_matches_the_reference(self):
        model = interval_model()
        np.testing.assert_array_equal(
            [model.phi_map(IntervalChainEnv().embed(i)) for i in range(10)], np.arange(10)
        )
        hyper = agents.AgentConfig(alpha=0.1, epsilon=0.3, gamma=0.9)
        for seed in range(5):
            q, _ = agents.run_q_phi(model, IntervalChainEnv(), 30, hyper, np.random.default_rng(seed))
            expected = reference_q_learning(10, 30, 0.1, 0.9, 0.3, ChainEnv.horizon, seed)
            np.testing.assert_array_equal(q.values, expected)

    def test_q_update_arithmetic(self):
        q = agents.QTable(np.array([[0.0, 0.0], [1.0, 2.0]]), alpha=0.5, gamma=0.9)
        agents.q_update(q, 0, 1, 1.0, 1, terminal=False)
        self.assertAlmostEqual(q.values[0, 1], 0.5 * (1.0 + 0.9 * 2.0))
        agents.q_update(q, 0, 0, 1.0, 1, terminal=True)
        self.assertAlmostEqual(q.values[0, 0], 0.5)

    def test_greedy_ties_take_the_lowest_action(self):
        q = agents.QTable.zeros(3, 4, agents.AgentConfig(epsilon=0.0))
        rng = np.random.default_rng(0)
        self.assertEqual({agents.epsilon_greedy(q, 1, rng) for _ in range(10)}, {0})

    def test_random_ties_spread_over_the_tied_actions(self):
        q = agents.QTable.zeros(1, 4, agents.AgentConfig(epsilon=0.0, tie_break=agents.TieBreak.RANDOM))
        q.values[0] = [0.0, 0.0, -1.0, 0.0]
        rng = np.random.default_rng(1)
        draws = [agents.epsilon_greedy(q, 0, rng) for _ in range(30_000)]
        frequencies = np.bincount(draws, minlength=4) / len(draws)
        np.testing.assert_allclose(frequencies, [1 / 3, 1 / 3, 0.0, 1 / 3], atol=0.02)
        q.values[0, 3] = 0.5
        self.assertEqual({agents.epsilon_greedy(q, 0, rng) for _ in range(20)}, {3})

    def test_full_exploration_is_uniform(self):
        q = agents.QTable.zeros(1, 4, agents.AgentConfig(epsilon=1.0))
        q.values[0] = [3.0, 0.0, 0.0, 0.0]
        rng = np.random.default_rng(2)
        draws = [agents.epsilon_greedy(q, 0, rng) for _ in range(100_000)]
        np.testing.assert_allclose(np.bincount(draws, minlength=4) / len(draws), 0.25, atol=0.01)

    def test_table_carries_over_between_calls(self):
        hyper = agents.AgentConfig(alpha=0.1, epsilon=0.1, gamma=0.9)
        rng = np.random.default_rng(0)
        q, _ = agents.run_q_learning(ChainEnv(), int, 10, 20, hyper, rng)
        before = q.values.copy()
        q_again, _ = agents.run_q_learning(ChainEnv(), int, 10, 5, hyper, rng, q)
        self.assertIs(q_again, q)
        self.assertFalse(np.array_equal(before, q.values))

    def test_learning_solves_the_chain(self):
        hyper = agents.AgentConfig(alpha=0.5, epsilon=0.1, gamma=0.9)
        rng = np.random.default_rng(1)
        q, curve = agents.run_q_learning(ChainEnv(), int, 10, 200, hyper, rng)
        self.assertEqual(agents.greedy_success_rate(ChainEnv(), int, q, 5, rng), 1.0)
        self.assertTrue(all(curve.successes[-20:]))

    def test_curve_frame(self):
        curve = agents.LearningCurve()
        for ret in (1.0, -2.0, 0.5):
            curve.append(ret, 10, ret > 0)
        frame = curve.to_frame()
        self.assertEqual(list(frame.columns), agents.CURVE_COLUMNS)
        np.testing.assert_allclose(frame["cum_reward"], [1.0, -1.0, -0.5])
        np.testing.assert_array_equal(frame["success"], [1, 0, 1])

    def test_phi_learning_checks_dimensions(self):
        model = abstraction.zero_model(4, abstraction.build_policy_table(2, 1), envs.EnvKind.CART_POLE, hidden=4)
        with self.assertRaises(DimensionMismatch):
            agents.run_q_phi(model, envs.puddle_task(), 1)

    def test_phi_learning_runs_on_puddle_world(self):
        model = abstraction.zero_model(2, abstraction.build_policy_table(4, 1), envs.EnvKind.PUDDLE, hidden=4)
        task = envs.puddle_task(horizon=30)
        q, curve = agents.run_q_phi(model, task, 3, rng=np.random.default_rng(0))
        self.assertEqual(q.values.shape, (4, 4))
        self.assertEqual(len(curve), 3)
        self.assertTrue(all(steps <= 30 for steps in curve.steps))

    def test_same_seed_same_curve(self):
        model = abstraction.zero_model(4, abstraction.build_policy_table(2, 1), envs.EnvKind.CART_POLE, hidden=4)
        task = envs.cart_pole_task()
        _, a = agents.run_q_phi(model, task, 4, rng=np.random.default_rng(5))
        _, b = agents.run_q_phi(model, task, 4, rng=np.random.default_rng(5))
        self.assertEqual(a.returns, b.returns)

    def test_values_stay_within_the_reward_bound(self):
        task = envs.puddle_task()
        env = envs.Environment(task)
        hyper = agents.AgentConfig(alpha=0.1, tie_break=agents.TieBreak.RANDOM)
        q, _ = agents.run_q_learning(
            env, lambda s: demo.expert_action(task, s), 4, 20, hyper, np.random.default_rng(3)
        )
        bound = env.bounds.rmax / (1 - env.bounds.gamma) + 1
        self.assertLessEqual(np.abs(q.values).max(), bound)

    @tag("slow")
    def test_exact_states_learn_a_greedy_path_to_the_goal(self):
        env = envs.Environment(envs.puddle_task(noise_std=0.0))
        hyper = agents.AgentConfig(alpha=0.5, epsilon=0.1, tie_break=agents.TieBreak.RANDOM)
        rng = np.random.default_rng(4)
        q, _ = agents.run_q_learning(env, lattice_index, 21 * 21, 200, hyper, rng)
        self.assertGreaterEqual(agents.greedy_success_rate(env, lattice_index, q, 5, rng), 0.95)


class LinearQTests(SimpleTestCase):
    def test_features_append_a_bias(self):
        env = envs.Environment(envs.puddle_task())
        lq = agents.LinearQ.zeros(env)
        np.testing.assert_array_equal(lq.features(np.array([0.2, 0.4])), [0.2, 0.4, 1.0])
        self.assertEqual(lq.weights.shape, (4, 3))

    def test_normalised_features_lie_in_the_unit_box(self):
        env = envs.Environment(envs.cart_pole_task())
        lq = agents.LinearQ.zeros(env, agents.AgentConfig(normalize_features=True))
        f = lq.features(np.array([2.4, -3.0, 0.0, 0.0]))
        np.testing.assert_allclose(f, [1.0, 0.0, 0.5, 0.5, 1.0])

    def test_semi_gradient_update(self):
        env = envs.Environment(envs.puddle_task())
        lq = agents.LinearQ.zeros(env, agents.AgentConfig(alpha=0.5))
        lq.update(np.array([0.2, 0.4]), 1, 1.0, np.array([0.2, 0.35]), terminal=True)
        np.testing.assert_allclose(lq.weights[1], [0.1, 0.2, 0.5])
        np.testing.assert_array_equal(lq.weights[0], 0.0)

    def test_linear_q_episodes(self):
        lq, curve = agents.run_linear_q(envs.cart_pole_task(), 5, rng=np.random.default_rng(0))
        self.assertEqual(len(curve), 5)
        self.assertTrue(np.all(np.isfinite(lq.weights)))
        self.assertTrue(all(1 <= steps <= 200 for steps in curve.steps))
