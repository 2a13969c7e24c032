"""InfoNCE, the momentum update, the negative queue and the MoCo step."""

import math

import numpy as np
import pytest
import torch
from scipy.special import logsumexp

from wildmoco.contrastive import (FeatureQueue, TrainingDivergedError, cosine_scores, finish_step, info_nce,
                                  make_optimizer, momentum_update, moco_step)


def _nce_oracle(q, k, negatives, tau):
    logits = np.concatenate([[q @ k], negatives @ q]) / tau
    return -logits[0] + logsumexp(logits)


class TestCosineScores:
    def test_examples(self):
        q = torch.tensor([1.0, 0.0])
        keys = torch.tensor([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        torch.testing.assert_close(cosine_scores(q, keys), torch.tensor([1.0, 0.0, -1.0]))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            cosine_scores(torch.ones(3), torch.ones(2, 4))


class TestInfoNCE:
    def test_no_negatives_is_zero(self):
        q = torch.tensor([0.6, 0.8])
        assert info_nce(q, q, torch.zeros(0, 2), 0.2).item() == 0.0
        assert info_nce(q, q, None, 0.2).item() == 0.0

    def test_single_orthogonal_negative(self):
        e1, e2 = torch.tensor([1.0, 0.0], dtype=torch.float64), torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        assert info_nce(e1, e1, e2, 1.0).item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-5)
        assert info_nce(e1, e1, e2, 1.0).item() == pytest.approx(0.31326, abs=1e-5)

    def test_matches_oracle(self, unit_rows):
        rng = np.random.default_rng(42)
        for _ in range(100):
            d, n_neg = int(rng.integers(2, 9)), int(rng.integers(0, 12))
            q, k = unit_rows(rng, 1, d)[0], unit_rows(rng, 1, d)[0]
            negatives = unit_rows(rng, n_neg, d)
            tau = float(rng.uniform(0.05, 1.0))
            expected = _nce_oracle(q.numpy(), k.numpy(), negatives.numpy().reshape(n_neg, d), tau)
            assert info_nce(q, k, negatives, tau).item() == pytest.approx(expected, rel=1e-9, abs=1e-12)

    def test_batch_is_mean_of_rows(self, unit_rows):
        rng = np.random.default_rng(1)
        q, k, negatives = unit_rows(rng, 5, 4), unit_rows(rng, 5, 4), unit_rows(rng, 7, 4)
        rows = [info_nce(q[i], k[i], negatives, 0.2).item() for i in range(5)]
        assert info_nce(q, k, negatives, 0.2).item() == pytest.approx(np.mean(rows), rel=1e-12)

    def test_lower_temperature_sharpens_aligned_positive(self):
        q = torch.tensor([1.0, 0.0], dtype=torch.float64)
        negatives = torch.tensor([[0.0, 1.0], [-1.0, 0.0]], dtype=torch.float64)
        losses = [info_nce(q, q, negatives, tau).item() for tau in (1.0, 0.5, 0.2, 0.07)]
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            info_nce(torch.ones(2), torch.ones(2), None, 0.0)


class TestMomentumUpdate:
    """theta_k <- m * theta_k + (1 - m) * theta_q."""

    def test_examples(self):
        pk = [torch.tensor([0.0])]
        momentum_update([torch.tensor([1.0])], pk, 0.999)
        assert pk[0].item() == pytest.approx(0.001)
        pk = [torch.tensor([3.0])]
        momentum_update([torch.tensor([7.0])], pk, 0.0)
        assert pk[0].item() == 7.0

    def test_equal_parameters_stay_equal(self):
        pk = [torch.tensor([2.5, -1.0])]
        momentum_update([torch.tensor([2.5, -1.0])], pk, 0.9)
        torch.testing.assert_close(pk[0], torch.tensor([2.5, -1.0]))

    def test_closed_form_under_fixed_query(self):
        q, k0, m = torch.tensor([1.0], dtype=torch.float64), torch.tensor([0.0], dtype=torch.float64), 0.9
        pk = [k0.clone()]
        for _ in range(50):
            momentum_update([q], pk, m)
        expected = m ** 50 * k0 + (1 - m ** 50) * q
        torch.testing.assert_close(pk[0], expected, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("m", [1.0, -0.1, 1.5])
    def test_momentum_range(self, m):
        with pytest.raises(ValueError):
            momentum_update([torch.zeros(1)], [torch.zeros(1)], m)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            momentum_update([torch.zeros(2)], [torch.zeros(3)], 0.5)


class TestFeatureQueue:
    """FIFO ring buffer of unit-norm keys."""

    def test_fifo_example(self):
        queue = FeatureQueue(3, 2, dtype=torch.float64)
        a, b, c, d = (torch.tensor([[x, y]], dtype=torch.float64)
                      for x, y in ((1, 0), (0, 1), (-1, 0), (0, -1)))
        queue.push(torch.cat([a, b]))
        queue.push(torch.cat([c, d]))
        assert queue.is_full
        torch.testing.assert_close(queue.contents(), torch.cat([b, c, d]))

    def test_full_batch_replaces_everything(self, unit_rows):
        rng = np.random.default_rng(0)
        queue = FeatureQueue(4, 3, dtype=torch.float64)
        queue.push(unit_rows(rng, 4, 3))
        fresh = unit_rows(rng, 4, 3)
        queue.push(fresh)
        torch.testing.assert_close(queue.contents(), fresh)

    def test_random_pushes_keep_latest_keys(self, unit_rows):
        rng = np.random.default_rng(42)
        capacity, dim = 16, 4
        queue = FeatureQueue(capacity, dim, dtype=torch.float64)
        history = []
        for _ in range(1000):
            batch = unit_rows(rng, int(rng.integers(1, capacity + 1)), dim)
            queue.push(batch)
            history.extend(batch)
            assert len(queue) == min(capacity, len(history))
            torch.testing.assert_close(queue.contents(), torch.stack(history[-capacity:]))

    def test_rejects_non_unit_keys(self):
        queue = FeatureQueue(4, 2)
        with pytest.raises(ValueError, match="unit-norm"):
            queue.push(torch.tensor([[2.0, 0.0]]))
        assert len(queue) == 0

    def test_rejects_oversized_batch_and_wrong_dim(self, unit_rows):
        queue = FeatureQueue(2, 3, dtype=torch.float64)
        with pytest.raises(ValueError):
            queue.push(unit_rows(np.random.default_rng(0), 3, 3))
        with pytest.raises(ValueError):
            queue.push(unit_rows(np.random.default_rng(0), 1, 4))

    def test_state_dict_restores_order(self, unit_rows):
        rng = np.random.default_rng(3)
        queue = FeatureQueue(5, 2, dtype=torch.float64)
        for _ in range(4):
            queue.push(unit_rows(rng, 2, 2))
        restored = FeatureQueue(5, 2, dtype=torch.float64).load_state_dict(queue.state_dict())
        torch.testing.assert_close(restored.contents(), queue.contents())
        assert (restored.ptr, restored.filled) == (queue.ptr, queue.filled)


class TestMocoStep:
    """One full MoCo-v2 update on a small double-precision encoder."""

    def test_key_encoder_moves_only_by_momentum(self, toy_state, toy_views):
        state = toy_state()
        views = toy_views(n=4)
        queue = FeatureQueue(8, state.feature_dim, dtype=torch.float64)
        optimizer = make_optimizer(state, lr=0.1)
        key_before = [p.clone() for p in state.key_parameters()]
        moco_step(views, state, queue, optimizer, tau=0.2, m=0.99)
        for before, pq, pk in zip(key_before, state.query_parameters(), state.key_parameters()):
            assert torch.equal(pk, before.mul(0.99).add(pq.detach(), alpha=1 - 0.99))

    def test_zero_lr_leaves_both_encoders(self, toy_state, toy_views):
        state = toy_state()
        queue = FeatureQueue(8, state.feature_dim, dtype=torch.float64)
        optimizer = make_optimizer(state, lr=0.0, momentum=0.0, weight_decay=0.0)
        query_before = [p.clone() for p in state.query_parameters()]
        key_before = [p.clone() for p in state.key_parameters()]
        moco_step(toy_views(n=4), state, queue, optimizer, m=0.999)
        for before, p in zip(query_before + key_before, state.query_parameters() + state.key_parameters()):
            torch.testing.assert_close(p, before, rtol=0, atol=1e-15)

    def test_queue_receives_pre_update_keys(self, toy_state, toy_views):
        state = toy_state()
        views = toy_views(n=4)
        expected = state.encode_key(views["I_plus"])
        queue = FeatureQueue(8, state.feature_dim, dtype=torch.float64)
        moco_step(views, state, queue, make_optimizer(state, lr=0.5))
        assert len(queue) == 4
        torch.testing.assert_close(queue.contents(), expected)

    def test_loss_matches_independent_computation(self, toy_state, toy_views, unit_rows):
        state = toy_state()
        views = toy_views(n=2)
        negatives = unit_rows(np.random.default_rng(0), 6, state.feature_dim)
        queue = FeatureQueue(8, state.feature_dim, dtype=torch.float64).push(negatives)
        with torch.no_grad():
            q, _ = state.encode_query(views["I1"])
            k = state.encode_key(views["I_plus"])
        expected = np.mean([_nce_oracle(q[i].numpy(), k[i].numpy(), negatives.numpy(), 0.2) for i in range(2)])
        terms, _, _ = moco_step(views, state, queue, make_optimizer(state, lr=0.1), tau=0.2)
        assert terms["loss"] == pytest.approx(expected, rel=1e-9)

    def test_own_keys_beat_chance(self, toy_state, toy_views):
        state = toy_state()
        views = toy_views(n=4)
        views["I1"] = views["I_plus"]
        queue = FeatureQueue(4, state.feature_dim, dtype=torch.float64).push(state.encode_key(views["I_plus"]))
        terms, _, _ = moco_step(views, state, queue, make_optimizer(state, lr=0.1))
        assert terms["loss"] < math.log(1 + 4)

    def test_non_finite_loss_stops_training(self, toy_state):
        state = toy_state()
        queue = FeatureQueue(4, state.feature_dim, dtype=torch.float64)
        with pytest.raises(TrainingDivergedError):
            finish_step(torch.tensor(float("nan")), None, state, queue, make_optimizer(state, 0.1), 0.99)

    def test_key_encoder_tracks_query_history(self, toy_state, toy_views):
        """Over 50 steps the key encoder is the exponential blend of every post-step query encoder,
        and the optimizer step itself never touches it."""
        m, steps = 0.999, 50
        state = toy_state(seed=3)
        queue = FeatureQueue(16, state.feature_dim, dtype=torch.float64)
        optimizer = make_optimizer(state, lr=0.5)
        key_initial = [p.detach().clone() for p in state.key_parameters()]
        query_history = []
        snapshots = {}

        def before_step(opt, args, kwargs):
            snapshots["key"] = [p.detach().clone() for p in state.key_parameters()]

        def after_step(opt, args, kwargs):
            for before, pk in zip(snapshots["key"], state.key_parameters()):
                assert torch.equal(pk, before)

        optimizer.register_step_pre_hook(before_step)
        optimizer.register_step_post_hook(after_step)
        for step in range(steps):
            moco_step(toy_views(n=4, seed=step), state, queue, optimizer, tau=0.2, m=m)
            query_history.append([p.detach().clone() for p in state.query_parameters()])
            assert all(p.grad is None for p in state.key_parameters())

        for i, (k0, pk) in enumerate(zip(key_initial, state.key_parameters())):
            expected = m ** steps * k0
            for t, params in enumerate(query_history, start=1):
                expected = expected + (1 - m) * m ** (steps - t) * params[i]
            torch.testing.assert_close(pk.detach(), expected, rtol=0, atol=1e-8)
        assert not torch.equal(query_history[0][0], query_history[-1][0])
