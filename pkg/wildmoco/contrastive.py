"""
Instance discrimination core: InfoNCE against a FIFO queue of key features,
and the momentum (EMA) update of the key encoder.

Every training step in the package ends the same way (``finish_step``):
gradient step on the query encoder, then momentum update of the key encoder,
then the current keys are pushed into the queue.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class TrainingDivergedError(RuntimeError):
    pass


def cosine_scores(q, keys):
    """Dot products of a unit query (d,) or queries (N, d) against keys (K, d)."""
    if q.shape[-1] != keys.shape[-1]:
        raise ValueError(f"dimension mismatch: query {q.shape[-1]} vs keys {keys.shape[-1]}")
    return q @ keys.T


def info_nce(q, k_pos, negatives, tau):
    """-log softmax of the positive among [positive, negatives] at temperature tau, batch mean.

    ``negatives`` may be empty (warmup); the loss is then exactly 0.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    if q.dim() == 1:
        q, k_pos = q.unsqueeze(0), k_pos.unsqueeze(0)
    if q.shape != k_pos.shape:
        raise ValueError(f"query/key shape mismatch: {tuple(q.shape)} vs {tuple(k_pos.shape)}")
    if negatives is None:
        negatives = q.new_zeros((0, q.shape[1]))
    if negatives.shape[-1] != q.shape[-1]:
        raise ValueError(f"dimension mismatch: query {q.shape[-1]} vs negatives {negatives.shape[-1]}")

    l_pos = (q * k_pos).sum(dim=1, keepdim=True)
    l_neg = q @ negatives.to(q.dtype).T
    logits = torch.cat([l_pos, l_neg], dim=1) / tau
    labels = torch.zeros(q.shape[0], dtype=torch.long, device=q.device)
    return F.cross_entropy(logits, labels)


def _param_list(params):
    if isinstance(params, nn.Module):
        return list(params.parameters())
    return list(params)


@torch.no_grad()
def momentum_update(query_params, key_params, m):
    """theta_k <- m * theta_k + (1 - m) * theta_q, in place."""
    if not 0 <= m < 1:
        raise ValueError(f"momentum must lie in [0, 1), got {m}")
    q_list, k_list = _param_list(query_params), _param_list(key_params)
    if len(q_list) != len(k_list):
        raise ValueError(f"parameter count mismatch: {len(q_list)} query vs {len(k_list)} key")
    for pq, pk in zip(q_list, k_list):
        if pq.shape != pk.shape:
            raise ValueError(f"parameter shape mismatch: {tuple(pq.shape)} vs {tuple(pk.shape)}")
        pk.mul_(m).add_(pq.detach(), alpha=1 - m)
    return k_list


class FeatureQueue:
    """Fixed-capacity circular buffer of unit-norm key features."""

    def __init__(self, capacity, dim, dtype=torch.float32, norm_tol=1e-5):
        if capacity < 1 or dim < 1:
            raise ValueError(f"queue needs positive capacity and dim, got {capacity}x{dim}")
        self.capacity = capacity
        self.dim = dim
        self.norm_tol = norm_tol
        self.storage = torch.zeros(capacity, dim, dtype=dtype)
        self.ptr = 0
        self.filled = 0

    def __len__(self):
        return self.filled

    @property
    def is_full(self):
        return self.filled == self.capacity

    def push(self, keys):
        keys = keys.detach()
        if keys.dim() == 1:
            keys = keys.unsqueeze(0)
        n = keys.shape[0]
        if keys.shape[1] != self.dim:
            raise ValueError(f"key dimension {keys.shape[1]} does not match queue dimension {self.dim}")
        if n > self.capacity:
            raise ValueError(f"batch of {n} keys exceeds queue capacity {self.capacity}")
        if n == 0:
            return self
        norms = keys.double().norm(dim=1)
        if (norms - 1).abs().max().item() > self.norm_tol:
            raise ValueError("queue only accepts unit-norm keys")
        idx = (self.ptr + torch.arange(n)) % self.capacity
        self.storage[idx] = keys.to(self.storage.dtype).cpu()
        self.ptr = (self.ptr + n) % self.capacity
        self.filled = min(self.capacity, self.filled + n)
        return self

    def contents(self):
        """Stored keys, oldest first."""
        if not self.is_full:
            return self.storage[:self.filled].clone()
        return torch.cat([self.storage[self.ptr:], self.storage[:self.ptr]]).clone()

    def negatives(self):
        return self.storage[:self.filled].clone()

    def state_dict(self):
        return {"storage": self.storage.clone(), "ptr": self.ptr, "filled": self.filled}

    def load_state_dict(self, state):
        storage = state["storage"]
        if tuple(storage.shape) != (self.capacity, self.dim):
            raise ValueError(f"queue state of shape {tuple(storage.shape)} does not fit "
                             f"{self.capacity}x{self.dim}")
        self.storage = storage.clone().to(self.storage.dtype)
        self.ptr = int(state["ptr"])
        self.filled = int(state["filled"])
        return self


def queue_push(queue, keys):
    return queue.push(keys)


def make_optimizer(state, lr, momentum=0.9, weight_decay=1e-4):
    return torch.optim.SGD(state.query_parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)


def finish_step(loss, keys, state, queue, optimizer, m):
    if not torch.isfinite(loss).all():
        raise TrainingDivergedError(f"non-finite loss {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    momentum_update(state.query_parameters(), state.key_parameters(), m)
    queue_push(queue, keys)


def moco_loss(views, state, negatives, tau, query_role="I1"):
    k_plus = state.encode_key(views["I_plus"])
    q, _ = state.encode_query(views[query_role])
    return info_nce(q, k_plus, negatives, tau), k_plus


def moco_step(views, state, queue, optimizer, tau=0.2, m=0.999, query_role="I1"):
    """One MoCo-v2 step; ``query_role="I2"`` gives the rotation-query variant."""
    loss, k_plus = moco_loss(views, state, queue.negatives(), tau, query_role)
    finish_step(loss, k_plus, state, queue, optimizer, m)
    value = loss.item()
    return {"loss": value, "instance": value}, state, queue


def cosine_lr(lr0, step, total_steps):
    """Half-cosine decay from lr0 at step 0 towards 0 at ``total_steps``."""
    if total_steps <= 0:
        return lr0
    return lr0 * 0.5 * (1 + math.cos(math.pi * min(step, total_steps) / total_steps))


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr
