"""
Cross-level discrimination: spherical k-means on each branch's group features
inside the batch, then each branch is trained to predict the other branch's
cluster assignments against its centroids.
"""

from dataclasses import dataclass, field
from typing import List

import torch
import torch.nn.functional as F

from wildmoco.contrastive import finish_step, info_nce
from wildmoco.run_config import CLDConfig


@dataclass
class ClusterResult:
    centroids: torch.Tensor
    assignments: torch.Tensor
    inertia: float
    inertia_trace: List[float] = field(default_factory=list)

    def occupancy(self):
        return torch.bincount(self.assignments, minlength=self.centroids.shape[0])

    @property
    def occupied(self):
        return int((self.occupancy() > 0).sum())


def _sq_dist(x, centroids, assignments):
    return ((x - centroids[assignments]) ** 2).sum(dim=1)


def _assign(x, centroids):
    return torch.argmax(x @ centroids.T, dim=1)


def _farthest_point_init(x, k, generator):
    n = x.shape[0]
    chosen = [int(torch.randint(n, (1,), generator=generator))]
    dist = ((x - x[chosen[0]]) ** 2).sum(dim=1)
    for _ in range(1, min(k, n)):
        nxt = int(torch.argmax(dist))
        chosen.append(nxt)
        dist = torch.minimum(dist, ((x - x[nxt]) ** 2).sum(dim=1))
    # k > n: duplicates stay empty after the first assignment
    return x[[chosen[i % len(chosen)] for i in range(k)]].clone()


def _update_centroids(x, assignments, centroids):
    k = centroids.shape[0]
    sums = torch.zeros_like(centroids).index_add_(0, assignments, x)
    counts = torch.bincount(assignments, minlength=k)
    norms = sums.norm(dim=1, keepdim=True)
    ok = (counts > 0) & (norms.squeeze(1) > 1e-12)
    new = centroids.clone()
    new[ok] = sums[ok] / norms[ok]
    return new


def _reseed_empty(x, assignments, centroids):
    """Move each empty centroid onto the point farthest from its own centroid,
    taken only from clusters that keep at least one other member."""
    k = centroids.shape[0]
    counts = torch.bincount(assignments, minlength=k)
    empty = torch.nonzero(counts == 0).flatten().tolist()
    if not empty:
        return centroids
    dist = _sq_dist(x, centroids, assignments)
    taken = torch.zeros(x.shape[0], dtype=torch.bool)
    for cluster in empty:
        eligible = (counts[assignments] > 1) & ~taken
        if not eligible.any():
            break
        j = int(torch.argmax(torch.where(eligible, dist, torch.full_like(dist, -1.0))))
        centroids[cluster] = x[j]
        counts[assignments[j]] -= 1
        taken[j] = True
    return centroids


@torch.no_grad()
def local_kmeans(features, k, iters=10, seed=0):
    """Spherical k-means of unit-norm rows of ``features`` into ``k`` clusters."""
    if features.dim() != 2 or features.shape[0] < 1:
        raise ValueError(f"expected a non-empty (N, m) feature matrix, got {tuple(features.shape)}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    x = features.detach()
    generator = torch.Generator().manual_seed(int(seed))

    centroids = _farthest_point_init(x, k, generator)
    assignments = _assign(x, centroids)
    trace = [float(_sq_dist(x, centroids, assignments).sum())]
    for _ in range(iters):
        centroids = _reseed_empty(x, assignments, _update_centroids(x, assignments, centroids))
        new_assignments = _assign(x, centroids)
        trace.append(float(_sq_dist(x, centroids, new_assignments).sum()))
        converged = torch.equal(new_assignments, assignments)
        assignments = new_assignments
        if converged:
            break
    return ClusterResult(centroids=centroids, assignments=assignments, inertia=trace[-1], inertia_trace=trace)


def cld_loss(g, centroids, targets, tau_g):
    """Cross-entropy of g's similarity to every centroid, target = assigned cluster."""
    if tau_g <= 0:
        raise ValueError(f"temperature must be > 0, got {tau_g}")
    if centroids.shape[0] < 1:
        raise ValueError("need at least one centroid")
    if g.dim() == 1:
        g = g.unsqueeze(0)
    targets = torch.as_tensor(targets, dtype=torch.long, device=g.device).reshape(-1)
    if targets.shape[0] != g.shape[0]:
        raise ValueError(f"{g.shape[0]} features but {targets.shape[0]} targets")
    logits = g @ centroids.to(g.dtype).T / tau_g
    return F.cross_entropy(logits, targets)


def dual_branch_cld(g1, g2, cld_config=CLDConfig(), seeds=(0, 1)):
    """0.5 * [L(g1 | clusters of g2) + L(g2 | clusters of g1)] and both clusterings."""
    if g1.shape != g2.shape:
        raise ValueError(f"branch shape mismatch: {tuple(g1.shape)} vs {tuple(g2.shape)}")
    if g1.shape[0] < 1:
        raise ValueError("group loss needs a non-empty batch")
    r1 = local_kmeans(g1, cld_config.k, cld_config.kmeans_iters, seeds[0])
    r2 = local_kmeans(g2, cld_config.k, cld_config.kmeans_iters, seeds[1])
    loss = (0.5 * cld_loss(g1, r2.centroids, r2.assignments, cld_config.tau_g)
            + 0.5 * cld_loss(g2, r1.centroids, r1.assignments, cld_config.tau_g))
    return loss, (r1, r2)


def kmeans_seeds(base_seed, step):
    return 2 * (base_seed * 1_000_003 + step), 2 * (base_seed * 1_000_003 + step) + 1


def cld_terms(q1, q2, k_plus, negatives, g1, g2, tau_q, cld_config=CLDConfig(), seeds=(0, 1)):
    if hasattr(negatives, "negatives"):
        negatives = negatives.negatives()
    instance = 0.5 * (info_nce(q1, k_plus, negatives, tau_q) + info_nce(q2, k_plus, negatives, tau_q))
    group, clusters = dual_branch_cld(g1, g2, cld_config, seeds)
    return instance, group, clusters


def total_cld_loss(q1, q2, k_plus, negatives, g1, g2, lam, tau_q, tau_g,
                   k=32, kmeans_iters=10, seeds=(0, 1)):
    """Instance loss averaged over both query branches plus ``lam`` times the group loss."""
    config = CLDConfig(k=k, lam=lam, tau_g=tau_g, kmeans_iters=kmeans_iters)
    instance, group, _ = cld_terms(q1, q2, k_plus, negatives, g1, g2, tau_q, config, seeds)
    return instance + lam * group


def cld_step(views, state, queue, optimizer, cld_config=CLDConfig(), tau_q=0.2, m=0.999, seeds=(0, 1)):
    """One MoCo+CLD step; I1 and I2 are the two query branches, I_plus feeds the key."""
    k_plus = state.encode_key(views["I_plus"])
    q1, g1 = state.encode_query(views["I1"])
    q2, g2 = state.encode_query(views["I2"])
    instance, group, (r1, r2) = cld_terms(q1, q2, k_plus, queue.negatives(), g1, g2, tau_q, cld_config, seeds)
    loss = instance + cld_config.lam * group
    finish_step(loss, k_plus, state, queue, optimizer, m)
    terms = {
        "loss": loss.item(),
        "instance": instance.item(),
        "group": group.item(),
        "cluster_occupied": 0.5 * (r1.occupied + r2.occupied),
        "cluster_inertia": 0.5 * (r1.inertia + r2.inertia),
    }
    return terms, state, queue
