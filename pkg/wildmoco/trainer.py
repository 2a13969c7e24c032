"""
Pretraining driver
------------------
Runs one configured strategy over the pretraining patch set: SGD on the query
encoder with per-step cosine decay, momentum key encoder, FIFO negative queue.
Writes ``metrics.csv`` rows, periodic ``checkpoints/ckpt_<step>.bin`` files and
an optional kNN monitor on the downstream val split.

Randomness is stateless per position: batch order comes from (data_seed, epoch),
augmentation from (aug_seed, epoch, index), k-means from (kmeans_seed, step)
and the mixing draw from (mix_seed, step), so a resumed run replays exactly
the steps an uninterrupted run would have taken.
"""

import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader

from wildmoco.augment import channel_stats
from wildmoco.checkpoint import checkpoint_name, load_checkpoint, save_checkpoint
from wildmoco.cld import cld_step, kmeans_seeds
from wildmoco.contrastive import (FeatureQueue, TrainingDivergedError, cosine_lr, make_optimizer,
                                  moco_step, set_lr)
from wildmoco.dataset import LabeledCrops, PretrainViews
from wildmoco.encoder import encoder_from_config
from wildmoco.evaluate import extract_features
from wildmoco.log_helper import write_log
from wildmoco.mixgeo import mixco_step
from wildmoco.run_config import flat_dict, from_flat

METRIC_COLUMNS = ["step", "epoch", "loss", "knn_acc", "lr", "wall_time"]
STRATEGY_TERMS = {
    "moco_v2": ["instance"],
    "moco_geo": ["instance"],
    "moco_cld": ["instance", "group", "cluster_occupied", "cluster_inertia"],
    "geocld": ["instance", "group", "cluster_occupied", "cluster_inertia"],
    "mixco": ["instance", "mixed", "mix_lambda"],
}


@dataclass
class MetricRow:
    step: int
    epoch: int
    loss: float
    lr: float
    wall_time: float
    knn_acc: Optional[float] = None
    terms: dict = field(default_factory=dict)

    def as_dict(self, strategy):
        row = {"step": self.step, "epoch": self.epoch, "loss": self.loss, "knn_acc": self.knn_acc,
               "lr": self.lr, "wall_time": self.wall_time}
        row.update({name: self.terms.get(name) for name in STRATEGY_TERMS[strategy]})
        return row


@dataclass
class KnnData:
    """Labeled downstream crops for the pretraining-time kNN monitor."""
    train: LabeledCrops
    val: LabeledCrops


@dataclass
class PretrainResult:
    run_dir: str
    metrics_path: str
    checkpoint_path: str
    final_step: int
    state: object = None
    queue: object = None


@torch.no_grad()
def knn_monitor(train_feats, train_labels, eval_feats, eval_labels, k=20, t=0.02, num_classes=None):
    """Weighted kNN top-1 (percent): each of the k nearest train features votes exp(sim / t).

    The class count defaults to one past the largest label seen in either set.
    """
    train = torch.nn.functional.normalize(torch.as_tensor(np.asarray(train_feats), dtype=torch.float64), dim=1)
    query = torch.nn.functional.normalize(torch.as_tensor(np.asarray(eval_feats), dtype=torch.float64), dim=1)
    train_labels = torch.as_tensor(np.asarray(train_labels), dtype=torch.long)
    eval_labels = torch.as_tensor(np.asarray(eval_labels), dtype=torch.long)
    if k < 1 or k > train.shape[0]:
        raise ValueError(f"k={k} is outside [1, {train.shape[0]}] for this train set")
    if t <= 0:
        raise ValueError(f"temperature must be > 0, got {t}")
    if num_classes is None:
        num_classes = int(max(train_labels.max().item(), eval_labels.max().item() if len(eval_labels) else 0)) + 1
    sims, idx = (query @ train.T).topk(k, dim=1)
    weights = torch.exp((sims - 1) / t)
    votes = torch.zeros(query.shape[0], num_classes, dtype=torch.float64)
    votes.scatter_add_(1, train_labels[idx], weights)
    predictions = votes.argmax(dim=1)
    return 100.0 * (predictions == eval_labels).double().mean().item()


def set_determinism(config):
    torch.manual_seed(config.init_seed)
    if config.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.set_num_threads(1)


def epoch_batches(n, batch_size, data_seed, epoch):
    generator = torch.Generator().manual_seed(int(data_seed) * 100_003 + int(epoch))
    perm = torch.randperm(n, generator=generator).tolist()
    return [perm[b * batch_size:(b + 1) * batch_size] for b in range(n // batch_size)]


def run_step(config, views, state, queue, optimizer, step):
    strategy = config.strategy
    if strategy in ("moco_v2", "moco_geo"):
        query_role = "I1" if strategy == "moco_v2" else "I2"
        terms, _, _ = moco_step(views, state, queue, optimizer, config.tau_q, config.momentum, query_role)
    elif strategy in ("moco_cld", "geocld"):
        terms, _, _ = cld_step(views, state, queue, optimizer, config.cld, config.tau_q, config.momentum,
                               seeds=kmeans_seeds(config.cld.kmeans_seed, step))
    else:
        rng = np.random.default_rng([config.mix.seed, step])
        terms, _, _ = mixco_step(views, state, queue, optimizer, config.mix, rng, config.tau_q, config.momentum)
    return terms


def run_knn(state, knn_data, config):
    train_feats, train_labels = extract_features(state, knn_data.train)
    val_feats, val_labels = extract_features(state, knn_data.val)
    k = min(config.knn_k, len(train_labels))
    return knn_monitor(train_feats, train_labels, val_feats, val_labels, k=k, t=config.knn_t)


def checkpoint_payload(config, state, queue, optimizer, step, epoch):
    return {"state": state.state_dict(), "queue": queue.state_dict(), "optimizer": optimizer.state_dict(),
            "step": step, "epoch": epoch, "config": flat_dict(config)}


def restore_encoder(payload):
    """Rebuild the EncoderState stored in a checkpoint payload."""
    config = from_flat(payload["config"])
    state = encoder_from_config(config)
    state.load_state_dict(payload["state"])
    return state, config


def append_metric(path, row, strategy):
    df = pd.DataFrame([row.as_dict(strategy)], columns=METRIC_COLUMNS + STRATEGY_TERMS[strategy])
    df.to_csv(path, mode="a", header=not os.path.exists(path), index=False)


def pretrain(config, patches, run_dir, knn_data=None, resume_from=None, max_steps=None):
    """
    patches     -> PatchDataset of the pretrain split
    run_dir     -> fresh run directory (see dir_helper.create_run_dir)
    knn_data    -> optional KnnData for the monitor
    resume_from -> checkpoint path; the run continues at its step in ``run_dir``
    max_steps   -> stop early after this global step (the schedule still spans all epochs)
    """
    config.validate()
    set_determinism(config)
    if len(patches) == 0:
        raise ValueError("pretrain split is empty")
    if len(patches) < config.batch_size:
        raise ValueError(f"{len(patches)} pretrain patches cannot fill one batch of {config.batch_size}")

    views = PretrainViews(patches, config.view_policy, config.aug, seed=config.aug_seed)
    steps_per_epoch = len(patches) // config.batch_size
    total_steps = steps_per_epoch * config.epochs
    last_step = total_steps if max_steps is None else min(total_steps, max_steps)

    state = encoder_from_config(config)
    state.set_normalization(*channel_stats(patches.images))
    state.train()
    optimizer = make_optimizer(state, config.initial_lr, config.sgd_momentum, config.weight_decay)
    queue = FeatureQueue(config.queue_size, config.feature_dim)
    step = 0
    if resume_from:
        payload = load_checkpoint(resume_from)
        state.load_state_dict(payload["state"])
        queue.load_state_dict(payload["queue"])
        optimizer.load_state_dict(payload["optimizer"])
        step = int(payload["step"])
        write_log(f"resumed from {resume_from} at step {step}")

    metrics_path = os.path.join(run_dir, "metrics.csv")
    checkpoint_dir = os.path.join(run_dir, "checkpoints")
    log_file = open(os.path.join(run_dir, "run.log"), "a", encoding="utf-8")
    write_log(f"pretrain {config.run_id or config.preset}: strategy={config.strategy} "
              f"patches={len(patches)} steps={total_steps} lr0={config.initial_lr}", log_file)
    start = time.time()
    checkpoint_path = None
    try:
        while step < last_step:
            epoch = step // steps_per_epoch
            views.set_epoch(epoch)
            batches = epoch_batches(len(patches), config.batch_size, config.data_seed, epoch)
            skip = step - epoch * steps_per_epoch
            loader = DataLoader(views, batch_sampler=batches[skip:], num_workers=config.num_workers)
            for batch_in_epoch, batch in enumerate(loader, start=skip):
                lr = cosine_lr(config.initial_lr, step, total_steps)
                set_lr(optimizer, lr)
                try:
                    terms = run_step(config, batch, state, queue, optimizer, step)
                except TrainingDivergedError as e:
                    write_log(f"diverged at step {step} epoch {epoch} lr {lr}: {e}", log_file, level="ERROR")
                    raise
                step += 1

                knn_acc = None
                epoch_done = batch_in_epoch == steps_per_epoch - 1
                if (knn_data is not None and config.knn_every and epoch_done
                        and (epoch + 1) % config.knn_every == 0):
                    knn_acc = run_knn(state, knn_data, config)
                    write_log(f"epoch {epoch} knn top1 {knn_acc:.2f}", log_file)

                if step % config.log_every == 0 or knn_acc is not None:
                    wall = 0.0 if config.deterministic else round(time.time() - start, 3)
                    append_metric(metrics_path, MetricRow(step, epoch, terms["loss"], lr, wall, knn_acc, terms),
                                  config.strategy)
                if config.checkpoint_every and step % config.checkpoint_every == 0:
                    save_checkpoint(os.path.join(checkpoint_dir, checkpoint_name(step)),
                                    checkpoint_payload(config, state, queue, optimizer, step, epoch))
                if step >= last_step:
                    break
            if epoch_done:
                write_log(f"epoch {epoch} done, step {step}, loss {terms['loss']:.4f}", log_file)

        checkpoint_path = os.path.join(checkpoint_dir, checkpoint_name(step))
        save_checkpoint(checkpoint_path, checkpoint_payload(config, state, queue, optimizer, step,
                                                            max(step - 1, 0) // max(steps_per_epoch, 1)))
        write_log(f"finished at step {step} after {time.time() - start:.1f}s, checkpoint {checkpoint_path}", log_file)
    finally:
        log_file.close()
    return PretrainResult(run_dir, metrics_path, checkpoint_path, step, state, queue)
