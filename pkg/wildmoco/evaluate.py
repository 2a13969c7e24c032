"""
Downstream evaluation harness.

Two protocols on the long-tail foreground/background set:

  * linear:     frozen pooled backbone features, one linear classifier
  * end_to_end: backbone plus linear head trained together

Both report top-1 accuracy and precision/recall of the foreground class,
in percent, on the held-out split.
"""

import copy
import math
import os
from dataclasses import dataclass, field
from typing import List, NamedTuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import confusion_matrix
from torch.utils.data import DataLoader
from tqdm import tqdm

from wildmoco.contrastive import cosine_lr, set_lr
from wildmoco.dataset import LabeledCrops, PatchDataset
from wildmoco.log_helper import write_log
from wildmoco.run_config import ProbeConfig
from wildmoco.tiling import LABEL_INDEX, subsample_labels

NUM_CLASSES = 2
FG_LABEL = LABEL_INDEX["foreground"]
RESULT_COLUMNS = ["run_id", "mode", "fraction", "top1", "prec_fg", "rec_fg", "prec_undefined"]


class Metrics(NamedTuple):
    top1: float
    precision_fg: float
    recall_fg: float
    precision_undefined: bool


def compute_metrics(predictions, labels, fg_label=FG_LABEL):
    predictions = np.asarray(predictions).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if predictions.shape != labels.shape or labels.size == 0:
        raise ValueError(f"need matching non-empty predictions and labels, got "
                         f"{predictions.size} and {labels.size}")
    tn, fp, fn, tp = confusion_matrix(labels == fg_label, predictions == fg_label,
                                      labels=[False, True]).ravel()
    top1 = 100.0 * float(np.mean(predictions == labels))
    undefined = (tp + fp) == 0
    precision = 0.0 if undefined else 100.0 * tp / (tp + fp)
    recall = 0.0 if (tp + fn) == 0 else 100.0 * tp / (tp + fn)
    return Metrics(top1, float(precision), float(recall), bool(undefined))


@dataclass
class ProbeResult:
    mode: str
    label_fraction: float
    metrics: Metrics
    predictions: np.ndarray
    labels: np.ndarray
    patch_ids: List[str] = field(default_factory=list)

    @property
    def top1(self):
        return self.metrics.top1

    @property
    def precision_fg(self):
        return self.metrics.precision_fg

    @property
    def recall_fg(self):
        return self.metrics.recall_fg

    def row(self, run_id):
        return {"run_id": run_id, "mode": self.mode, "fraction": self.label_fraction,
                "top1": self.top1, "prec_fg": self.precision_fg, "rec_fg": self.recall_fg,
                "prec_undefined": self.metrics.precision_undefined}


@torch.no_grad()
def extract_features(state, dataset, batch_size=256):
    """Pooled backbone features of every item in ``dataset`` (no augmentation)."""
    was_training = state.training
    state.eval()
    feats, labels = [], []
    for images, targets in DataLoader(dataset, batch_size=batch_size, shuffle=False):
        feats.append(state.pooled(images).float())
        labels.append(targets)
    state.train(was_training)
    if not feats:
        raise ValueError("no items to extract features from")
    return torch.cat(feats).numpy(), torch.cat(labels).numpy()


def _check_two_classes(labels):
    if len(np.unique(np.asarray(labels))) < NUM_CLASSES:
        raise ValueError("degenerate training set: both foreground and background are needed")


def _train_classifier(model, params, n, fetch, cfg, desc):
    """SGD with per-step cosine decay over ``cfg.epochs`` passes of ``n`` items."""
    optimizer = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    generator = torch.Generator().manual_seed(cfg.seed)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    model.train()
    for epoch in tqdm(range(cfg.epochs), desc=desc, disable=cfg.epochs < 20):
        perm = torch.randperm(n, generator=generator)
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            set_lr(optimizer, cosine_lr(cfg.lr, step, total))
            inputs, targets = fetch(idx, epoch)
            loss = F.cross_entropy(model(inputs), targets)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1
    model.eval()
    return model


def linear_probe(train_feats, train_labels, val_feats, val_labels, label_fraction=1.0,
                 probe_config=ProbeConfig(), patch_ids=None):
    """Fit a linear classifier on frozen features and score it on the held-out features."""
    _check_two_classes(train_labels)
    x = torch.as_tensor(np.asarray(train_feats), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(train_labels), dtype=torch.long)
    torch.manual_seed(probe_config.seed)
    classifier = nn.Linear(x.shape[1], NUM_CLASSES)
    _train_classifier(classifier, classifier.parameters(), x.shape[0],
                      lambda idx, epoch: (x[idx], y[idx]), probe_config, "linear probe")
    with torch.no_grad():
        logits = classifier(torch.as_tensor(np.asarray(val_feats), dtype=torch.float32))
    predictions = logits.argmax(dim=1).numpy()
    return ProbeResult("linear", label_fraction, compute_metrics(predictions, val_labels),
                       predictions, np.asarray(val_labels), list(patch_ids or []))


class FinetuneClassifier(nn.Module):
    def __init__(self, state):
        super().__init__()
        self.backbone = copy.deepcopy(state.backbone_q)
        for param in self.backbone.parameters():
            param.requires_grad = True
        self.register_buffer("input_mean", state.input_mean.clone())
        self.register_buffer("input_std", state.input_std.clone())
        self.fc = nn.Linear(self.backbone.out_dim, NUM_CLASSES)

    def forward(self, x):
        x = (x - self.input_mean.view(1, -1, 1, 1)) / self.input_std.view(1, -1, 1, 1)
        return self.fc(self.backbone(x))


def finetune_end_to_end(state, train_crops, val_crops, label_fraction=1.0, finetune_config=None):
    """Train a copy of the query backbone plus a linear head on ``train_crops``; ``state`` is left untouched."""
    cfg = finetune_config or ProbeConfig(epochs=200, lr=0.01)
    _check_two_classes(train_crops.patches.labels)
    torch.manual_seed(cfg.seed)
    model = FinetuneClassifier(state)

    def fetch(idx, epoch):
        train_crops.set_epoch(epoch)
        items = [train_crops[int(i)] for i in idx]
        return torch.stack([img for img, _ in items]), torch.stack([lbl for _, lbl in items])

    _train_classifier(model, model.parameters(), len(train_crops), fetch, cfg, "finetune")
    predictions, labels = [], []
    with torch.no_grad():
        for images, targets in DataLoader(val_crops, batch_size=cfg.batch_size, shuffle=False):
            predictions.append(model(images).argmax(dim=1))
            labels.append(targets)
    predictions = torch.cat(predictions).numpy()
    labels = torch.cat(labels).numpy()
    return ProbeResult("end_to_end", label_fraction, compute_metrics(predictions, labels), predictions, labels,
                       [r.patch_id for r in val_crops.patches.records])


def load_split(manifest, source, split):
    """Patches of one split, read from a patch directory or cropped from in-memory frames."""
    if isinstance(source, str):
        return PatchDataset.from_patch_dir(manifest, source, splits=(split,))
    return PatchDataset.from_frames(manifest, source, splits=(split,))


def evaluate_linear(state, manifest, source, fraction, probe_config, crop_size, eval_split="val", seed=0):
    subset = subsample_labels(manifest, fraction, rng=seed)
    # one seeded random crop per train patch, drawn before the single feature pass
    train = LabeledCrops(load_split(subset, source, "train"), crop_size, train=True, seed=probe_config.seed)
    held_out = LabeledCrops(load_split(subset, source, eval_split), crop_size)
    train_feats, train_labels = extract_features(state, train, probe_config.batch_size)
    val_feats, val_labels = extract_features(state, held_out, probe_config.batch_size)
    write_log(f"linear probe: {len(train)} train / {len(held_out)} {eval_split} at fraction {fraction}")
    return linear_probe(train_feats, train_labels, val_feats, val_labels, fraction, probe_config,
                        patch_ids=[r.patch_id for r in held_out.patches.records])


def evaluate_finetune(state, manifest, source, fraction, finetune_config, crop_size, eval_split="val", seed=0):
    subset = subsample_labels(manifest, fraction, rng=seed)
    train = LabeledCrops(load_split(subset, source, "train"), crop_size, train=True, seed=finetune_config.seed)
    held_out = LabeledCrops(load_split(subset, source, eval_split), crop_size)
    write_log(f"finetune: {len(train)} train / {len(held_out)} {eval_split} at fraction {fraction}")
    return finetune_end_to_end(state, train, held_out, fraction, finetune_config)


def append_results(path, run_id, result):
    df = pd.DataFrame([result.row(run_id)], columns=RESULT_COLUMNS)
    df.to_csv(path, mode="a", header=not os.path.exists(path), index=False)
    return path


def write_predictions(path, result):
    ids = result.patch_ids if len(result.patch_ids) == len(result.labels) else [""] * len(result.labels)
    pd.DataFrame({"patch_id": ids, "label": result.labels, "prediction": result.predictions}).to_csv(
        path, index=False)
    return path
