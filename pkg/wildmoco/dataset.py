import os
import pickle
from collections import defaultdict

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset
from tqdm import tqdm

from wildmoco.augment import center_crop, make_views, to_image_tensor, train_crop
from wildmoco.log_helper import write_log
from wildmoco.tiling import LABEL_INDEX, crop_patch


class PatchDataset(Dataset):
    def __init__(self, records, images):
        '''
        records -> PatchRecords of the selected splits
        images  -> matching uint8 HxWx3 arrays, same order
        '''
        if len(records) != len(images):
            raise ValueError(f"{len(records)} records but {len(images)} images")
        self.records = list(records)
        self.images = list(images)
        self.labels = np.array([LABEL_INDEX.get(r.label, -1) for r in self.records], dtype=np.int64)

        data_inds = defaultdict(list)
        for ind, label in enumerate(self.labels):
            data_inds[int(label)].append(ind)
        if data_inds[0] or data_inds[1]:
            write_log('background count: %d | foreground count: %d' % (len(data_inds[0]), len(data_inds[1])))

    @classmethod
    def from_patch_dir(cls, manifest, patch_dir, splits=("pretrain",), cache_path=None, force_build=False):
        '''
        Read ``<patch_id>.png`` for every record in ``splits``; with ``cache_path``
        the decoded pixels are pickled and reused unless ``force_build``.
        '''
        records = [r for r in manifest.records if r.split in splits]
        ids = [r.patch_id for r in records]
        if cache_path and os.path.exists(cache_path) and not force_build:
            with open(cache_path, 'rb') as handle:
                cached_ids, images = pickle.load(handle)
            if cached_ids == ids:
                return cls(records, images)
            write_log(f"stale patch cache {cache_path}, rebuilding", level="WARNING")

        images = []
        for record in tqdm(records, desc="load patches", disable=len(records) < 500):
            path = os.path.join(patch_dir, f"{record.patch_id}.png")
            if not os.path.exists(path):
                raise FileNotFoundError(f"patch image missing: {path}")
            with Image.open(path) as img:
                images.append(np.asarray(img.convert("RGB"), dtype=np.uint8).copy())
        if cache_path:
            with open(cache_path, 'wb') as handle:
                pickle.dump((ids, images), handle)
        return cls(records, images)

    @classmethod
    def from_frames(cls, manifest, frames, splits=("pretrain",)):
        by_id = {f.frame_id: f for f in frames}
        records = [r for r in manifest.records if r.split in splits]
        return cls(records, [np.ascontiguousarray(crop_patch(by_id[r.frame_id], r)) for r in records])

    def __len__(self):
        return len(self.records)

    def __getitem__(self, idx):
        return self.images[idx], int(self.labels[idx])


class PretrainViews(Dataset):
    """Multi-view pretraining samples; augmentation randomness is keyed on (seed, epoch, index)."""

    def __init__(self, patches, view_policy, aug_policy, seed=0):
        self.patches = patches
        self.view_policy = view_policy
        self.aug_policy = aug_policy
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch):
        self.epoch = epoch

    def bundle(self, idx):
        rng = np.random.default_rng([self.seed, self.epoch, idx])
        return make_views(self.patches.images[idx], self.view_policy, rng, self.aug_policy,
                          patch_id=self.patches.records[idx].patch_id)

    def __len__(self):
        return len(self.patches)

    def __getitem__(self, idx):
        return self.bundle(idx).views


class LabeledCrops(Dataset):
    """Labeled patches as fixed-size tensors: center crop for evaluation, random crop+flip for training."""

    def __init__(self, patches, crop_size, train=False, seed=0):
        if (patches.labels < 0).any():
            raise ValueError("labeled crops need foreground/background records only")
        self.patches = patches
        self.crop_size = crop_size
        self.train = train
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return len(self.patches)

    def __getitem__(self, idx):
        image = to_image_tensor(self.patches.images[idx])
        if self.train:
            image = train_crop(image, np.random.default_rng([self.seed, self.epoch, idx]), self.crop_size)
        else:
            image = center_crop(image, self.crop_size)
        return image, torch.tensor(self.patches.labels[idx])
