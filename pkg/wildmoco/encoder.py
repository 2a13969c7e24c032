"""
Query/key encoders.

An ``EncoderState`` owns a trainable query backbone with its projection heads
and a frozen key copy that only moves through the momentum update. The
projection MLP has one shared hidden layer and two output layers: the
instance head feeds the instance loss and the queue, the group head feeds
local clustering.
"""

import copy

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from wildmoco.run_config import BACKBONES


class DeskCNN(nn.Module):
    """Small 4-block convolutional backbone for CPU runs."""

    def __init__(self, widths=(24, 48, 96, 192), groups=8):
        super().__init__()
        layers = []
        in_ch = 3
        for width in widths:
            layers += [nn.Conv2d(in_ch, width, kernel_size=3, stride=2, padding=1, bias=False),
                       nn.GroupNorm(groups, width),
                       nn.ReLU(inplace=True)]
            in_ch = width
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.out_dim = widths[-1]

    def forward(self, x):
        return torch.flatten(self.pool(self.features(x)), 1)


def resnet50_backbone():
    model = torchvision.models.resnet50(weights=None)
    out_dim = model.fc.in_features
    model.fc = nn.Identity()
    model.out_dim = out_dim
    return model


def build_backbone(backbone_id):
    if backbone_id == "desk_cnn":
        return DeskCNN()
    if backbone_id == "resnet50":
        return resnet50_backbone()
    raise ValueError(f"unknown backbone '{backbone_id}', expected one of {list(BACKBONES)}")


class ProjectionHeads(nn.Module):
    def __init__(self, in_dim, hidden_dim, out_dim):
        super().__init__()
        self.hidden = nn.Sequential(nn.Linear(in_dim, hidden_dim), nn.ReLU(inplace=True))
        self.instance = nn.Linear(hidden_dim, out_dim)
        self.group = nn.Linear(hidden_dim, out_dim)

    def forward(self, z):
        h = self.hidden(z)
        return F.normalize(self.instance(h), dim=1), F.normalize(self.group(h), dim=1)


class EncoderState(nn.Module):
    def __init__(self, backbone, feature_dim=128, head_hidden=2048):
        super().__init__()
        self.backbone_q = backbone
        self.heads_q = ProjectionHeads(backbone.out_dim, head_hidden, feature_dim)
        self.backbone_k = copy.deepcopy(self.backbone_q)
        self.heads_k = copy.deepcopy(self.heads_q)
        for param in self.key_parameters():
            param.requires_grad = False
        self.feature_dim = feature_dim
        self.register_buffer("input_mean", torch.zeros(3))
        self.register_buffer("input_std", torch.ones(3))

    def set_normalization(self, mean, std):
        self.input_mean.copy_(torch.as_tensor(mean, dtype=self.input_mean.dtype))
        self.input_std.copy_(torch.as_tensor(std, dtype=self.input_std.dtype))

    def _prep(self, x):
        x = x.to(self.input_mean.dtype)
        return (x - self.input_mean.view(1, -1, 1, 1)) / self.input_std.view(1, -1, 1, 1)

    def query_parameters(self):
        return list(self.backbone_q.parameters()) + list(self.heads_q.parameters())

    def key_parameters(self):
        return list(self.backbone_k.parameters()) + list(self.heads_k.parameters())

    def pooled(self, x):
        """Backbone features before the projection heads; what the probes see."""
        return self.backbone_q(self._prep(x))

    def encode_query(self, x):
        return self.heads_q(self.pooled(x))

    @torch.no_grad()
    def encode_key(self, x):
        k, _ = self.heads_k(self.backbone_k(self._prep(x)))
        return k


def build_encoder(backbone_id="desk_cnn", feature_dim=128, head_hidden=2048, seed=0):
    torch.manual_seed(seed)
    return EncoderState(build_backbone(backbone_id), feature_dim=feature_dim, head_hidden=head_hidden)


def encoder_from_config(config):
    return build_encoder(config.backbone, config.feature_dim, config.head_hidden, seed=config.init_seed)
