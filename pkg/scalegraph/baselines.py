"""
Pooling baselines trained with the same fit loop as the graph model.
"""

from typing import Union

import torch
import torch.nn.functional as F
from torch import nn

from .model import BagClassifier, BagOutput
from .types import BaselineKind, ConfigurationError, FeatureBag


class PoolingClassifier(BagClassifier):
    """
    Pool the valid high-scale features of a bag, then a linear classifier.

    MEAN_POOL / MAX_POOL are parameter-free poolings; ATTN_MIL scores every
    instance with Linear-Tanh-Linear and pools with the softmax weights.
    """

    def __init__(
        self,
        kind: Union[BaselineKind, str],
        dim: int,
        num_classes: int,
        hidden: int = 32,
    ):
        super().__init__()
        try:
            self.kind = BaselineKind(kind)
        except ValueError:
            raise ConfigurationError(f"unknown baseline: {kind!r}") from None
        if num_classes < 2:
            raise ConfigurationError("a classifier needs at least two classes")
        self.num_classes = num_classes
        self.attention = None
        if self.kind == BaselineKind.ATTN_MIL:
            self.attention = nn.Sequential(nn.Linear(dim, hidden), nn.Tanh(), nn.Linear(hidden, 1))
        self.classifier = nn.Linear(dim, num_classes)

    def instances(self, bag: FeatureBag) -> torch.Tensor:
        dtype = self.classifier.weight.dtype
        feats = torch.as_tensor(bag.high_feats[bag.validity], dtype=dtype)
        if feats.shape[0] == 0:
            raise ValueError(f"bag {bag.bag_id} has no valid high-scale patches")
        return feats

    def pool(self, feats: torch.Tensor) -> torch.Tensor:
        if self.kind == BaselineKind.MEAN_POOL:
            return feats.mean(dim=0)
        if self.kind == BaselineKind.MAX_POOL:
            return feats.max(dim=0).values
        weights = F.softmax(self.attention(feats).squeeze(-1), dim=0)
        return weights @ feats

    def score_bag(self, bag: FeatureBag) -> BagOutput:
        if not 0 <= bag.label < self.num_classes:
            raise ValueError(f"label {bag.label} out of range for {self.num_classes} classes")
        logits = self.classifier(self.pool(self.instances(bag)))
        target = torch.tensor([bag.label], dtype=torch.long)
        ce = F.cross_entropy(logits.unsqueeze(0), target)
        return BagOutput(fused=logits, ce=ce, loss=ce)
