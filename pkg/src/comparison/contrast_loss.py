"""
Contrastive Loss Module
Cosine similarity and label-supervised contrastive losses between instance embeddings
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import torch
import torch.nn.functional as F


class UndefinedSimilarityError(ValueError):
    """Cosine similarity requested for a zero-norm vector"""


class EmptyComparisonError(ValueError):
    """Contrastive loss called with no keys or no queries"""


@dataclass
class LabeledEmbeddingBatch:
    """N x D embeddings with one class label per row"""
    embeddings: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.embeddings.dim() != 2:
            raise ValueError(
                f"embeddings must be 2-D (N x D), got shape {tuple(self.embeddings.shape)}"
            )
        if self.labels.dim() != 1 or self.labels.shape[0] != self.embeddings.shape[0]:
            raise ValueError(
                f"labels must be 1-D with {self.embeddings.shape[0]} entries, "
                f"got shape {tuple(self.labels.shape)}"
            )
        if self.labels.numel() and int(self.labels.min()) < 0:
            raise ValueError("labels must be non-negative class ids")
        if not torch.isfinite(self.embeddings).all():
            raise ValueError("embeddings contain non-finite values")

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @classmethod
    def empty(cls, dim: int, dtype: torch.dtype = torch.float32,
              device: Optional[torch.device] = None) -> "LabeledEmbeddingBatch":
        return cls(
            torch.zeros((0, dim), dtype=dtype, device=device),
            torch.zeros((0,), dtype=torch.long, device=device),
        )

    @classmethod
    def from_sequences(cls, embeddings: Sequence[Sequence[float]],
                       labels: Sequence[int],
                       dtype: torch.dtype = torch.float64) -> "LabeledEmbeddingBatch":
        return cls(
            torch.as_tensor(embeddings, dtype=dtype),
            torch.as_tensor(labels, dtype=torch.long),
        )

    def select(self, mask: torch.Tensor) -> "LabeledEmbeddingBatch":
        return LabeledEmbeddingBatch(self.embeddings[mask], self.labels[mask])

    def check_labels(self, num_classes: int) -> None:
        if self.labels.numel() and int(self.labels.max()) >= num_classes:
            raise ValueError(f"labels must lie in [0, {num_classes})")


def _normalize(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise UndefinedSimilarityError("Cosine similarity is undefined for zero vectors")
    return x / norms


def cosine_sim(a: Union[torch.Tensor, Sequence[float]],
               b: Union[torch.Tensor, Sequence[float]]) -> torch.Tensor:
    """Cosine of the angle between two vectors"""
    a = torch.as_tensor(a, dtype=torch.float64) if not torch.is_tensor(a) else a
    b = torch.as_tensor(b, dtype=torch.float64) if not torch.is_tensor(b) else b
    if a.shape != b.shape:
        raise ValueError(f"Shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (_normalize(a) * _normalize(b)).sum(-1).clamp(-1.0, 1.0)


def supervised_contrast_loss(queries: LabeledEmbeddingBatch, keys: LabeledEmbeddingBatch,
                             tau: float, normalize_positives: bool = False) -> torch.Tensor:
    """Label-supervised contrastive loss of queries against keys.

    For each query j and each key i+ sharing its label, accumulates
    -log softmax_i(sim(z_j, z_i) / tau)[i+]; the total is divided by the
    number of queries. Positives are summed, not averaged, unless
    ``normalize_positives`` is set. Queries without any positive key add 0.
    """
    if tau <= 0:
        raise ValueError(f"Temperature must be positive, got {tau}")
    if len(keys) == 0:
        raise EmptyComparisonError("Contrastive loss needs at least one key")
    if len(queries) == 0:
        raise EmptyComparisonError("Contrastive loss needs at least one query")
    if queries.dim != keys.dim:
        raise ValueError(f"Query dim {queries.dim} does not match key dim {keys.dim}")

    q = _normalize(queries.embeddings)
    k = _normalize(keys.embeddings.to(q.dtype))
    logits = q @ k.t() / tau
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)

    positives = (queries.labels[:, None] == keys.labels.to(queries.labels.device)[None, :])
    positives = positives.to(log_prob.dtype)
    per_query = -(log_prob * positives).sum(dim=1)

    if normalize_positives:
        per_query = per_query / positives.sum(dim=1).clamp(min=1.0)

    return per_query.sum() / len(queries)


def roi_contrast_loss(gt_and_aug: LabeledEmbeddingBatch, rois: LabeledEmbeddingBatch,
                      tau_roi: float, normalize_positives: bool = False) -> torch.Tensor:
    """RoI-level comparison: GT and augmented-GT embeddings query the foreground RoIs"""
    return supervised_contrast_loss(gt_and_aug, rois, tau_roi, normalize_positives)


def cls_contrast_loss(current: LabeledEmbeddingBatch, memory_view: LabeledEmbeddingBatch,
                      tau_cls: float, normalize_positives: bool = False) -> torch.Tensor:
    """Class-level comparison: current class embeddings query historical bank entries"""
    return supervised_contrast_loss(current, memory_view, tau_cls, normalize_positives)


def comparable(queries: LabeledEmbeddingBatch, keys: LabeledEmbeddingBatch) -> bool:
    """Both sides non-empty, so a comparison loss is defined"""
    return len(queries) > 0 and len(keys) > 0
