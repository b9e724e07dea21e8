"""
Memory Bank Module
Per-class FIFO store of confident historical class embeddings
"""

import math
from collections import deque
from dataclasses import dataclass
from typing import Deque, Dict, List, Optional, Sequence, Union

import torch
from loguru import logger

from src.comparison.contrast_loss import LabeledEmbeddingBatch


class EmbeddingDimensionError(TypeError):
    """Embedding dimension differs from the bank's"""


@dataclass(frozen=True)
class BankEntry:
    """One stored embedding with its insertion metadata"""
    embedding: torch.Tensor
    class_id: int
    score: float
    insert_index: int


class ClassMemoryBank:
    """C queues of capacity Q holding detached class embeddings.

    Entries are admitted only when their score reaches the class threshold.
    A full queue drops its oldest entry on insert.
    """

    def __init__(self, num_classes: int, capacity: int, dim: int = 1024,
                 thresholds: Union[float, Sequence[float]] = 0.7):
        if num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {num_classes}")
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")

        self.num_classes = num_classes
        self.capacity = capacity
        self.dim = dim
        self.thresholds = self._expand_thresholds(thresholds, num_classes)
        self.queues: List[Deque[BankEntry]] = [deque(maxlen=capacity) for _ in range(num_classes)]
        self.total_inserted = 0
        self.total_rejected = 0

    @staticmethod
    def _expand_thresholds(thresholds: Union[float, Sequence[float]], num_classes: int) -> List[float]:
        if isinstance(thresholds, (int, float)):
            values = [float(thresholds)] * num_classes
        else:
            values = [float(t) for t in thresholds]
        if len(values) != num_classes:
            raise ValueError(f"Expected {num_classes} class thresholds, got {len(values)}")
        if any(not 0.0 < t < 1.0 for t in values):
            raise ValueError(f"Class thresholds must lie in (0, 1): {values}")
        return values

    def __len__(self) -> int:
        return sum(len(q) for q in self.queues)

    def queue_lengths(self) -> List[int]:
        return [len(q) for q in self.queues]

    def is_empty(self) -> bool:
        return len(self) == 0

    def insert_confident(self, embedding: torch.Tensor, class_id: int, score: float) -> bool:
        """Queue ``embedding`` under ``class_id`` if ``score`` reaches the class threshold"""
        if not 0 <= class_id < self.num_classes:
            raise IndexError(f"class_id {class_id} outside [0, {self.num_classes})")
        if embedding.dim() != 1 or embedding.shape[0] != self.dim:
            raise EmbeddingDimensionError(
                f"Expected a {self.dim}-dim embedding, got shape {tuple(embedding.shape)}"
            )

        score = float(score)
        if not (math.isfinite(score) and 0.0 <= score <= 1.0):
            raise ValueError(f"Insertion score must be a probability in [0, 1], got {score}")
        if score < self.thresholds[class_id]:
            self.total_rejected += 1
            return False

        entry = BankEntry(
            embedding=embedding.detach().to("cpu").clone(),
            class_id=class_id,
            score=score,
            insert_index=self.total_inserted,
        )
        self.queues[class_id].append(entry)
        self.total_inserted += 1
        return True

    def update_from_batch(self, batch: LabeledEmbeddingBatch, scores: Union[torch.Tensor, Sequence[float]]) -> int:
        """Apply ``insert_confident`` to every row in batch order"""
        scores = torch.as_tensor(scores, dtype=torch.float64).reshape(-1)
        if scores.shape[0] != len(batch):
            raise ValueError(f"Got {scores.shape[0]} scores for {len(batch)} embeddings")

        inserted = 0
        labels = batch.labels.tolist()
        for row, class_id, score in zip(batch.embeddings, labels, scores.tolist()):
            inserted += int(self.insert_confident(row, int(class_id), score))

        logger.debug(f"Memory bank update: {inserted}/{len(batch)} inserted, sizes={self.queue_lengths()}")
        return inserted

    def _to_batch(self, entries: List[BankEntry]) -> LabeledEmbeddingBatch:
        if not entries:
            return LabeledEmbeddingBatch.empty(self.dim)
        return LabeledEmbeddingBatch(
            torch.stack([e.embedding for e in entries]),
            torch.tensor([e.class_id for e in entries], dtype=torch.long),
        )

    def sample_balanced(self, per_class: int, generator: Optional[torch.Generator] = None) -> LabeledEmbeddingBatch:
        """Draw up to ``per_class`` entries per class, uniformly without replacement"""
        if per_class < 1:
            raise ValueError(f"per_class must be >= 1, got {per_class}")

        chosen: List[BankEntry] = []
        for queue in self.queues:
            if not queue:
                continue
            take = min(per_class, len(queue))
            order = torch.randperm(len(queue), generator=generator)[:take].tolist()
            chosen.extend(queue[i] for i in order)
        return self._to_batch(chosen)

    def snapshot(self) -> LabeledEmbeddingBatch:
        """Every entry, class by class, oldest first"""
        return self._to_batch([entry for queue in self.queues for entry in queue])

    def entries(self, class_id: int) -> List[BankEntry]:
        return list(self.queues[class_id])

    def state_dict(self) -> Dict:
        """Serializable bank state for checkpoints"""
        return {
            'num_classes': self.num_classes,
            'capacity': self.capacity,
            'dim': self.dim,
            'thresholds': list(self.thresholds),
            'total_inserted': self.total_inserted,
            'total_rejected': self.total_rejected,
            'queues': [
                {
                    'embeddings': torch.stack([e.embedding for e in q]) if q else torch.zeros((0, self.dim)),
                    'scores': [e.score for e in q],
                    'insert_index': [e.insert_index for e in q],
                }
                for q in self.queues
            ],
        }

    @classmethod
    def from_state_dict(cls, state: Dict) -> "ClassMemoryBank":
        bank = cls(state['num_classes'], state['capacity'], state['dim'], state['thresholds'])
        bank.total_inserted = state['total_inserted']
        bank.total_rejected = state['total_rejected']
        for class_id, saved in enumerate(state['queues']):
            for emb, score, index in zip(saved['embeddings'], saved['scores'], saved['insert_index']):
                bank.queues[class_id].append(BankEntry(emb.clone(), class_id, float(score), int(index)))
        return bank
