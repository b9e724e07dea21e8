"""
Scene Dataset Module
Torch dataset and collate function over annotated scene records
"""

from typing import List, Sequence, Tuple

import torch
from torch.utils.data import Dataset

from .annotation_io import SceneRecord


class SceneDataset(Dataset):
    """Yields (image C x H x W, boxes N x 4, labels N, scene_id)"""

    def __init__(self, records: Sequence[SceneRecord]):
        self.records = list(records)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int):
        record = self.records[index]
        image = torch.from_numpy(record.load_image()).permute(2, 0, 1).contiguous()
        if record.gt:
            boxes = torch.tensor([lb.box.as_xyxy() for lb in record.gt], dtype=torch.float32)
            labels = torch.tensor([lb.class_id for lb in record.gt], dtype=torch.long)
        else:
            boxes = torch.zeros((0, 4), dtype=torch.float32)
            labels = torch.zeros((0,), dtype=torch.long)
        return image, boxes, labels, record.scene_id


def collate_scenes(batch) -> Tuple[torch.Tensor, List[torch.Tensor], List[torch.Tensor], List[str]]:
    images, boxes, labels, scene_ids = zip(*batch)
    return torch.stack(images), list(boxes), list(labels), list(scene_ids)
