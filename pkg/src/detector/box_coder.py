"""
Box Coder Module
Center/size log-delta encoding between reference boxes and targets
"""

import math
from typing import Tuple

import torch


BBOX_XFORM_CLIP = math.log(1000.0 / 16)


class BoxCoder:
    """Encodes targets relative to reference boxes as (dx, dy, dw, dh)"""

    def __init__(self, weights: Tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)):
        self.weights = weights

    @staticmethod
    def _centers(boxes: torch.Tensor):
        widths = boxes[:, 2] - boxes[:, 0]
        heights = boxes[:, 3] - boxes[:, 1]
        ctr_x = boxes[:, 0] + 0.5 * widths
        ctr_y = boxes[:, 1] + 0.5 * heights
        return ctr_x, ctr_y, widths, heights

    def encode(self, reference: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        wx, wy, ww, wh = self.weights
        ex, ey, ew, eh = self._centers(reference)
        gx, gy, gw, gh = self._centers(targets)

        dx = wx * (gx - ex) / ew
        dy = wy * (gy - ey) / eh
        dw = ww * torch.log(gw / ew)
        dh = wh * torch.log(gh / eh)
        return torch.stack((dx, dy, dw, dh), dim=1)

    def decode(self, deltas: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
        wx, wy, ww, wh = self.weights
        reference = reference.to(deltas.dtype)
        ctr_x, ctr_y, widths, heights = self._centers(reference)

        dx = deltas[:, 0] / wx
        dy = deltas[:, 1] / wy
        dw = (deltas[:, 2] / ww).clamp(max=BBOX_XFORM_CLIP)
        dh = (deltas[:, 3] / wh).clamp(max=BBOX_XFORM_CLIP)

        pred_ctr_x = dx * widths + ctr_x
        pred_ctr_y = dy * heights + ctr_y
        pred_w = torch.exp(dw) * widths
        pred_h = torch.exp(dh) * heights

        return torch.stack(
            (
                pred_ctr_x - 0.5 * pred_w,
                pred_ctr_y - 0.5 * pred_h,
                pred_ctr_x + 0.5 * pred_w,
                pred_ctr_y + 0.5 * pred_h,
            ),
            dim=1,
        )
