"""One-clip top-1 evaluation of the two streams and their fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .model import ClipBatchData, EPAMNet, predict
from .tensor import Tensor


@dataclass
class EvalReport:
    top1_fused: float
    top1_rgb: float
    top1_skeleton: float
    confusion: np.ndarray  # [true, predicted], fused predictions
    total: int

    def as_dict(self) -> dict:
        return {"top1_fused": self.top1_fused, "top1_rgb": self.top1_rgb,
                "top1_skeleton": self.top1_skeleton, "total": self.total,
                "confusion": self.confusion.tolist()}


def confusion_matrix(labels, preds, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def report_from_predictions(labels, fused, rgb, skeleton, num_classes: int) -> EvalReport:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    n = len(labels)
    return EvalReport(
        top1_fused=int((np.asarray(fused) == labels).sum()) / n,
        top1_rgb=int((np.asarray(rgb) == labels).sum()) / n,
        top1_skeleton=int((np.asarray(skeleton) == labels).sum()) / n,
        confusion=confusion_matrix(labels, fused, num_classes), total=n)


def evaluate(model: EPAMNet, data: ClipBatchData, batch_size: int = 32) -> EvalReport:
    """One forward per clip, batch-norm in inference mode; arg-max ties go to the lowest class."""
    if len(data) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    was_training = model.training
    model.eval()
    fused, rgb, skel = [], [], []
    try:
        for start in range(0, len(data), batch_size):
            batch = data.subset(slice(start, start + batch_size))
            out = model(Tensor(batch.poses), Tensor(batch.rgbs))
            fused.append(predict(out.fused_probs))
            rgb.append(predict(out.logits_rgb.data))
            skel.append(predict(out.logits_skeleton.data))
    finally:
        model.train(was_training)
    return report_from_predictions(data.labels, np.concatenate(fused), np.concatenate(rgb),
                                   np.concatenate(skel), model.config.num_classes)
