"""Two-stage face detector at desk scale.

Stage one slides a small conv backbone over the image and scores/regresses a
grid of anchors (3 scales x 3 aspect ratios per feature cell, stride 8) into
object proposals. Stage two crops a fixed-size bilinear window of the backbone
features for each proposal and classifies it face vs background, exposing
unnormalized logits so attack losses can differentiate through the crops back
to the input pixels. Detection = propose -> score -> softmax -> threshold ->
greedy NMS.

Proposal boxes are always detached: input gradients flow through the feature
crops, not through box coordinates.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import roi_align

from . import checkpoints
from .data import ImageSet, boxes_to_tensor, preprocess, scale_boxes, validate_image_tensor
from .losses import FACE_COL
from .seeding import derive_seed

log = logging.getLogger(__name__)

STRIDE = 8
DEFAULT_SCALES = (20.0, 30.0, 45.0)
DEFAULT_RATIOS = (0.8, 1.0, 1.25)
_DELTA_CLAMP = 4.0


class DetectorTrainingError(RuntimeError):
    """Raised when detector training diverges."""


@dataclass(frozen=True)
class Anchor:
    """Reference box: center in pixels, scale = sqrt(area), aspect_ratio = height / width."""

    center_x: float
    center_y: float
    scale: float
    aspect_ratio: float

    def __post_init__(self):
        if self.scale <= 0 or self.aspect_ratio <= 0:
            raise ValueError(f"scale and aspect_ratio must be > 0, got {self}")

    def box(self) -> tuple[float, float, float, float]:
        w = self.scale / math.sqrt(self.aspect_ratio)
        h = self.scale * math.sqrt(self.aspect_ratio)
        return (
            self.center_x - w / 2.0,
            self.center_y - h / 2.0,
            self.center_x + w / 2.0,
            self.center_y + h / 2.0,
        )


def anchor_grid(
    feat_h: int,
    feat_w: int,
    stride: int = STRIDE,
    scales: tuple[float, ...] = DEFAULT_SCALES,
    ratios: tuple[float, ...] = DEFAULT_RATIOS,
) -> torch.Tensor:
    """All anchor boxes for a feature map, ordered cell-major then scale-major.

    Index layout matches the RPN heads: ((y * feat_w + x) * len(scales) +
    s) * len(ratios) + r.
    """
    ws = torch.tensor([s / math.sqrt(r) for s in scales for r in ratios])
    hs = torch.tensor([s * math.sqrt(r) for s in scales for r in ratios])
    ys = (torch.arange(feat_h, dtype=torch.float32) + 0.5) * stride
    xs = (torch.arange(feat_w, dtype=torch.float32) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    cx = cx.reshape(-1, 1)
    cy = cy.reshape(-1, 1)
    boxes = torch.stack(
        [cx - ws / 2.0, cy - hs / 2.0, cx + ws / 2.0, cy + hs / 2.0], dim=2
    )
    return boxes.reshape(-1, 4)


@dataclass
class ProposalSet:
    """Candidate boxes with objectness probabilities, at most ``capped_n`` of them."""

    boxes: torch.Tensor
    objectness: torch.Tensor
    capped_n: int

    def __post_init__(self):
        if len(self.boxes) != len(self.objectness):
            raise ValueError("boxes and objectness must align")
        if len(self.boxes) > self.capped_n:
            raise ValueError(f"{len(self.boxes)} proposals exceed cap {self.capped_n}")

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass
class DetectionList:
    """Final detections: boxes with face confidence, all >= the threshold used."""

    boxes: torch.Tensor
    confidences: torch.Tensor
    threshold_used: float

    def __len__(self) -> int:
        return len(self.boxes)


def iou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise intersection-over-union for (A, 4) x (B, 4) corner-format boxes."""
    if a.numel() == 0 or b.numel() == 0:
        return torch.zeros((len(a), len(b)))
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = ((a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1]))[:, None]
    area_b = ((b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]))[None, :]
    return inter / (area_a + area_b - inter + 1e-8)


def nms(boxes: np.ndarray | torch.Tensor, scores: np.ndarray | torch.Tensor,
        iou_threshold: float) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices.

    Repeatedly keeps the highest-scoring box and drops boxes whose IoU with it
    exceeds the threshold. Ties break toward the lower index, so results are
    reproducible.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if boxes.size == 0:
        return np.zeros((0,), dtype=np.int64)
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    while order.size > 0:
        i = order[0]
        keep.append(int(i))
        xx1 = np.maximum(x1[i], x1[order[1:]])
        yy1 = np.maximum(y1[i], y1[order[1:]])
        xx2 = np.minimum(x2[i], x2[order[1:]])
        yy2 = np.minimum(y2[i], y2[order[1:]])
        inter = np.maximum(0.0, xx2 - xx1) * np.maximum(0.0, yy2 - yy1)
        iou = inter / (areas[i] + areas[order[1:]] - inter + 1e-12)
        order = order[1:][iou <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def filter_and_suppress(boxes: torch.Tensor, face_probs: torch.Tensor,
                        alpha: float, nms_iou: float) -> DetectionList:
    """Threshold-then-NMS shared by detect() and the evaluation sweeps."""
    keep = face_probs >= alpha
    boxes_f = boxes[keep]
    conf = face_probs[keep]
    order = torch.argsort(-conf, stable=True)
    boxes_f, conf = boxes_f[order], conf[order]
    kept = nms(boxes_f.numpy(), conf.numpy(), nms_iou)
    idx = torch.from_numpy(kept)
    return DetectionList(boxes_f[idx], conf[idx], threshold_used=alpha)


def _encode_deltas(anchors: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tcx = targets[:, 0] + tw / 2
    tcy = targets[:, 1] + th / 2
    return torch.stack(
        [(tcx - acx) / aw, (tcy - acy) / ah, torch.log(tw / aw), torch.log(th / ah)], dim=1
    )


def _decode_deltas(anchors: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * torch.exp(deltas[:, 2].clamp(-_DELTA_CLAMP, _DELTA_CLAMP))
    h = ah * torch.exp(deltas[:, 3].clamp(-_DELTA_CLAMP, _DELTA_CLAMP))
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)


class FaceDetector(nn.Module):
    """Small conv backbone + RPN heads + per-proposal face/background classifier.

    ``forward_calls`` counts backbone evaluations; attack-side tests use it to
    verify that deploying a trained perturbation generator never touches the
    detector.
    """

    def __init__(self, *, base_channels: int = 32, feat_channels: int = 64,
                 roi_size: int = 4, head_hidden: int = 128,
                 scales: tuple[float, ...] = DEFAULT_SCALES,
                 ratios: tuple[float, ...] = DEFAULT_RATIOS):
        super().__init__()
        self.arch = {
            "base_channels": base_channels,
            "feat_channels": feat_channels,
            "roi_size": roi_size,
            "head_hidden": head_hidden,
            "scales": list(scales),
            "ratios": list(ratios),
        }
        self.scales = tuple(scales)
        self.ratios = tuple(ratios)
        self.num_anchors = len(scales) * len(ratios)
        self.roi_size = roi_size
        self.meta: dict = {"version": "1"}
        self.forward_calls = 0
        self._anchor_cache: dict[tuple[int, int], torch.Tensor] = {}

        c, f = base_channels, feat_channels
        self.backbone = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(c, f, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(f, f, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(f, f, 3, stride=1, padding=1), nn.ReLU(inplace=True),
        )
        self.rpn_conv = nn.Conv2d(f, f, 3, padding=1)
        self.rpn_obj = nn.Conv2d(f, self.num_anchors, 1)
        self.rpn_delta = nn.Conv2d(f, 4 * self.num_anchors, 1)
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(f * roi_size * roi_size, head_hidden),
            nn.ReLU(inplace=True),
            nn.Linear(head_hidden, 2),
        )

    # ------------------------------------------------------------------
    # forward pieces

    def _features(self, x: torch.Tensor) -> torch.Tensor:
        validate_image_tensor(x)
        self.forward_calls += 1
        return self.backbone(x.unsqueeze(0))

    def _anchors(self, feat_h: int, feat_w: int, *, dtype=torch.float32) -> torch.Tensor:
        key = (feat_h, feat_w)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = anchor_grid(
                feat_h, feat_w, STRIDE, self.scales, self.ratios
            )
        return self._anchor_cache[key].to(dtype)

    def _rpn(self, feats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Flat per-anchor objectness logits (N,) and box deltas (N, 4)."""
        h = F.relu(self.rpn_conv(feats))
        obj = self.rpn_obj(h)[0].permute(1, 2, 0).reshape(-1)
        deltas = self.rpn_delta(h)[0].permute(1, 2, 0).reshape(-1, 4)
        return obj, deltas

    def _build_proposals(self, feats: torch.Tensor, image_hw: tuple[int, int],
                         cap: int, min_objectness: float) -> ProposalSet:
        if cap < 1:
            raise ValueError(f"cap must be >= 1, got {cap}")
        with torch.no_grad():
            obj_logits, deltas = self._rpn(feats)
            anchors = self._anchors(feats.shape[2], feats.shape[3], dtype=feats.dtype)
            boxes = _decode_deltas(anchors, deltas)
            h, w = image_hw
            boxes[:, 0::2] = boxes[:, 0::2].clamp(0.0, float(w))
            boxes[:, 1::2] = boxes[:, 1::2].clamp(0.0, float(h))
            objectness = torch.sigmoid(obj_logits)
            eligible = torch.nonzero(objectness >= min_objectness, as_tuple=True)[0]
            order = torch.argsort(-objectness[eligible], stable=True)
            top = eligible[order[:cap]]
            return ProposalSet(
                boxes[top].detach().float(), objectness[top].detach().float(), capped_n=cap
            )

    def _score_rois(self, feats: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        if boxes.numel() == 0:
            # empty but still attached to the graph so callers can differentiate
            return feats.sum() * feats.new_zeros((0, 2))
        rois = torch.cat(
            [torch.zeros((len(boxes), 1), dtype=feats.dtype), boxes.to(feats.dtype)], dim=1
        )
        crops = roi_align(feats, rois, output_size=self.roi_size,
                          spatial_scale=1.0 / STRIDE, aligned=True)
        return self.head(crops)

    # ------------------------------------------------------------------
    # public contract

    def propose(self, x: torch.Tensor, cap: int, min_objectness: float = 0.0) -> ProposalSet:
        """Top-``cap`` anchor-decoded boxes by objectness, clipped to the image."""
        feats = self._features(x)
        return self._build_proposals(feats, x.shape[-2:], cap, min_objectness)

    def score(self, x: torch.Tensor, proposals: ProposalSet) -> torch.Tensor:
        """(N, 2) unnormalized (background, face) logits, one row per proposal.

        Differentiable with respect to ``x`` through the feature crops.
        """
        feats = self._features(x)
        return self._score_rois(feats, proposals.boxes)

    def propose_and_score(self, x: torch.Tensor, cap: int,
                          min_objectness: float = 0.0) -> tuple[ProposalSet, torch.Tensor]:
        """propose() and score() sharing a single backbone pass."""
        feats = self._features(x)
        proposals = self._build_proposals(feats, x.shape[-2:], cap, min_objectness)
        return proposals, self._score_rois(feats, proposals.boxes)

    def detect(self, x: torch.Tensor, alpha: float, cap: int = 300,
               nms_iou: float = 0.5) -> DetectionList:
        """Proposals whose face probability reaches ``alpha``, after greedy NMS."""
        if not 0.0 < alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {alpha}")
        with torch.no_grad():
            proposals, logits = self.propose_and_score(x, cap)
            face_probs = torch.softmax(logits, dim=1)[:, FACE_COL]
            return filter_and_suppress(proposals.boxes, face_probs, alpha, nms_iou)

    # ------------------------------------------------------------------
    # training

    def _training_loss(self, x: torch.Tensor, gt: torch.Tensor,
                       rng: np.random.Generator) -> torch.Tensor:
        feats = self._features(x)
        obj_logits, deltas = self._rpn(feats)
        anchors = self._anchors(feats.shape[2], feats.shape[3])

        if len(gt) > 0:
            ious = iou_matrix(anchors, gt)
            max_iou, matched = ious.max(dim=1)
            labels = torch.full((len(anchors),), -1.0)
            labels[max_iou < 0.3] = 0.0
            labels[max_iou >= 0.5] = 1.0
            best_per_gt = ious.argmax(dim=0)
            labels[best_per_gt] = 1.0
            matched[best_per_gt] = torch.arange(len(gt))
        else:
            labels = torch.zeros(len(anchors))
            matched = torch.zeros(len(anchors), dtype=torch.long)

        pos = np.flatnonzero(labels.numpy() == 1.0)
        neg = np.flatnonzero(labels.numpy() == 0.0)
        n_pos = min(len(pos), 32)
        pos_s = rng.choice(pos, size=n_pos, replace=False) if n_pos else pos
        neg_s = rng.choice(neg, size=min(len(neg), 64 - n_pos), replace=False)
        sampled = torch.from_numpy(np.concatenate([pos_s, neg_s]).astype(np.int64))
        obj_loss = F.binary_cross_entropy_with_logits(
            obj_logits[sampled], labels[sampled]
        )
        if n_pos:
            pos_t = torch.from_numpy(pos_s.astype(np.int64))
            targets = _encode_deltas(anchors[pos_t], gt[matched[pos_t]])
            box_loss = F.smooth_l1_loss(deltas[pos_t], targets)
        else:
            box_loss = obj_logits.sum() * 0.0

        proposals = self._build_proposals(feats, x.shape[-2:], cap=96, min_objectness=0.0)
        roi_boxes = torch.cat([proposals.boxes, gt], dim=0)
        if len(gt) > 0:
            roi_iou = iou_matrix(roi_boxes, gt).max(dim=1).values
        else:
            roi_iou = torch.zeros(len(roi_boxes))
        roi_labels = (roi_iou >= 0.5).long()
        face_idx = np.flatnonzero(roi_labels.numpy() == 1)
        bg_idx = np.flatnonzero(roi_labels.numpy() == 0)
        face_s = rng.choice(face_idx, size=min(len(face_idx), 16), replace=False)
        bg_s = rng.choice(bg_idx, size=min(len(bg_idx), 48), replace=False)
        roi_sampled = torch.from_numpy(np.concatenate([face_s, bg_s]).astype(np.int64))
        logits = self._score_rois(feats, roi_boxes[roi_sampled])
        cls_loss = F.cross_entropy(logits, roi_labels[roi_sampled])

        return obj_loss + box_loss + cls_loss


def train_detector(data: ImageSet, epochs: int, seed: int,
                   *, input_size: tuple[int, int] | None = None,
                   **arch_kwargs) -> FaceDetector:
    """Train a FaceDetector on clean images; returns it frozen and in eval mode.

    Optimization uses Adam with default settings, one image per step, shuffled
    each epoch by a seeded RNG. Mean loss is logged per epoch and kept in
    ``meta["epoch_losses"]``. Raises DetectorTrainingError if the loss goes
    non-finite.
    """
    if data.total_boxes() < 1:
        raise ValueError("training data contains no positive boxes")
    sizes = {(img.height, img.width) for img, _ in data.items}
    if input_size is None:
        if len(sizes) != 1:
            raise ValueError(f"mixed image sizes {sizes}; pass input_size explicitly")
        input_size = next(iter(sizes))

    prepared = []
    for img, boxes in data.items:
        x = preprocess(img, input_size)
        scaled = scale_boxes(boxes, (img.height, img.width), input_size)
        prepared.append((x, boxes_to_tensor(scaled)))

    torch.manual_seed(derive_seed(seed, "detector-init"))
    model = FaceDetector(**arch_kwargs)
    rng = np.random.default_rng(derive_seed(seed, "detector-train"))
    opt = torch.optim.Adam(model.parameters())

    model.train()
    epoch_losses: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(len(prepared))
        running = 0.0
        for i in order:
            x, gt = prepared[i]
            loss = model._training_loss(x, gt, rng)
            if not torch.isfinite(loss):
                raise DetectorTrainingError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += float(loss)
        mean = running / len(prepared)
        epoch_losses.append(mean)
        log.info("detector epoch %d/%d mean loss %.4f", epoch + 1, epochs, mean)

    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    model.meta = {
        "version": "1",
        "seed": seed,
        "epochs": epochs,
        "input_size": list(input_size),
        "epoch_losses": epoch_losses,
    }
    return model


# ---------------------------------------------------------------------------
# persistence


def save_detector(model: FaceDetector, path) -> None:
    checkpoints.save(path, "detector", model.state_dict(), model.arch, model.meta)


def load_detector(path) -> FaceDetector:
    _, arch, meta, state = checkpoints.load(path, expect_kind="detector")
    model = FaceDetector(
        base_channels=arch["base_channels"], feat_channels=arch["feat_channels"],
        roi_size=arch["roi_size"], head_hidden=arch["head_hidden"],
        scales=tuple(arch["scales"]), ratios=tuple(arch["ratios"]),
    )
    model.load_state_dict(state)
    model.meta = meta
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def detector_fingerprint(model: FaceDetector) -> str:
    """Hash of weights + metadata; unchanged means the detector was not touched."""
    return checkpoints.fingerprint("detector", model.state_dict(), model.arch, model.meta)
