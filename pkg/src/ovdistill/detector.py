"""Toy open-vocabulary detector: conv backbone, anchor-grid proposals, dot-product head.

Proposals come from a fixed anchor grid scored by a learnable objectness head
(no NMS at train time). Region features are pooled backbone activations
projected to the shared embedding dimension and unit-normalized, so
classification is a temperature-scaled dot product against frozen word
embeddings plus one learnable background vector.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, UnknownConcept


@dataclass
class DetectorConfig:
    embed_dim: int = 32
    n_proposals: int = 16
    image_size: tuple = (64, 64)
    backbone_channels: tuple = (16, 32, 32)
    trunk_dim: int = 64
    # stride-4 grid; sizes chosen so every 10-20px object has an IoU>=0.5 anchor
    anchor_sizes: tuple = (12.0, 16.0, 21.0)
    temperature: float = 1.0 / 0.07
    iou_positive: float = 0.5
    iou_negative: float = 0.3

    def __post_init__(self):
        if self.embed_dim <= 0 or self.n_proposals <= 0:
            raise ConfigError("embed_dim and n_proposals must be positive")


@dataclass
class RegionProposal:
    box: np.ndarray       # (4,) x1,y1,x2,y2 pixels
    feature: np.ndarray   # (d,) unit-normalized
    objectness: float     # in [0, 1]


def box_iou(boxes_a, boxes_b):
    """Pairwise IoU, (n, m). Accepts torch tensors."""
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    lt = torch.maximum(boxes_a[:, None, :2], boxes_b[None, :, :2])
    rb = torch.minimum(boxes_a[:, None, 2:], boxes_b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def encode_deltas(anchors, targets):
    """Box deltas (dx, dy, dw, dh) mapping anchors onto targets."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tcx = targets[:, 0] + 0.5 * tw
    tcy = targets[:, 1] + 0.5 * th
    return torch.stack(
        [(tcx - acx) / aw, (tcy - acy) / ah, torch.log(tw / aw), torch.log(th / ah)], dim=1
    )


def decode_deltas(anchors, deltas, image_size=None):
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    cx = deltas[:, 0] * aw + acx
    cy = deltas[:, 1] * ah + acy
    w = torch.exp(deltas[:, 2].clamp(max=4.0)) * aw
    h = torch.exp(deltas[:, 3].clamp(max=4.0)) * ah
    boxes = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)
    if image_size is not None:
        ih, iw = image_size
        boxes = torch.stack(
            [
                boxes[:, 0].clamp(0, iw),
                boxes[:, 1].clamp(0, ih),
                boxes[:, 2].clamp(0, iw),
                boxes[:, 3].clamp(0, ih),
            ],
            dim=1,
        )
    return boxes


class ClassifierHead(nn.Module):
    """Frozen class-name embeddings plus one learnable background vector.

    Background is excluded whenever captions are scored; ties in classify()
    break lexicographically by class name.
    """

    BACKGROUND = "background"

    def __init__(self, class_embeddings, temperature):
        super().__init__()
        if not class_embeddings:
            raise ConfigError("classifier needs at least one class embedding")
        self.class_names = tuple(class_embeddings.keys())
        self._index = {n: i for i, n in enumerate(self.class_names)}
        table = np.stack([class_embeddings[n] for n in self.class_names])
        self.register_buffer("class_table", torch.as_tensor(table, dtype=torch.float32))
        dim = table.shape[1]
        bg = torch.randn(dim)
        self.background = nn.Parameter(bg / bg.norm())
        self.temperature = float(temperature)

    def logits(self, features, class_names=None, include_background=True):
        """Temperature-scaled dot products, columns ordered as ``class_names``
        (+ background last when included)."""
        if class_names is None:
            class_names = self.class_names
        if len(class_names) == 0:
            raise ConfigError("empty class vocabulary")
        try:
            rows = [self._index[n] for n in class_names]
        except KeyError as exc:
            raise UnknownConcept(f"class not in scoring vocabulary: {exc.args[0]!r}") from None
        table = self.class_table[rows]
        logits = features @ table.T
        if include_background:
            bg = features @ self.background
            logits = torch.cat([logits, bg[..., None]], dim=-1)
        return self.temperature * logits

    def classify(self, feature, class_names=None):
        """(label, score) with argmax over classes + background."""
        if class_names is None:
            class_names = self.class_names
        with torch.no_grad():
            logits = self.logits(feature[None, :], class_names, include_background=True)[0]
        names = list(class_names) + [self.BACKGROUND]
        best = logits.max()
        tied = [names[i] for i in range(len(names)) if logits[i] == best]
        label = min(tied)
        return label, float(best)


class StudentDetector(nn.Module):
    """Backbone + anchor proposals + shared feature head for regions and the full image."""

    def __init__(self, config, class_embeddings):
        super().__init__()
        self.config = config
        c1, c2, c3 = config.backbone_channels
        self.backbone = nn.Sequential(
            nn.Conv2d(3, c1, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c2, c3, 3, stride=1, padding=1), nn.ReLU(),
        )
        h, w = config.image_size
        self.feat_h, self.feat_w = h // 4, w // 4
        self.stride = 4
        self.objectness = nn.Conv2d(c3, len(config.anchor_sizes), 1)
        self.trunk = nn.Sequential(nn.Linear(c3, config.trunk_dim), nn.ReLU())
        self.feature_proj = nn.Linear(config.trunk_dim, config.embed_dim)
        self.box_head = nn.Linear(config.trunk_dim, 4)
        self.head = ClassifierHead(class_embeddings, config.temperature)

        anchors, pool = self._build_anchors()
        self.register_buffer("anchors", anchors)
        self.register_buffer("pool_weights", pool)
        if config.n_proposals > anchors.shape[0]:
            raise ConfigError(
                f"n_proposals={config.n_proposals} exceeds anchor count {anchors.shape[0]}"
            )

    def _build_anchors(self):
        h, w = self.config.image_size
        fh, fw = self.feat_h, self.feat_w
        boxes = []
        weights = []
        for size in self.config.anchor_sizes:
            for i in range(fh):
                for j in range(fw):
                    cx = (j + 0.5) * self.stride
                    cy = (i + 0.5) * self.stride
                    x1 = max(cx - size / 2, 0.0)
                    y1 = max(cy - size / 2, 0.0)
                    x2 = min(cx + size / 2, float(w))
                    y2 = min(cy + size / 2, float(h))
                    boxes.append([x1, y1, x2, y2])
                    weights.append(self._pool_row(x1, y1, x2, y2))
        return (
            torch.tensor(boxes, dtype=torch.float32),
            torch.stack(weights),
        )

    def _pool_row(self, x1, y1, x2, y2):
        # mean over the feature cells overlapped by the box
        j0 = int(np.clip(np.floor(x1 / self.stride), 0, self.feat_w - 1))
        j1 = int(np.clip(np.ceil(x2 / self.stride) - 1, j0, self.feat_w - 1))
        i0 = int(np.clip(np.floor(y1 / self.stride), 0, self.feat_h - 1))
        i1 = int(np.clip(np.ceil(y2 / self.stride) - 1, i0, self.feat_h - 1))
        mask = torch.zeros(self.feat_h, self.feat_w)
        mask[i0 : i1 + 1, j0 : j1 + 1] = 1.0
        return (mask / mask.sum()).reshape(-1)

    # ------------------------------------------------------------------
    # forward paths
    # ------------------------------------------------------------------

    def backbone_features(self, images):
        """images: (B, H, W, 3) float in [0,1] -> (B, C, fh, fw)."""
        x = images.permute(0, 3, 1, 2)
        return self.backbone(x)

    def _pooled_to_outputs(self, pooled):
        hidden = self.trunk(pooled)
        feats = self.feature_proj(hidden)
        feats = feats / feats.norm(dim=-1, keepdim=True).clamp_min(1e-8)
        deltas = self.box_head(hidden)
        return feats, deltas

    def propose(self, images):
        """Top-``n_proposals`` anchors by objectness per image.

        Returns dict of tensors: boxes (B,n,4), obj_logits (B,n),
        features (B,n,d), deltas (B,n,4), anchor_idx (B,n). Objectness is
        non-increasing within each image; ranking ties go to the lower
        anchor index.
        """
        n = self.config.n_proposals
        fmap = self.backbone_features(images)
        B, C = fmap.shape[0], fmap.shape[1]
        obj_all = self.objectness(fmap).reshape(B, -1)  # anchor order: size-major
        order = torch.argsort(-obj_all.detach(), dim=1, stable=True)[:, :n]
        obj_logits = torch.gather(obj_all, 1, order)

        flat = fmap.reshape(B, C, -1)  # (B, C, fh*fw)
        pooled_all = torch.einsum("bcf,af->bac", flat, self.pool_weights)  # (B, A, C)
        pooled = torch.gather(
            pooled_all, 1, order[..., None].expand(-1, -1, C)
        )  # (B, n, C)
        feats, deltas = self._pooled_to_outputs(pooled)
        boxes = self.anchors[order]
        return {
            "boxes": boxes,
            "obj_logits": obj_logits,
            "features": feats,
            "deltas": deltas,
            "anchor_idx": order,
            "obj_all": obj_all,
        }

    def global_region(self, images):
        """Whole-image feature through the same pooling/trunk/projection path."""
        fmap = self.backbone_features(images)
        pooled = fmap.mean(dim=(2, 3))
        feats, _ = self._pooled_to_outputs(pooled)
        return feats

    def propose_regions(self, image, n_proposals=None):
        """Single-image convenience API returning RegionProposal objects."""
        if n_proposals is not None and n_proposals != self.config.n_proposals:
            raise ConfigError(
                "n_proposals is fixed at model construction; rebuild with a new config"
            )
        with torch.no_grad():
            out = self.propose(torch.as_tensor(image, dtype=self.anchors.dtype)[None])
        boxes = out["boxes"][0].cpu().numpy()
        feats = out["features"][0].cpu().numpy()
        scores = torch.sigmoid(out["obj_logits"][0]).cpu().numpy()
        return [
            RegionProposal(box=boxes[i], feature=feats[i], objectness=float(scores[i]))
            for i in range(boxes.shape[0])
        ]

    def classify_region(self, feature, class_names=None):
        return self.head.classify(torch.as_tensor(feature, dtype=self.anchors.dtype), class_names)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def match_proposals(boxes, gt_boxes, iou_positive=0.5, iou_negative=0.3):
    """Per-proposal match: (matched gt index or -1, label in {1 pos, 0 neg, -1 ignore})."""
    n = boxes.shape[0]
    if gt_boxes.numel() == 0:
        return torch.full((n,), -1, dtype=torch.long), torch.zeros(n, dtype=torch.long)
    ious = box_iou(boxes, gt_boxes)
    best_iou, best_gt = ious.max(dim=1)
    labels = torch.full((n,), -1, dtype=torch.long)
    labels[best_iou < iou_negative] = 0
    labels[best_iou >= iou_positive] = 1
    match = torch.where(labels == 1, best_gt, torch.full_like(best_gt, -1))
    return match, labels


def detection_loss(boxes, predictions, gt_boxes, gt_labels, class_order,
                   iou_positive=0.5, iou_negative=0.3,
                   rpn_boxes=None, rpn_logits=None):
    """Classification + box regression + objectness loss on one image.

    ``predictions`` holds cls_logits (n, V+1 with background last, column
    order given by ``class_order``), deltas (n, 4), obj_logits (n,).
    Classification targets follow the usual matching rule (IoU >= 0.5
    positive, < 0.3 background, in between ignored); regression is smooth-L1
    on encoded deltas of positives; objectness is binary cross-entropy
    against the positive-match indicator. With no ground-truth boxes the
    regression and positive classification terms contribute zero.

    The objectness term defaults to the proposal set, but the training loop
    passes the whole anchor grid through ``rpn_boxes``/``rpn_logits`` so
    anchors outside the current top-k still receive supervision.
    """
    match, match_label = match_proposals(boxes, gt_boxes, iou_positive, iou_negative)
    cls_logits = predictions["cls_logits"]

    bg_index = len(class_order)
    name_to_col = {n: i for i, n in enumerate(class_order)}
    targets = torch.full((boxes.shape[0],), -1, dtype=torch.long)
    for i in range(boxes.shape[0]):
        if match_label[i] == 0:
            targets[i] = bg_index
        elif match_label[i] == 1:
            targets[i] = name_to_col[gt_labels[match[i]]]
    keep = targets >= 0
    zero = cls_logits.sum() * 0.0
    loss_cls = F.cross_entropy(cls_logits[keep], targets[keep]) if keep.any() else zero

    pos = match_label == 1
    if pos.any():
        target_deltas = encode_deltas(boxes[pos], gt_boxes[match[pos]])
        loss_reg = F.smooth_l1_loss(
            predictions["deltas"][pos], target_deltas, reduction="sum", beta=1.0
        ) / pos.sum()
    else:
        loss_reg = predictions["deltas"].sum() * 0.0

    if rpn_boxes is None:
        rpn_boxes = boxes
        rpn_logits = predictions["obj_logits"]
        rpn_pos = pos
    else:
        _, rpn_label = match_proposals(rpn_boxes, gt_boxes, iou_positive, iou_negative)
        rpn_pos = rpn_label == 1
    obj_target = rpn_pos.to(rpn_logits.dtype)
    per_anchor = F.binary_cross_entropy_with_logits(
        rpn_logits, obj_target, reduction="none"
    )
    if rpn_pos.any() and (~rpn_pos).any():
        # balance the few positive anchors against the sea of negatives
        loss_rpn = 0.5 * (per_anchor[rpn_pos].mean() + per_anchor[~rpn_pos].mean())
    else:
        loss_rpn = per_anchor.mean()
    return {"cls": loss_cls, "reg": loss_reg, "rpn": loss_rpn}


def image_pseudo_loss(global_features, concept_lists, head, concept_classes):
    """Mean cross-entropy of full-image logits against each caption concept.

    ``concept_lists[i]`` holds the concept class names of caption i (an empty
    list contributes nothing). Background never participates here.
    """
    losses = []
    for feat, concepts in zip(global_features, concept_lists):
        if not concepts:
            continue
        for name in concepts:
            if name not in concept_classes:
                raise UnknownConcept(f"concept not in scoring vocabulary: {name!r}")
        logits = head.logits(feat[None, :], concept_classes, include_background=False)
        cols = {n: i for i, n in enumerate(concept_classes)}
        target = torch.tensor([cols[c] for c in concepts], dtype=torch.long)
        rep = logits.expand(len(concepts), -1)
        losses.append(F.cross_entropy(rep, target))
    if not losses:
        return global_features.sum() * 0.0
    return torch.stack(losses).mean()
