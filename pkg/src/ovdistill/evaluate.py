"""Evaluation and diagnostics: AP50 over class splits, masked-word accuracy,
attention diversity, and plot-data emission."""

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateInput
from . import grammar as gr
from .detector import decode_deltas
from .teacher import prefilter_proposals, predict_masked_and_flag_noise


@dataclass
class Detection:
    box: np.ndarray
    label: str
    confidence: float


@dataclass
class EvalReport:
    ap50_novel: float
    ap50_base: float
    ap50_all: float
    mlm_accuracy: float | None = None
    attention_tv: float | None = None
    per_class_ap: dict | None = None

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def iou_np(box, boxes):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x1 = np.maximum(box[0], boxes[:, 0])
    y1 = np.maximum(box[1], boxes[:, 1])
    x2 = np.minimum(box[2], boxes[:, 2])
    y2 = np.minimum(box[3], boxes[:, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    return inter / (area + areas - inter)


def nms(boxes, scores, iou_threshold=0.5):
    """Indices kept after greedy non-maximum suppression (descending score,
    ties to the lower index)."""
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    keep = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        ious = iou_np(boxes[idx], boxes)
        suppressed |= ious > iou_threshold
        suppressed[idx] = True
    return keep


def detect_images(detector, images, class_names, nms_iou=0.5, batch_size=64):
    """Run the detector over images and return per-image Detection lists.

    Every proposal scores every class (softmax over classes + background);
    boxes are the anchor boxes refined by the regression head, with per-class
    NMS applied.
    """
    results = []
    detector.eval()
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = torch.as_tensor(
                np.asarray(images[start : start + batch_size]), dtype=torch.float32
            )
            out = detector.propose(chunk)
            B, n = out["boxes"].shape[:2]
            logits = detector.head.logits(out["features"], class_names, include_background=True)
            probs = torch.softmax(logits, dim=-1).cpu().numpy()
            for b in range(B):
                refined = decode_deltas(
                    out["boxes"][b], out["deltas"][b], detector.config.image_size
                ).cpu().numpy()
                dets = []
                for c, name in enumerate(class_names):
                    scores = probs[b, :, c]
                    keep = nms(refined, scores, nms_iou)
                    for i in keep:
                        dets.append(Detection(box=refined[i], label=name, confidence=float(scores[i])))
                results.append(dets)
    return results


def average_precision_50(detections, gt_by_image, class_name, iou_threshold=0.5):
    """All-point interpolated AP at the IoU threshold for one class.

    Detections across images are ranked by descending confidence; each
    greedily matches the best unmatched same-class ground-truth box of its
    image, counting a true positive at IoU >= threshold. Classes with no
    ground truth return None (excluded from group means).
    """
    gt_count = sum(
        sum(1 for lab in labels if lab == class_name)
        for _, labels in gt_by_image.values()
    )
    if gt_count == 0:
        return None
    recall, precision = pr_curve(detections, gt_by_image, class_name, iou_threshold)
    if len(recall) == 0:
        return 0.0
    return float(_interpolated_ap(recall, precision))


def _interpolated_ap(recall, precision):
    # area under the precision envelope (all-point interpolation)
    r = np.concatenate([[0.0], recall, [recall[-1]]])
    p = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    steps = np.where(r[1:] != r[:-1])[0]
    return np.sum((r[steps + 1] - r[steps]) * p[steps + 1])


def pr_curve(detections, gt_by_image, class_name, iou_threshold=0.5):
    """Raw (recall, precision) points of one class, for plot emission."""
    gt_count = 0
    matched = {}
    for img_id, (boxes, labels) in gt_by_image.items():
        idx = [i for i, lab in enumerate(labels) if lab == class_name]
        matched[img_id] = np.zeros(len(idx), dtype=bool)
        gt_count += len(idx)
    if gt_count == 0:
        return np.array([]), np.array([])
    rows = []
    for img_id, dets in detections.items():
        for det in dets:
            if det.label == class_name:
                rows.append((det.confidence, img_id, det.box))
    rows.sort(key=lambda r: (-r[0], r[1]))
    tp = fp = 0
    recall, precision = [], []
    for _, img_id, box in rows:
        boxes, labels = gt_by_image[img_id]
        idx = [i for i, lab in enumerate(labels) if lab == class_name]
        best_iou, best_j = 0.0, -1
        for j, gi in enumerate(idx):
            if matched[img_id][j]:
                continue
            iou = float(iou_np(np.asarray(box, dtype=np.float64), boxes[gi][None])[0])
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_iou >= iou_threshold and best_j >= 0:
            matched[img_id][best_j] = True
            tp += 1
        else:
            fp += 1
        recall.append(tp / gt_count)
        precision.append(tp / (tp + fp))
    return np.asarray(recall), np.asarray(precision)


def compute_ap50(detections, gt_by_image, split, iou_threshold=0.5):
    """Group AP50 means over base / novel / all classes.

    ``detections`` and ``gt_by_image`` are keyed by image id; classes without
    any ground truth are excluded from their group mean.
    """
    per_class = {}
    for name in split.all:
        ap = average_precision_50(detections, gt_by_image, name, iou_threshold)
        if ap is not None:
            per_class[name] = ap

    def group(names):
        vals = [per_class[n] for n in names if n in per_class]
        return float(np.mean(vals)) if vals else 0.0

    return {
        "novel": group(split.novel),
        "base": group(split.base),
        "all": group(split.all),
        "per_class": per_class,
    }


# ---------------------------------------------------------------------------
# teacher diagnostics
# ---------------------------------------------------------------------------

def caption_attention_records(teacher, detector, records, images, vocab, top_k):
    """Teacher attention records and masked predictions over a caption corpus.

    Yields dicts per caption with >= 1 concept: parsed caption, filtered
    proposals, attention matrix, predictions, targets.
    """
    teacher.eval()
    detector.eval()
    out = []
    with torch.no_grad():
        for idx, (rec, image) in enumerate(zip(records, images)):
            caption = gr.parse_caption(rec.caption, vocab)
            views = gr.make_masked_views(caption, vocab)
            if not views:
                continue
            prop = detector.propose(
                torch.as_tensor(image, dtype=torch.float32)[None]
            )
            feats = prop["features"][0]
            concept_embeds = torch.as_tensor(
                np.stack([vocab.embeddings[i] for i in caption.concept_ids()]),
                dtype=feats.dtype,
            )
            filtered = prefilter_proposals(concept_embeds, feats, top_k)
            logits, record = teacher.forward_fusion(views, filtered, feats)
            preds, flags = predict_masked_and_flag_noise(logits, caption.concept_ids())
            out.append(
                {
                    "caption_id": idx,
                    "caption": caption,
                    "boxes": prop["boxes"][0].cpu().numpy(),
                    "filtered": filtered,
                    "attention": record.numpy(),
                    "predictions": preds,
                    "targets": np.asarray(caption.concept_ids()),
                    "flags": flags,
                }
            )
    return out


def mlm_accuracy(diagnostics):
    """Fraction of masked concepts predicted exactly, over all views."""
    total, hits = 0, 0
    for d in diagnostics:
        total += len(d["targets"])
        hits += int(np.sum(d["predictions"] == d["targets"]))
    if total == 0:
        raise DegenerateInput("no masked views to score")
    return hits / total


def attention_diversity(attention_rows):
    """Mean pairwise total-variation distance between concept attention rows.

    ``attention_rows`` is an iterable of per-caption matrices; captions with
    fewer than two concepts are skipped.
    """
    per_caption = []
    for rows in attention_rows:
        rows = np.asarray(rows)
        n = rows.shape[0]
        if n < 2:
            continue
        dists = []
        for i in range(n):
            for j in range(i + 1, n):
                dists.append(0.5 * np.abs(rows[i] - rows[j]).sum())
        per_caption.append(float(np.mean(dists)))
    if not per_caption:
        raise DegenerateInput("no caption with >= 2 concepts to measure")
    return float(np.mean(per_caption))


# ---------------------------------------------------------------------------
# plot data emission
# ---------------------------------------------------------------------------

def emit_plot_data(report, diagnostics, out_dir, pr_curves=None, ablation_rows=None):
    """Write tab-separated tables any plotting tool can ingest.

    attention_rows.tsv holds one row per (caption, concept, proposal);
    pr_curves.tsv and ablation_bars.tsv are written when data is supplied;
    eval_report.json carries the scalar report.
    """
    os.makedirs(out_dir, exist_ok=True)
    attn_path = os.path.join(out_dir, "attention_rows.tsv")
    with open(attn_path, "w", encoding="utf-8") as fh:
        fh.write("caption_id\tconcept\toccurrence\tproposal\tx1\ty1\tx2\ty2\tscore\n")
        for d in diagnostics or []:
            caption = d["caption"]
            boxes = d["boxes"]
            for ci, pos in enumerate(caption.concept_positions):
                word = caption.text.split(" ")[pos]
                for col, prop_idx in enumerate(d["filtered"].union):
                    b = boxes[prop_idx]
                    fh.write(
                        f"{d['caption_id']}\t{word}\t{ci}\t{prop_idx}\t"
                        f"{b[0]:.3f}\t{b[1]:.3f}\t{b[2]:.3f}\t{b[3]:.3f}\t"
                        f"{d['attention'][ci, col]:.8f}\n"
                    )

    if pr_curves is not None:
        with open(os.path.join(out_dir, "pr_curves.tsv"), "w", encoding="utf-8") as fh:
            fh.write("class\trecall\tprecision\n")
            for name, (recall, precision) in pr_curves.items():
                for r, p in zip(recall, precision):
                    fh.write(f"{name}\t{r:.6f}\t{p:.6f}\n")

    if ablation_rows is not None:
        with open(os.path.join(out_dir, "ablation_bars.tsv"), "w", encoding="utf-8") as fh:
            fh.write("row\tnovel\tbase\tall\n")
            for row in ablation_rows:
                fh.write(
                    f"{row['row']}\t{row['novel']:.6f}\t{row['base']:.6f}\t{row['all']:.6f}\n"
                )

    if report is not None:
        with open(os.path.join(out_dir, "eval_report.json"), "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
    return attn_path


def read_tsv(path):
    """Parse an emitted TSV back into a list of dicts (round-trip check)."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        rows = []
        for line in fh:
            values = line.rstrip("\n").split("\t")
            rows.append(dict(zip(header, values)))
    return rows
