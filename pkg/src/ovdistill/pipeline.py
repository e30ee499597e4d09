"""Two-stage training pipeline, checkpointing, and the ablation grid.

Stage "stage1" jointly trains detector and teacher (detection, caption,
image, and masked-modeling losses); stage "stage2" adds attention
distillation, with teacher inputs detached from the student's tape so the
teacher supervises rather than chases. Detection and caption batches
alternate 1:1 per optimizer step. Single-threaded runs with a fixed seed are
bit-reproducible and checkpoints capture optimizer and RNG state, so a
resumed run reproduces the unresumed trace.
"""

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import grammar as gr
from . import world as wd
from .detector import DetectorConfig, StudentDetector, detection_loss, image_pseudo_loss
from .errors import ConfigError
from .evaluate import (
    EvalReport,
    attention_diversity,
    caption_attention_records,
    compute_ap50,
    detect_images,
    mlm_accuracy,
)
from .losses import (
    LossBundle,
    LossWeights,
    attention_grounding_score,
    contrastive_caption_loss,
    distill_loss,
    pairwise_caption_scores,
    similarity_grounding_score,
)
from .teacher import (
    FusionConfig,
    FusionTeacher,
    divergence_loss,
    mlm_loss,
    predict_masked_and_flag_noise,
    prefilter_proposals,
)

CHECKPOINT_VERSION = 1

STAGES = ("baseline", "stage1", "stage2")


@dataclass
class OptimConfig:
    lr: float = 2e-3
    weight_decay: float = 0.0
    smoothing: float = 0.99  # squared-gradient running-average factor
    eps: float = 1e-8


@dataclass
class TrainConfig:
    seed: int = 0
    vocab_seed: int = 0
    data_dir: str = ""
    out_dir: str = ""
    stage1_epochs: int = 20
    stage2_epochs: int = 20
    batch_size: int = 8
    det_batch_size: int = 8
    top_k: int = 4
    # grounding scores live in [-1, 1]; these sharpen the batch-contrastive
    # logits. The distillation scale stays small: with only six classes,
    # batch negatives often mention classes truly present in the image, and a
    # hot denominator would punish those correct alignments.
    contrastive_scale: float = 3.0
    distill_scale: float = 1.0
    caption_mode: str = "full"  # full | only_concepts | single_word
    noise_removal: bool = True
    use_cap: bool = True
    use_img: bool = True
    use_mlm: bool = True
    use_divergence: bool = True
    use_distill: bool = True
    teacher_grad_to_student_pretrain: bool = True
    teacher_grad_to_student_distill: bool = False
    distill_positive_uses_attention: bool = False
    batch_reduction: str = "mean"
    num_threads: int = 1
    optim: OptimConfig = field(default_factory=OptimConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self):
        if self.caption_mode not in ("full", "only_concepts", "single_word"):
            raise ConfigError(f"unknown caption_mode {self.caption_mode!r}")
        if self.batch_reduction not in ("mean", "sum"):
            raise ConfigError("batch_reduction must be 'mean' or 'sum'")
        if self.detector.embed_dim != self.fusion.model_dim:
            raise ConfigError("detector.embed_dim must equal fusion.model_dim")
        if self.use_divergence and not self.use_mlm:
            raise ConfigError("divergence constraint requires the masked-modeling loss")
        if self.use_distill and not self.use_mlm:
            raise ConfigError("distillation requires a teacher (enable use_mlm)")
        if self.top_k <= 0:
            raise ConfigError("top_k must be positive")
        for e in (self.stage1_epochs, self.stage2_epochs):
            if e < 0:
                raise ConfigError("epoch counts must be >= 0")


def config_to_dict(config):
    def convert(value):
        if dataclasses.is_dataclass(value):
            return {f.name: convert(getattr(value, f.name)) for f in dataclasses.fields(value)}
        if isinstance(value, tuple):
            return [convert(v) for v in value]
        return value

    return convert(config)


def config_from_dict(payload):
    def build(cls, data):
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in data:
                continue
            value = data[f.name]
            if dataclasses.is_dataclass(f.type if isinstance(f.type, type) else None):
                value = build(f.type, value)
            elif f.name in _NESTED:
                value = build(_NESTED[f.name], value)
            elif isinstance(value, list):
                value = tuple(value)
            kwargs[f.name] = value
        return cls(**kwargs)

    _NESTED = {
        "optim": OptimConfig,
        "weights": LossWeights,
        "detector": DetectorConfig,
        "fusion": FusionConfig,
    }
    return build(TrainConfig, payload)


def apply_overrides(payload, overrides):
    """Apply dotted ``key=value`` overrides onto a config dict in place."""
    for key, raw in overrides:
        parts = key.split(".")
        node = payload
        for p in parts[:-1]:
            if p not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        leaf = parts[-1]
        if leaf not in node:
            raise ConfigError(f"unknown config key {key!r}")
        current = node[leaf]
        node[leaf] = _coerce(raw, current)
    return payload


def _coerce(raw, current):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, (list, tuple)):
        return [json.loads(v) for v in raw.split(",")]
    return raw


def load_config(path=None, overrides=()):
    payload = config_to_dict(TrainConfig())
    if path:
        with open(path, encoding="utf-8") as fh:
            on_disk = json.load(fh)
        _deep_update(payload, on_disk)
    apply_overrides(payload, overrides)
    return config_from_dict(payload)


def _deep_update(base, extra):
    for key, value in extra.items():
        if key not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, dict) and isinstance(base[key], dict):
            _deep_update(base[key], value)
        else:
            base[key] = value


def config_hash(config):
    """Stable hash over every training-relevant field (output dir excluded)."""
    payload = config_to_dict(config)
    payload.pop("out_dir", None)
    blob = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# corpus loading
# ---------------------------------------------------------------------------

def transform_caption_text(text, vocab, mode):
    """Caption-type ablation: keep the full caption, join bare concepts with
    commas, or keep only the first concept word."""
    if mode == "full":
        return text
    caption = gr.parse_caption(text, vocab)
    concepts = caption.concept_words(vocab)
    if not concepts:
        return text
    if mode == "only_concepts":
        return " , ".join(concepts)
    if mode == "single_word":
        return concepts[0]
    raise ConfigError(f"unknown caption_mode {mode!r}")


@dataclass
class CaptionData:
    images: np.ndarray
    captions: list
    views: list
    records: list

    def __len__(self):
        return len(self.captions)


@dataclass
class DetectionData:
    images: np.ndarray
    boxes: list
    labels: list

    def __len__(self):
        return len(self.labels)


def load_caption_split(directory, vocab, caption_mode="full"):
    records, images = wd.read_dataset(directory)
    captions, views = [], []
    for rec in records:
        text = transform_caption_text(rec.caption, vocab, caption_mode)
        cap = gr.parse_caption(text, vocab)
        captions.append(cap)
        views.append(gr.make_masked_views(cap, vocab))
    return CaptionData(
        images=np.asarray(images, dtype=np.float32),
        captions=captions,
        views=views,
        records=records,
    )


def load_detection_split(directory):
    records, images = wd.read_dataset(directory)
    boxes = [np.asarray(r.boxes, dtype=np.float32).reshape(-1, 4) for r in records]
    labels = [list(r.labels) for r in records]
    return DetectionData(
        images=np.asarray(images, dtype=np.float32), boxes=boxes, labels=labels
    )


def load_training_data(config, vocab):
    if not config.data_dir or not os.path.isdir(config.data_dir):
        raise ConfigError(f"dataset directory not found: {config.data_dir!r}")
    det_dir = os.path.join(config.data_dir, "detection")
    cap_dir = os.path.join(config.data_dir, "captions")
    if not os.path.isdir(det_dir) or not os.path.isdir(cap_dir):
        raise ConfigError(f"{config.data_dir!r} lacks detection/ or captions/ corpora")
    return (
        load_detection_split(det_dir),
        load_caption_split(cap_dir, vocab, config.caption_mode),
    )


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

class Trainer:
    """Holds models, optimizer, data order RNG, and the alternating step loop."""

    def __init__(self, config, world_config=None):
        torch.set_num_threads(config.num_threads)
        self.config = config
        self.world_config = world_config or wd.load_world_config(config.data_dir)
        self.split = self.world_config.split()
        self.vocab = gr.default_vocabulary(
            embedding_dim=config.detector.embed_dim, seed=config.vocab_seed
        )
        self.det_data, self.cap_data = load_training_data(config, self.vocab)

        torch.manual_seed(config.seed)
        self.detector = StudentDetector(
            config.detector, self.vocab.class_embeddings(self.split.all)
        )
        self.teacher = None
        if config.use_mlm:
            self.teacher = FusionTeacher(
                config.fusion, self.vocab.embeddings, vocab_size=len(self.vocab)
            )
        params = list(self.detector.parameters())
        if self.teacher is not None:
            params += list(self.teacher.parameters())
        self.optimizer = torch.optim.RMSprop(
            params,
            lr=config.optim.lr,
            alpha=config.optim.smoothing,
            eps=config.optim.eps,
            weight_decay=config.optim.weight_decay,
            momentum=0.0,
        )
        self.data_rng = np.random.default_rng(config.seed)
        self.token_table = torch.as_tensor(self.vocab.embeddings, dtype=torch.float32)
        self.global_step = 0
        self.epochs_done = {"baseline": 0, "stage1": 0, "stage2": 0}
        self.history = []
        self._det_order = None
        self._det_cursor = 0

    # -- data order ---------------------------------------------------------

    def _next_det_batch(self):
        n = len(self.det_data)
        size = min(self.config.det_batch_size, n)
        if self._det_order is None or self._det_cursor + size > n:
            self._det_order = self.data_rng.permutation(n)
            self._det_cursor = 0
        batch = self._det_order[self._det_cursor : self._det_cursor + size]
        self._det_cursor += size
        return batch

    # -- steps ---------------------------------------------------------------

    def _log(self, stage, components, total):
        bundle = LossBundle(
            stage=stage,
            components={k: float(v.detach()) for k, v in components.items()},
            weights={},
            total=float(total.detach()),
        )
        self.history.append(bundle.record(self.global_step))

    def det_step(self, stage, indices):
        images = torch.as_tensor(self.det_data.images[indices])
        props = self.detector.propose(images)
        base = list(self.split.base)
        cls_logits = self.detector.head.logits(props["features"], base)
        per_image = []
        for b, idx in enumerate(indices):
            predictions = {
                "cls_logits": cls_logits[b],
                "deltas": props["deltas"][b],
                "obj_logits": props["obj_logits"][b],
            }
            gt_boxes = torch.as_tensor(self.det_data.boxes[idx])
            parts = detection_loss(
                props["boxes"][b],
                predictions,
                gt_boxes,
                self.det_data.labels[idx],
                base,
                self.config.detector.iou_positive,
                self.config.detector.iou_negative,
                rpn_boxes=self.detector.anchors,
                rpn_logits=props["obj_all"][b],
            )
            per_image.append(parts["cls"] + parts["reg"] + parts["rpn"])
        det = torch.stack(per_image).mean()
        total = self.config.weights.det * det
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        self.global_step += 1
        self._log(stage, {"det": det}, total)

    def caption_step(self, stage, indices):
        cfg = self.config
        distill_active = (
            stage == "stage2" and cfg.use_distill and cfg.weights.distill != 0.0
        )
        images = torch.as_tensor(self.cap_data.images[indices])
        props = self.detector.propose(images)
        feats = props["features"]  # (B, n, d)
        batch_captions = [self.cap_data.captions[i] for i in indices]
        batch_views = [self.cap_data.views[i] for i in indices]

        components = {}
        if cfg.use_cap:
            word_feats = [
                self.token_table[list(c.word_ids)] for c in batch_captions
            ]
            score_matrix = pairwise_caption_scores(word_feats, list(feats))
            components["cap"] = contrastive_caption_loss(
                cfg.contrastive_scale * score_matrix, cfg.batch_reduction
            )

        teacher_out = []
        teacher_active = self.teacher is not None and stage != "baseline"
        if teacher_active:
            if distill_active and not cfg.teacher_grad_to_student_distill:
                teacher_feats = feats.detach()
            elif stage != "stage2" and not cfg.teacher_grad_to_student_pretrain:
                teacher_feats = feats.detach()
            else:
                teacher_feats = feats
            divmlm_terms = []
            for b, caption in enumerate(batch_captions):
                views = batch_views[b]
                if not views:
                    teacher_out.append(None)
                    continue
                concept_embeds = self.token_table[list(caption.concept_ids())]
                filtered = prefilter_proposals(
                    concept_embeds.detach(), teacher_feats[b].detach(), cfg.top_k
                )
                logits, record = self.teacher.forward_fusion(
                    views, filtered, teacher_feats[b]
                )
                term = mlm_loss(logits, caption.concept_ids())
                if cfg.use_divergence:
                    term = term + divergence_loss(
                        record,
                        filtered,
                        cfg.fusion.divergence_alpha,
                        cfg.fusion.divergence_exponent,
                    )
                divmlm_terms.append(term)
                teacher_out.append({"logits": logits, "record": record, "filtered": filtered})
            if divmlm_terms:
                components["divmlm"] = torch.stack(divmlm_terms).mean()

        # noise flags gate the distillation and image losses only
        kept_concepts = []
        for b, caption in enumerate(batch_captions):
            ids = list(caption.concept_ids())
            keep = list(range(len(ids)))
            if distill_active and cfg.noise_removal and teacher_out and teacher_out[b]:
                _, flags = predict_masked_and_flag_noise(
                    teacher_out[b]["logits"], ids
                )
                keep = [i for i in keep if not flags[i]]
            kept_concepts.append(keep)

        if cfg.use_img:
            gfeats = self.detector.global_region(images)
            concept_lists = []
            for b, caption in enumerate(batch_captions):
                words = caption.concept_words(self.vocab)
                concept_lists.append([words[i] for i in kept_concepts[b]])
            components["img"] = image_pseudo_loss(
                gfeats, concept_lists, self.detector.head, list(self.split.all)
            )

        if distill_active and teacher_active:
            a_diag, valid = [], []
            concept_feat_lists = []
            for b, caption in enumerate(batch_captions):
                keep = kept_concepts[b]
                out = teacher_out[b] if teacher_out else None
                if out is None or not keep:
                    valid.append(False)
                    a_diag.append(feats.sum() * 0.0)
                    concept_feat_lists.append(None)
                    continue
                concept_embeds = self.token_table[list(caption.concept_ids())][keep]
                concept_feat_lists.append(concept_embeds)
                union_feats = feats[b][list(out["filtered"].union)]
                attn = out["record"].scores.detach()[keep]
                a_diag.append(
                    attention_grounding_score(concept_embeds, union_feats, attn)
                )
                valid.append(True)
            score_rows = []
            for t in range(len(indices)):
                row = []
                for i in range(len(indices)):
                    if concept_feat_lists[t] is None:
                        row.append(feats.sum() * 0.0)
                    else:
                        row.append(
                            similarity_grounding_score(concept_feat_lists[t], feats[i])
                        )
                score_rows.append(torch.stack(row))
            concept_scores = torch.stack(score_rows)
            components["distill"] = distill_loss(
                cfg.distill_scale * torch.stack(a_diag),
                cfg.distill_scale * concept_scores,
                valid,
                cfg.batch_reduction,
                cfg.distill_positive_uses_attention,
            )

        total = None
        for name, value in components.items():
            term = self.config.weights.get(name) * value
            total = term if total is None else total + term
        if total is None:
            return
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        self.global_step += 1
        self._log(stage, components, total)

    # -- epochs ---------------------------------------------------------------

    def caption_losses_active(self):
        cfg = self.config
        return cfg.use_cap or cfg.use_img or cfg.use_mlm

    def run_epoch(self, stage):
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        if self.caption_losses_active():
            order = self.data_rng.permutation(len(self.cap_data))
            size = min(self.config.batch_size, len(order))
            for start in range(0, len(order) - size + 1, size):
                self.det_step(stage, self._next_det_batch())
                self.caption_step(stage, order[start : start + size])
        else:
            order = self.data_rng.permutation(len(self.det_data))
            size = min(self.config.det_batch_size, len(order))
            for start in range(0, len(order) - size + 1, size):
                self.det_step(stage, order[start : start + size])
        self.epochs_done[stage] += 1

    def train_stage(self, stage, epochs):
        for _ in range(epochs):
            self.run_epoch(stage)
        return self.history

    # -- checkpointing ---------------------------------------------------------

    def state_dict(self):
        # deep copies: optimizer.load_state_dict keeps tensor references when
        # dtype/device already match, which would alias state across trainers
        state = {
            "format_version": CHECKPOINT_VERSION,
            "config_hash": config_hash(self.config),
            "config": config_to_dict(self.config),
            "detector": copy.deepcopy(self.detector.state_dict()),
            "teacher": copy.deepcopy(self.teacher.state_dict()) if self.teacher else None,
            "optimizer": copy.deepcopy(self.optimizer.state_dict()),
            "torch_rng": torch.get_rng_state(),
            "data_rng": self.data_rng.bit_generator.state,
            "det_order": None if self._det_order is None else self._det_order.tolist(),
            "det_cursor": self._det_cursor,
            "global_step": self.global_step,
            "epochs_done": dict(self.epochs_done),
            "history": copy.deepcopy(self.history),
        }
        return state

    def save_checkpoint(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        torch.save(self.state_dict(), path)
        return path

    def load_state(self, state, check_hash=True):
        if state.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigError("unsupported checkpoint format version")
        if check_hash and state["config_hash"] != config_hash(self.config):
            raise ConfigError("checkpoint config hash does not match this config")
        self.detector.load_state_dict(state["detector"])
        if self.teacher is not None and state["teacher"] is not None:
            self.teacher.load_state_dict(state["teacher"])
        self.optimizer.load_state_dict(copy.deepcopy(state["optimizer"]))
        torch.set_rng_state(state["torch_rng"])
        self.data_rng.bit_generator.state = state["data_rng"]
        self._det_order = (
            None if state["det_order"] is None else np.asarray(state["det_order"])
        )
        self._det_cursor = state["det_cursor"]
        self.global_step = state["global_step"]
        self.epochs_done = dict(state["epochs_done"])
        self.history = list(state["history"])


def load_checkpoint(path):
    return torch.load(path, weights_only=False)


# ---------------------------------------------------------------------------
# run entry points
# ---------------------------------------------------------------------------

def _write_manifest(config, stage, trainer, ckpt_path, metrics=None):
    manifest = {
        "config_hash": config_hash(config),
        "stage": stage,
        "epochs_done": trainer.epochs_done,
        "global_step": trainer.global_step,
        "checkpoint": ckpt_path,
        "metrics": metrics or {},
    }
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    log_path = os.path.join(config.out_dir, "log.jsonl")
    with open(log_path, "w", encoding="utf-8") as fh:
        for row in trainer.history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def run_baseline(config):
    trainer = Trainer(config)
    trainer.train_stage("baseline", config.stage1_epochs)
    ckpt = os.path.join(config.out_dir, "baseline.pt")
    trainer.save_checkpoint(ckpt)
    _write_manifest(config, "baseline", trainer, ckpt)
    return ckpt


def run_stage1(config):
    trainer = Trainer(config)
    trainer.train_stage("stage1", config.stage1_epochs)
    ckpt = os.path.join(config.out_dir, "stage1.pt")
    trainer.save_checkpoint(ckpt)
    _write_manifest(config, "stage1", trainer, ckpt)
    return ckpt


def run_stage2(config, stage1_checkpoint):
    state = load_checkpoint(stage1_checkpoint)
    trainer = Trainer(config)
    trainer.load_state(state)
    trainer.train_stage("stage2", config.stage2_epochs)
    ckpt = os.path.join(config.out_dir, "stage2.pt")
    trainer.save_checkpoint(ckpt)
    _write_manifest(config, "stage2", trainer, ckpt)
    return ckpt


def evaluate_checkpoint(config, ckpt_path, with_teacher_metrics=True):
    """AP50 on the eval corpus plus teacher diagnostics for the checkpoint.

    Returns (EvalReport, diagnostics, pr_curves); diagnostics is None for
    teacher-free checkpoints.
    """
    state = load_checkpoint(ckpt_path)
    trainer = Trainer(config)
    trainer.load_state(state, check_hash=False)
    eval_dir = os.path.join(config.data_dir, "eval")
    records, images = wd.read_dataset(eval_dir)
    class_names = list(trainer.split.all)
    det_lists = detect_images(trainer.detector, images, class_names)
    detections = {i: det_lists[i] for i in range(len(det_lists))}
    gt = {}
    for i, rec in enumerate(records):
        gt[i] = rec.gt_boxes_all()
    ap = compute_ap50(detections, gt, trainer.split)
    curves = {
        name: pr_curve(detections, gt, name)
        for name in class_names
        if name in ap["per_class"]
    }

    mlm_acc = None
    attn_tv = None
    diagnostics = None
    if with_teacher_metrics and trainer.teacher is not None:
        diagnostics = caption_attention_records(
            trainer.teacher, trainer.detector, records, images, trainer.vocab,
            config.top_k,
        )
        mlm_acc = mlm_accuracy(diagnostics)
        attn_tv = attention_diversity([d["attention"] for d in diagnostics])
    report = EvalReport(
        ap50_novel=ap["novel"],
        ap50_base=ap["base"],
        ap50_all=ap["all"],
        mlm_accuracy=mlm_acc,
        attention_tv=attn_tv,
        per_class_ap=ap["per_class"],
    )
    return report, diagnostics, curves


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

GRID_ROWS = {
    "det_only": dict(use_cap=False, use_img=False, use_mlm=False,
                     use_divergence=False, use_distill=False, stages=("baseline",)),
    "det_cap": dict(use_cap=True, use_img=False, use_mlm=False,
                    use_divergence=False, use_distill=False, stages=("baseline",)),
    "det_cap_img": dict(use_cap=True, use_img=True, use_mlm=False,
                        use_divergence=False, use_distill=False, stages=("baseline",)),
    "pretrain_divmlm": dict(use_cap=True, use_img=True, use_mlm=True,
                            use_divergence=True, use_distill=False, stages=("stage1",)),
    "pretrain_mlm": dict(use_cap=True, use_img=True, use_mlm=True,
                         use_divergence=False, use_distill=False, stages=("stage1",)),
    "distill_no_divergence": dict(use_cap=True, use_img=True, use_mlm=True,
                                  use_divergence=False, use_distill=True,
                                  stages=("stage1", "stage2")),
    "all": dict(use_cap=True, use_img=True, use_mlm=True,
                use_divergence=True, use_distill=True, stages=("stage1", "stage2")),
}


def run_grid_row(config, row_name, keep_trainer=False):
    """Train one ablation row from scratch and evaluate it."""
    if row_name not in GRID_ROWS:
        raise ConfigError(f"unknown grid row {row_name!r}")
    row = GRID_ROWS[row_name]
    cfg = dataclasses.replace(
        config,
        use_cap=row["use_cap"],
        use_img=row["use_img"],
        use_mlm=row["use_mlm"],
        use_divergence=row["use_divergence"],
        use_distill=row["use_distill"],
    )
    trainer = Trainer(cfg)
    for stage in row["stages"]:
        epochs = cfg.stage1_epochs if stage != "stage2" else cfg.stage2_epochs
        trainer.train_stage(stage, epochs)
    report = _evaluate_trainer(trainer, cfg)
    result = {
        "row": row_name,
        "novel": report.ap50_novel,
        "base": report.ap50_base,
        "all": report.ap50_all,
        "mlm_accuracy": report.mlm_accuracy,
        "attention_tv": report.attention_tv,
    }
    if keep_trainer:
        return result, trainer
    return result


def _evaluate_trainer(trainer, config):
    eval_dir = os.path.join(config.data_dir, "eval")
    records, images = wd.read_dataset(eval_dir)
    class_names = list(trainer.split.all)
    det_lists = detect_images(trainer.detector, images, class_names)
    detections = {i: det_lists[i] for i in range(len(det_lists))}
    gt = {i: rec.gt_boxes_all() for i, rec in enumerate(records)}
    ap = compute_ap50(detections, gt, trainer.split)
    mlm_acc = None
    attn_tv = None
    if trainer.teacher is not None:
        diagnostics = caption_attention_records(
            trainer.teacher, trainer.detector, records, images, trainer.vocab,
            config.top_k,
        )
        mlm_acc = mlm_accuracy(diagnostics)
        attn_tv = attention_diversity([d["attention"] for d in diagnostics])
    return EvalReport(
        ap50_novel=ap["novel"], ap50_base=ap["base"], ap50_all=ap["all"],
        mlm_accuracy=mlm_acc, attention_tv=attn_tv, per_class_ap=ap["per_class"],
    )


def run_ablation_grid(config, rows=None, caption_modes=(), noise_removal_pair=False,
                      out_path=None):
    """Execute the requested ablation rows and emit a results table."""
    rows = list(rows) if rows is not None else list(GRID_ROWS)
    results = []
    for name in rows:
        results.append(run_grid_row(config, name))
    for mode in caption_modes:
        cfg = dataclasses.replace(config, caption_mode=mode)
        res = run_grid_row(cfg, "all")
        res["row"] = f"caption_{mode}"
        results.append(res)
    if noise_removal_pair:
        for removal in (True, False):
            cfg = dataclasses.replace(config, noise_removal=removal)
            res = run_grid_row(cfg, "all")
            res["row"] = f"noise_removal_{'on' if removal else 'off'}"
            results.append(res)
    if out_path:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write("row\tnovel\tbase\tall\tmlm_accuracy\tattention_tv\n")
            for r in results:
                fh.write(
                    f"{r['row']}\t{r['novel']:.6f}\t{r['base']:.6f}\t{r['all']:.6f}\t"
                    f"{_fmt(r['mlm_accuracy'])}\t{_fmt(r['attention_tv'])}\n"
                )
    return results


def _fmt(value):
    return "-" if value is None else f"{value:.6f}"
