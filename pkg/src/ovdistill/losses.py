"""Region-text alignment objectives and the stage-dependent loss assembly.

Two families of grounding scores: similarity-weighted (softmax over regions
per word) for the baseline contrastive caption loss, and attention-weighted
(teacher attention rows over the pre-filtered region tokens) for the
distillation loss. The distillation denominator scores every caption --
including the positive one -- with the similarity score, exactly as the
training objective is defined; a flag switches to the variant that scores
the positive term with attention instead.
"""

from dataclasses import dataclass, field

import torch

from .errors import ConfigError, DegenerateInput


def similarity_grounding_score(word_features, region_features):
    """Softmax-weighted average of word-region dot products, mean over words."""
    words = torch.as_tensor(word_features)
    regions = torch.as_tensor(region_features)
    if regions.ndim != 2 or regions.shape[0] == 0:
        raise DegenerateInput("no regions to ground against")
    if words.ndim != 2 or words.shape[0] == 0:
        raise DegenerateInput("no word tokens to ground")
    sims = words @ regions.T  # (n_words, n_regions)
    weights = torch.softmax(sims, dim=1)
    return (weights * sims).sum(dim=1).mean()


def attention_grounding_score(concept_features, union_region_features, attention_scores):
    """Attention-weighted word-region dot products, mean over concepts.

    ``attention_scores`` rows must align with ``concept_features`` rows (noise
    concepts already removed); columns run over the union region tokens.
    """
    concepts = torch.as_tensor(concept_features)
    if concepts.ndim != 2 or concepts.shape[0] == 0:
        raise DegenerateInput("no concepts left to ground")
    scores = attention_scores.scores if hasattr(attention_scores, "scores") else attention_scores
    sims = concepts @ torch.as_tensor(union_region_features).T  # (n_c, n_union)
    return (scores * sims).sum(dim=1).mean()


def pairwise_caption_scores(word_feature_lists, region_feature_lists):
    """Similarity grounding score of every caption against every image.

    Returns a (n_captions, n_images) tensor; entry [t, i] grounds caption t's
    tokens in image i's regions.
    """
    rows = []
    for words in word_feature_lists:
        row = [similarity_grounding_score(words, regions) for regions in region_feature_lists]
        rows.append(torch.stack(row))
    return torch.stack(rows)


def contrastive_caption_loss(scores, reduction="mean"):
    """Bidirectional InfoNCE over a caption/image score matrix.

    The image-side direction normalizes each column over captions, the
    text-side direction normalizes each row over images; both are averaged
    (or summed) over the batch diagonal.
    """
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ConfigError("caption/image score matrix must be square (paired batch)")
    diag = torch.diagonal(scores)
    loss_image_side = -(diag - torch.logsumexp(scores, dim=0))
    loss_text_side = -(diag - torch.logsumexp(scores, dim=1))
    per_pair = loss_image_side + loss_text_side
    return per_pair.mean() if reduction == "mean" else per_pair.sum()


def distill_loss(
    attention_scores_diag,
    concept_scores,
    valid,
    reduction="mean",
    positive_uses_attention=False,
):
    """Attention-based contrastive loss against similarity-scored denominators.

    ``attention_scores_diag[k]`` is pair k's attention grounding score;
    ``concept_scores[t, i]`` is the similarity grounding score of caption t's
    (noise-filtered) concepts in image i's regions. ``valid`` masks captions
    whose concept set survived noise removal; invalid pairs contribute zero
    and are dropped from every denominator.
    """
    n = concept_scores.shape[0]
    valid = torch.as_tensor(valid, dtype=torch.bool)
    if not valid.any():
        return concept_scores.sum() * 0.0
    neg_inf = torch.tensor(
        float("-inf"), dtype=concept_scores.dtype, device=concept_scores.device
    )
    masked = torch.where(valid[:, None].expand(n, n), concept_scores, neg_inf)
    if positive_uses_attention:
        att = torch.diag_embed(attention_scores_diag)
        eye = torch.eye(n, dtype=torch.bool)
        masked = torch.where(eye & valid[:, None], att, masked)
    losses = []
    for k in range(n):
        if not valid[k]:
            continue
        numerator = attention_scores_diag[k]
        image_side = -(numerator - torch.logsumexp(masked[:, k], dim=0))
        text_side = -(numerator - torch.logsumexp(masked[k, :], dim=0))
        losses.append(image_side + text_side)
    stacked = torch.stack(losses)
    return stacked.mean() if reduction == "mean" else stacked.sum()


@dataclass
class LossWeights:
    det: float = 1.0
    cap: float = 0.1
    img: float = 0.1
    divmlm: float = 0.1
    distill: float = 0.1

    def get(self, name):
        return getattr(self, name)


STAGE_COMPONENTS = {
    "baseline": ("det", "cap", "img"),
    "stage1": ("det", "cap", "img", "divmlm"),
    "stage2": ("det", "cap", "img", "divmlm", "distill"),
}


@dataclass
class LossBundle:
    """Named loss scalars of one step plus their weighted total."""

    stage: str
    components: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    total: float = 0.0

    def record(self, step):
        row = {"step": step, "stage": self.stage, "total": float(self.total)}
        for name, value in self.components.items():
            row[name] = float(value)
        return row


def assemble_losses(stage, components, weights=None):
    """Weighted total for a training stage.

    Missing components are only allowed when their weight is zero (loss
    ablations); otherwise the stage contract is violated.
    """
    if stage not in STAGE_COMPONENTS:
        raise ConfigError(f"unknown stage {stage!r}")
    weights = weights or LossWeights()
    total = None
    used = {}
    for name in STAGE_COMPONENTS[stage]:
        w = weights.get(name)
        value = components.get(name)
        if value is None:
            if w != 0.0:
                raise ConfigError(f"stage {stage!r} needs loss component {name!r}")
            continue
        used[name] = value
        term = w * value
        total = term if total is None else total + term
    if total is None:
        raise ConfigError(f"stage {stage!r} has no active loss components")
    bundle = LossBundle(
        stage=stage,
        components={k: _scalar(v) for k, v in used.items()},
        weights={k: weights.get(k) for k in STAGE_COMPONENTS[stage]},
        total=_scalar(total),
    )
    return total, bundle


def _scalar(value):
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
