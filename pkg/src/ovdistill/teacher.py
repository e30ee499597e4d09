"""Teacher fusion transformer over masked caption tokens and region tokens.

Each caption is replicated once per concept with exactly that concept masked.
Region tokens are the per-concept top-K proposals concatenated in concept
order (duplicates across concepts retained). The record of head-averaged
attention from each mask query onto the region tokens, renormalized to sum 1,
is both the divergence-loss input and the distillation target.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError


@dataclass
class FusionConfig:
    layers: int = 2
    heads: int = 4
    model_dim: int = 32
    feedforward_dim: int = 64
    divergence_alpha: float = 0.5
    divergence_layer: int = -1  # python index into layers; -1 = last
    divergence_exponent: int = 1  # margin normalizer 1/|C|**e
    dropout: float = 0.0

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ConfigError("model_dim must be divisible by heads")
        if self.divergence_alpha <= 0:
            raise ConfigError("divergence_alpha must be positive")
        if not -self.layers <= self.divergence_layer < self.layers:
            raise ConfigError("divergence_layer out of range")


@dataclass
class FilteredProposals:
    """Per-concept kept proposal indices and their concatenation.

    ``per_concept[i]`` lists concept i's kept proposal indices in original
    proposal order (duplicate-free); ``union`` concatenates them in concept
    order, retaining duplicates across concepts. ``blocks[i]`` is concept i's
    position span inside ``union``.
    """

    per_concept: list
    union: list
    blocks: list

    @property
    def n_concepts(self):
        return len(self.per_concept)


def prefilter_proposals(concept_embeddings, proposal_features, k):
    """Keep, per concept, the K proposals most similar to it.

    Similarity is the plain dot product; ties go to the lower proposal index.
    K >= n keeps all proposals in their original order.
    """
    if k <= 0:
        raise ConfigError("top-K must be positive")
    concepts = torch.as_tensor(concept_embeddings)
    feats = torch.as_tensor(proposal_features)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ConfigError("prefilter needs a nonempty proposal set")
    n = feats.shape[0]
    keep = min(k, n)
    sims = (concepts.double() @ feats.double().T).detach().cpu().numpy()
    per_concept, union, blocks = [], [], []
    for row in np.atleast_2d(sims):
        ranked = np.lexsort((np.arange(n), -row))  # stable: higher sim first, then lower index
        chosen = sorted(ranked[:keep].tolist())
        start = len(union)
        union.extend(chosen)
        blocks.append((start, start + len(chosen)))
        per_concept.append(chosen)
    return FilteredProposals(per_concept=per_concept, union=union, blocks=blocks)


@dataclass
class AttentionRecord:
    """Head-averaged attention of each masked concept over the region tokens.

    Row i comes from the view masking concept i; every row is non-negative
    and renormalized to sum to 1 over the union positions.
    """

    scores: torch.Tensor  # (n_concepts, len(union))
    layer_index: int
    head_averaged: bool = True

    def numpy(self):
        return self.scores.detach().cpu().numpy()


def sinusoidal_positions(length, dim, dtype=torch.float32):
    pos = torch.arange(length, dtype=dtype)[:, None]
    i = torch.arange(dim, dtype=dtype)[None, :]
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=dtype), (2 * (i // 2)) / dim)
    enc = torch.where(i.long() % 2 == 0, torch.sin(angle), torch.cos(angle))
    return enc


class FusionLayer(nn.Module):
    def __init__(self, dim, heads, ff_dim, dropout):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.GELU(), nn.Linear(ff_dim, dim))

    def forward(self, x):
        out, weights = self.attn(x, x, x, need_weights=True, average_attn_weights=False)
        x = self.norm1(x + out)
        x = self.norm2(x + self.ff(x))
        return x, weights  # weights: (B, heads, L, L)


class FusionTeacher(nn.Module):
    """Transformer encoder over joint [masked text | region] token sequences.

    Text tokens get frozen word embeddings, sinusoidal positions, and a text
    type embedding; region tokens get the region feature plus a region type
    embedding and no positions (proposals are a set, not a sequence).
    """

    def __init__(self, config, token_embeddings, vocab_size):
        super().__init__()
        self.config = config
        dim = config.model_dim
        table = torch.as_tensor(np.asarray(token_embeddings), dtype=torch.float32)
        if table.shape[1] != dim:
            raise ConfigError(
                f"embedding dim {table.shape[1]} != fusion model_dim {dim}"
            )
        self.register_buffer("token_table", table)
        self.type_text = nn.Parameter(torch.randn(dim) * 0.02)
        self.type_region = nn.Parameter(torch.randn(dim) * 0.02)
        self.layers = nn.ModuleList(
            [FusionLayer(dim, config.heads, config.feedforward_dim, config.dropout)
             for _ in range(config.layers)]
        )
        self.vocab_head = nn.Linear(dim, vocab_size)

    def forward_tokens(self, token_ids, mask_positions, region_features):
        """Run all views of one caption jointly with a shared region set.

        token_ids: (n_views, n_text) long; mask_positions: (n_views,) long;
        region_features: (n_regions, dim). Returns (mask_logits, AttentionRecord).
        """
        dtype = self.token_table.dtype
        n_views, n_text = token_ids.shape
        if region_features.ndim != 2 or region_features.shape[1] != self.config.model_dim:
            raise ConfigError("region feature dimension does not match fusion model_dim")
        text = self.token_table[token_ids]
        text = text + sinusoidal_positions(n_text, self.config.model_dim, dtype)
        text = text + self.type_text
        regions = region_features.to(dtype) + self.type_region
        x = torch.cat([text, regions[None].expand(n_views, -1, -1)], dim=1)

        collected = None
        want = self.config.divergence_layer % self.config.layers
        for idx, layer in enumerate(self.layers):
            x, weights = layer(x)
            if idx == want:
                collected = weights
        rows = torch.arange(n_views)
        head_avg = collected[rows, :, mask_positions, :].mean(dim=1)  # (n_views, L)
        region_part = head_avg[:, n_text:]
        record = region_part / region_part.sum(dim=1, keepdim=True)

        hidden = x[rows, mask_positions]
        logits = self.vocab_head(hidden)
        return logits, AttentionRecord(scores=record, layer_index=want)

    def forward_fusion(self, views, filtered, proposal_features):
        """Convenience wrapper taking MaskedView objects and a prefilter result."""
        if not views:
            raise ConfigError("forward_fusion needs at least one masked view")
        token_ids = torch.tensor([v.token_ids for v in views], dtype=torch.long)
        mask_positions = torch.tensor([v.mask_position for v in views], dtype=torch.long)
        regions = proposal_features[list(filtered.union)]
        return self.forward_tokens(token_ids, mask_positions, regions)


def mlm_loss(mask_logits, target_ids):
    """Mean cross-entropy of the mask-position logits against the hidden words."""
    targets = torch.as_tensor(target_ids, dtype=torch.long)
    return F.cross_entropy(mask_logits, targets)


def divergence_loss(record, filtered, alpha, exponent=1):
    """Hinge on the averaged exclusive-proposal attention margin between concepts.

    For every ordered concept pair (i, j) the margin accumulates
    sum_k (A[i,k] - A[j,k]) over concept i's own block of region positions;
    the loss is max(0, alpha - margin / n_concepts**exponent). Identical rows
    give exactly alpha; a single concept gives alpha with zero gradient.
    """
    scores = record.scores if isinstance(record, AttentionRecord) else record
    n_c = scores.shape[0]
    if n_c != filtered.n_concepts:
        raise ConfigError("attention rows and filtered concepts disagree")
    margin = scores.sum() * 0.0
    for i, (start, stop) in enumerate(filtered.blocks):
        block = scores[:, start:stop]  # (n_c, k_i)
        margin = margin + (block[i] * n_c - block.sum(dim=0)).sum()
    margin = margin / (n_c ** exponent)
    return torch.clamp(torch.as_tensor(alpha, dtype=scores.dtype) - margin, min=0.0)


def dmlm_loss(record, filtered, mask_logits, target_ids, alpha, exponent=1):
    """Divergence hinge plus the masked-concept prediction loss."""
    return divergence_loss(record, filtered, alpha, exponent) + mlm_loss(mask_logits, target_ids)


def predict_masked_and_flag_noise(mask_logits, target_ids):
    """Argmax word prediction per view and the mismatch flag used for noise removal.

    Ties resolve to the lower word id. A flagged (mismatched) concept is
    treated as absent from the image.
    """
    logits = mask_logits.detach().cpu().numpy()
    preds = np.argmax(logits, axis=1)  # first occurrence on ties
    targets = np.asarray(target_ids)
    flags = preds != targets
    return preds, flags
