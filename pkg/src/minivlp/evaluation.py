"""Evaluation harness: two-stage retrieval, matching AUC, zero-shot
classification, and entity-conditioned attention maps.

Everything here is read-only over model snapshots: no call mutates
parameters, the teacher, or the queues.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .data import PairDataset, RawRecord, collate_batch, core_tokens
from .model import VLModel

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# first stage: exact dual-stream ranking
# --------------------------------------------------------------------------


def dual_retrieve(query_embs: Tensor, candidate_embs: Tensor) -> Tensor:
    """Rank candidates per query by cosine similarity, descending.

    Ties break toward the lower candidate index (stable sort).
    """
    if candidate_embs.shape[0] == 0:
        raise ValueError("candidate set must be non-empty")
    sims = query_embs @ candidate_embs.T
    return torch.argsort(sims, dim=-1, descending=True, stable=True)


# --------------------------------------------------------------------------
# second stage: cross-encoder rerank of the top K
# --------------------------------------------------------------------------


@torch.no_grad()
def pair_match_scores_each(
    model: VLModel, image_hidden: Tensor, text_hidden: Tensor, text_mask: Tensor
) -> tuple[Tensor, Tensor]:
    """Match probability per pair from each cross encoder separately."""
    fused_i = model.fuse_image_primary(image_hidden, text_hidden, text_mask)
    fused_t = model.fuse_text_primary(text_hidden, image_hidden, text_mask)
    return model.match_probability(fused_i.cls), model.match_probability(fused_t.cls)


def fuse_rerank_scores(image_side: Tensor, text_side: Tensor) -> Tensor:
    """Final rerank score: arithmetic mean of the two encoders' scores."""
    return 0.5 * (image_side + text_side)


@torch.no_grad()
def pair_match_scores(
    model: VLModel, image_hidden: Tensor, text_hidden: Tensor, text_mask: Tensor
) -> Tensor:
    """Match probability per pair, averaged over the two cross encoders."""
    a, b = pair_match_scores_each(model, image_hidden, text_hidden, text_mask)
    return fuse_rerank_scores(a, b)


def rerank_order(scores: Tensor) -> Tensor:
    """Descending stable order; ties keep the first-stage ranking."""
    return torch.argsort(scores, descending=True, stable=True)


def rerank_candidates(final_scores: Tensor, topk_ids: list[int]) -> list[int]:
    """Reorder a top-K id list by its final scores (stable on ties)."""
    if len(topk_ids) != final_scores.shape[0]:
        raise ValueError("one score per candidate required")
    return [topk_ids[int(i)] for i in rerank_order(final_scores)]


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def recall_at_k(
    ranked: list[list[int]], gold: list[set[int]], ks: tuple[int, ...] = (1, 5, 10)
) -> dict[int, float]:
    """Percent of queries with any gold id inside the top k."""
    if len(ranked) != len(gold):
        raise ValueError("ranked lists and gold sets must align")
    for g in gold:
        if not g:
            raise ValueError("every query needs at least one gold id")
    out = {}
    for k in ks:
        hits = sum(1 for r, g in zip(ranked, gold) if set(r[:k]) & g)
        out[k] = 100.0 * hits / len(ranked)
    return out


def mean_recall(recalls: list[float]) -> float:
    """Mean of the six directional recall percentages."""
    return float(np.mean(recalls))


@dataclass
class RetrievalResult:
    i2t: dict[int, float]
    t2i: dict[int, float]
    i2t_ranked: list[list[int]]
    t2i_ranked: list[list[int]]

    @property
    def mean(self) -> float:
        return mean_recall(list(self.i2t.values()) + list(self.t2i.values()))

    def as_dict(self) -> dict:
        return {
            "i2t": {f"R@{k}": v for k, v in self.i2t.items()},
            "t2i": {f"R@{k}": v for k, v in self.t2i.items()},
            "mean_recall": self.mean,
        }

    def summary(self) -> str:
        i2t = "  ".join(f"R@{k} {v:5.1f}" for k, v in self.i2t.items())
        t2i = "  ".join(f"R@{k} {v:5.1f}" for k, v in self.t2i.items())
        return f"i2t: {i2t} | t2i: {t2i} | R@M {self.mean:.1f}"


def auc(scores, labels) -> float:
    """Rank-based (Mann-Whitney) AUC; tied pairs contribute one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must align")
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        # ranks are 1-based; tied entries share the average rank
        ranks[order[i : j + 1]] = (i + 1 + j + 1) / 2.0
        i = j + 1
    pos_rank_sum = ranks[labels].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_brute_force(scores, labels) -> float:
    """O(P*N) concordance count; independent oracle for the rank kernel."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pos = scores[labels]
    neg = scores[~labels]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs both classes present")
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


# --------------------------------------------------------------------------
# dataset-level pipelines
# --------------------------------------------------------------------------


@dataclass
class EmbeddedSplit:
    image_pooled: Tensor
    text_pooled: Tensor
    image_hidden: Tensor
    text_hidden: Tensor
    text_mask: Tensor
    record_ids: list[int]


@torch.no_grad()
def embed_split(
    model: VLModel, dataset: PairDataset, field: str = "title", batch_size: int = 64
) -> EmbeddedSplit:
    img_p, txt_p, img_h, txt_h, masks = [], [], [], [], []
    records = dataset.records
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        pixels, ids, mask = collate_batch(chunk, [field] * len(chunk), model.cfg.max_text_len)
        # pad to the longest field in the whole split so chunks concatenate
        full = torch.full(
            (ids.shape[0], model.cfg.max_text_len), 0, dtype=ids.dtype
        )
        full[:, : ids.shape[1]] = ids
        fmask = torch.zeros(ids.shape[0], model.cfg.max_text_len, dtype=torch.bool)
        fmask[:, : mask.shape[1]] = mask
        text = model.encode_text(full, fmask)
        image = model.encode_image(pixels)
        img_p.append(image.pooled)
        txt_p.append(text.pooled)
        img_h.append(image.hidden)
        txt_h.append(text.hidden)
        masks.append(fmask)
    return EmbeddedSplit(
        image_pooled=torch.cat(img_p),
        text_pooled=torch.cat(txt_p),
        image_hidden=torch.cat(img_h),
        text_hidden=torch.cat(txt_h),
        text_mask=torch.cat(masks),
        record_ids=[r.record_id for r in records],
    )


@torch.no_grad()
def evaluate_retrieval(
    model: VLModel,
    dataset: PairDataset,
    field: str = "title",
    rerank_k: int | None = None,
    ks: tuple[int, ...] = (1, 5, 10),
) -> RetrievalResult:
    """Both retrieval directions over a split, with optional top-K rerank."""
    emb = embed_split(model, dataset, field)
    n = len(emb.record_ids)
    i2t_ranked = [row.tolist() for row in dual_retrieve(emb.image_pooled, emb.text_pooled)]
    t2i_ranked = [row.tolist() for row in dual_retrieve(emb.text_pooled, emb.image_pooled)]

    if rerank_k is not None:
        k = min(rerank_k, n)
        if k < rerank_k:
            logger.warning("rerank k=%d exceeds %d candidates; clipping", rerank_k, n)
        new_i2t = []
        for q, ranked in enumerate(i2t_ranked):
            top = ranked[:k]
            scores = pair_match_scores(
                model,
                emb.image_hidden[[q] * k],
                emb.text_hidden[top],
                emb.text_mask[top],
            )
            new_i2t.append(rerank_candidates(scores, top) + ranked[k:])
        i2t_ranked = new_i2t
        new_t2i = []
        for q, ranked in enumerate(t2i_ranked):
            top = ranked[:k]
            scores = pair_match_scores(
                model,
                emb.image_hidden[top],
                emb.text_hidden[[q] * k],
                emb.text_mask[[q] * k],
            )
            new_t2i.append(rerank_candidates(scores, top) + ranked[k:])
        t2i_ranked = new_t2i

    gold = [{i} for i in range(n)]
    return RetrievalResult(
        i2t=recall_at_k(i2t_ranked, gold, ks),
        t2i=recall_at_k(t2i_ranked, gold, ks),
        i2t_ranked=i2t_ranked,
        t2i_ranked=t2i_ranked,
    )


@torch.no_grad()
def matching_scores(
    model: VLModel, dataset: PairDataset, field: str = "title", batch_size: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """Match probabilities and boolean labels over a labeled split."""
    records = dataset.records
    scores, labels = [], []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        pixels, ids, mask = collate_batch(chunk, [field] * len(chunk), model.cfg.max_text_len)
        text = model.encode_text(ids, mask)
        image = model.encode_image(pixels)
        s = pair_match_scores(model, image.hidden, text.hidden, mask)
        scores.extend(s.tolist())
        labels.extend(r.is_match for r in chunk)
    return np.array(scores), np.array(labels, dtype=bool)


@torch.no_grad()
def evaluate_matching(model: VLModel, dataset: PairDataset, field: str = "title") -> float:
    scores, labels = matching_scores(model, dataset, field)
    return auc(scores, labels)


# --------------------------------------------------------------------------
# zero-shot classification
# --------------------------------------------------------------------------


@torch.no_grad()
def zero_shot_classify(
    model: VLModel,
    pixels: Tensor,
    label_token_lists: list[list[int]],
) -> int:
    """Nearest label text by dual-stream cosine; ties pick the lowest index."""
    if len(label_token_lists) < 1:
        raise ValueError("need at least one label text")
    from .data import tokens_with_cls

    length = min(model.cfg.max_text_len, 1 + max(len(t) for t in label_token_lists))
    rows = [tokens_with_cls(t, length) for t in label_token_lists]
    ids = torch.tensor([r[0] for r in rows], dtype=torch.long)
    mask = torch.tensor([r[1] for r in rows], dtype=torch.bool)
    text_emb = model.encode_text(ids, mask).pooled
    img_emb = model.encode_image(pixels[None]).pooled[0]
    sims = text_emb @ img_emb
    return int(torch.argmax(sims))


def label_text_for_record(record: RawRecord) -> list[int]:
    """Canonical class text for a record: its scene's attribute words."""
    return core_tokens(record.text_latent)


@torch.no_grad()
def zero_shot_accuracy(model: VLModel, dataset: PairDataset) -> float:
    """Treat every record's scene text as a class; classify each image."""
    labels = [label_text_for_record(r) for r in dataset.records]
    correct = 0
    for i, rec in enumerate(dataset.records):
        pred = zero_shot_classify(model, torch.from_numpy(rec.pixels), labels)
        correct += int(pred == i)
    return correct / len(dataset.records)


# --------------------------------------------------------------------------
# entity-conditioned attention maps
# --------------------------------------------------------------------------


@torch.no_grad()
def attention_map(
    model: VLModel,
    pixels: Tensor,
    token_ids: Tensor,
    attention_mask: Tensor,
    entity_ids: set[int],
) -> Tensor:
    """Cross-attention heat map from entity tokens onto the patch grid.

    Weights come from the configured layer of the text-primary cross
    encoder, averaged over heads and over the entity's token positions.
    """
    if token_ids.ndim != 1:
        raise ValueError("attention_map takes a single unbatched sequence")
    positions = [
        i for i, t in enumerate(token_ids.tolist())
        if t in entity_ids and bool(attention_mask[i])
    ]
    if not positions:
        raise ValueError("entity tokens not present in the text")
    text = model.encode_text(token_ids[None], attention_mask[None])
    image = model.encode_image(pixels[None])
    fused = model.fuse_text_primary(
        text.hidden, image.hidden, attention_mask[None], need_weights=True
    )
    weights = fused.cross_attn[model.attn_map_layer()][0]  # [heads, L_text, 1 + P]
    rows = weights[:, positions, :].mean(dim=(0, 1))  # [1 + P]
    patch_row = rows[1:]  # drop the image [CLS] column
    grid = model.cfg.image_resolution // model.cfg.image_patch_size
    return patch_row.reshape(grid, grid)


def map_argmax_quadrant(heat: Tensor) -> int:
    """Quadrant index (0 TL, 1 TR, 2 BL, 3 BR) of the hottest patch."""
    g = heat.shape[0]
    flat = int(torch.argmax(heat))
    row, col = divmod(flat, g)
    return (0 if row < g / 2 else 2) + (0 if col < g / 2 else 1)
