"""Training objectives: weighted contrastive pre-ranking, fine-grained
match ranking with mined hard negatives, two-way distillation, and masked
language modeling with the shared-forward training shortcut.

Candidate sets for the contrastive scores are ``batch (n x k gathered) +
occupied queue slots``. Queue candidates enter the softmax denominator
scaled by their reliability weights, implemented as ``log w`` offsets on
the queue logits; batch candidates carry implicit weight 1, so the loss
reduces to plain InfoNCE when every weight is 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor
import torch.nn.functional as F

from .bank import FeatureQueue, MomentumBank
from .config import ModelConfig, TrainConfig
from .model import CLS_ID, MATCH_CLASS, MISMATCH_CLASS, PAD_ID, MASK_ID, VLModel

IGNORE_INDEX = -100


@dataclass
class SimilarityMatrix:
    """Raw cosine similarities and softmax-normalized candidate scores."""

    raw: Tensor  # [n, C] cosine similarities
    logits: Tensor  # [n, C] = raw / tau + log-weight offsets
    scores: Tensor  # [n, C] softmax rows
    batch_candidates: int
    queue_candidates: int

    @property
    def candidate_count(self) -> int:
        return self.batch_candidates + self.queue_candidates

    def log_scores(self) -> Tensor:
        return F.log_softmax(self.logits, dim=-1)


@dataclass
class LossBundle:
    gcpr: Tensor
    fgr: Tensor
    fgd: Tensor
    mlm: Tensor

    @property
    def total(self) -> Tensor:
        return self.gcpr + self.fgd + self.fgr + self.mlm

    def as_floats(self) -> dict[str, float]:
        return {
            "gcpr": float(self.gcpr.detach()),
            "fgr": float(self.fgr.detach()),
            "fgd": float(self.fgd.detach()),
            "mlm": float(self.mlm.detach()),
            "total": float(self.total.detach()),
        }


def _check_unit_norm(embs: Tensor, name: str) -> None:
    norms = embs.detach().norm(dim=-1)
    if not torch.allclose(norms, torch.ones_like(norms), atol=1e-3):
        raise ValueError(f"{name} must be L2-normalized")


def similarity_scores(
    local_embs: Tensor,
    gathered_embs: Tensor,
    queue: FeatureQueue | tuple[Tensor, Tensor] | None,
    tau: Tensor | float,
) -> SimilarityMatrix:
    """Softmax-normalized similarity of each local row against batch+queue.

    Gradients flow into ``local_embs`` and ``gathered_embs``; queue
    features never carry gradient.
    """
    tau_val = float(tau) if not torch.is_tensor(tau) else float(tau.detach())
    if tau_val <= 0:
        raise ValueError(f"temperature must be positive, got {tau_val}")
    _check_unit_norm(local_embs, "local embeddings")
    _check_unit_norm(gathered_embs, "gathered embeddings")

    if queue is None:
        q_feats = local_embs.new_zeros((0, local_embs.shape[1]))
        q_weights = local_embs.new_zeros((0,))
    elif isinstance(queue, FeatureQueue):
        q_feats, q_weights = queue.snapshot()
    else:
        q_feats, q_weights = queue
    q_feats = q_feats.detach().to(local_embs.dtype)
    q_weights = q_weights.detach().to(local_embs.dtype)

    candidates = torch.cat([gathered_embs, q_feats], dim=0)
    raw = local_embs @ candidates.T  # cosine: inputs are unit-norm
    logits = raw / tau
    if q_feats.shape[0] > 0:
        offsets = torch.cat(
            [raw.new_zeros(gathered_embs.shape[0]), q_weights.log()], dim=0
        )
        logits = logits + offsets
    return SimilarityMatrix(
        raw=raw,
        logits=logits,
        scores=logits.softmax(dim=-1),
        batch_candidates=gathered_embs.shape[0],
        queue_candidates=q_feats.shape[0],
    )


def contrastive_targets(n_local: int, offset: int, candidate_count: int,
                        dtype=torch.float32) -> Tensor:
    """One-hot rows with the positive at the gathered (global) diagonal."""
    targets = torch.zeros(n_local, candidate_count, dtype=dtype)
    targets[torch.arange(n_local), offset + torch.arange(n_local)] = 1.0
    return targets


def _check_target_rows(targets: Tensor) -> None:
    sums = targets.detach().sum(dim=-1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=1e-4):
        raise ValueError("target rows must each sum to 1")


def weighted_cross_entropy(sim: SimilarityMatrix, targets: Tensor) -> Tensor:
    """Mean over rows of -sum(target * log score); targets carry no gradient."""
    _check_target_rows(targets)
    return -(targets.detach() * sim.log_scores()).sum(dim=-1).mean()


def gcpr_loss(
    sim_i2t: SimilarityMatrix,
    sim_t2i: SimilarityMatrix,
    targets_i2t: Tensor,
    targets_t2i: Tensor,
) -> Tensor:
    """Symmetric weighted cross-entropy over both retrieval directions."""
    return 0.5 * (
        weighted_cross_entropy(sim_i2t, targets_i2t)
        + weighted_cross_entropy(sim_t2i, targets_t2i)
    )


def tgd_pseudo_targets(teacher_scores: Tensor, one_hot: Tensor, alpha: float) -> Tensor:
    """Soft targets: mixture of teacher similarity scores and ground truth."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if teacher_scores.shape != one_hot.shape:
        raise ValueError("teacher scores and one-hot labels must share a shape")
    _check_target_rows(teacher_scores)
    _check_target_rows(one_hot)
    return alpha * teacher_scores.detach() + (1.0 - alpha) * one_hot


def mine_hard_negatives(scores: Tensor) -> tuple[Tensor, Tensor]:
    """Highest-scoring non-diagonal candidate per row and per column.

    ``scores[i, j]`` ranks text j against image i. Returns, per image, the
    index of its hardest negative text, and per text the index of its
    hardest negative image. Ties break toward the lowest index.
    """
    n = scores.shape[0]
    if scores.shape != (n, n):
        raise ValueError("expected a square in-batch score matrix")
    if n < 2:
        raise ValueError("hard-negative mining needs a batch of at least 2")
    masked = scores.detach().clone()
    diag = torch.arange(n)
    masked[diag, diag] = float("-inf")
    neg_text_idx = masked.argmax(dim=1)
    neg_image_idx = masked.argmax(dim=0)
    return neg_text_idx, neg_image_idx


def fgr_loss(image_side_logits: Tensor, text_side_logits: Tensor, labels: Tensor) -> Tensor:
    """Match/mismatch cross-entropy averaged over the two cross encoders."""
    if image_side_logits.shape[0] == 0:
        raise ValueError("fine-grained ranking needs a non-empty pair batch")
    return 0.5 * (
        F.cross_entropy(image_side_logits, labels)
        + F.cross_entropy(text_side_logits, labels)
    )


def match_labels(is_match: Tensor) -> Tensor:
    """Map a boolean match flag onto head class indices."""
    return torch.where(
        is_match,
        torch.full_like(is_match, MATCH_CLASS, dtype=torch.long),
        torch.full_like(is_match, MISMATCH_CLASS, dtype=torch.long),
    )


def fgd_distributions(
    student_feats: Tensor,
    teacher_feats: Tensor,
    mu: Tensor,
    tau_s: float,
    tau_t: float,
) -> tuple[Tensor, Tensor]:
    """Student and (centered, sharpened) teacher distributions over dims."""
    if tau_s <= 0 or tau_t <= 0:
        raise ValueError("tau_s and tau_t must be positive")
    p_s = F.log_softmax(student_feats / tau_s, dim=-1)
    with torch.no_grad():
        p_t = F.softmax((teacher_feats - mu) / tau_t, dim=-1)
    return p_s, p_t


def fgd_loss(
    student_feats: Tensor,
    teacher_feats: Tensor,
    mu: Tensor,
    tau_s: float,
    tau_t: float,
) -> Tensor:
    """Cross-entropy of the student distribution against the teacher target."""
    log_p_s, p_t = fgd_distributions(student_feats, teacher_feats, mu, tau_s, tau_t)
    return -(p_t * log_p_s).sum(dim=-1).mean()


def fgd_target_entropy(teacher_feats: Tensor, mu: Tensor, tau_t: float) -> float:
    with torch.no_grad():
        p_t = F.softmax((teacher_feats - mu) / tau_t, dim=-1)
        ent = -(p_t * p_t.clamp_min(1e-30).log()).sum(dim=-1).mean()
    return float(ent)


def maskable_positions(token_ids: Tensor, attention_mask: Tensor) -> Tensor:
    """Positions eligible for masking: real, non-special tokens."""
    special = (token_ids == CLS_ID) | (token_ids == PAD_ID) | (token_ids == MASK_ID)
    return attention_mask & ~special


def mask_tokens(
    token_ids: Tensor,
    attention_mask: Tensor,
    mask_ratio: float,
    generator: torch.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Replace a fixed fraction of eligible tokens with [MASK].

    Every selected token becomes [MASK]; at least one position is masked
    per sequence. Returns masked ids and MLM labels (original ids at masked
    positions, IGNORE_INDEX elsewhere).
    """
    eligible = maskable_positions(token_ids, attention_mask)
    masked_ids = token_ids.clone()
    labels = torch.full_like(token_ids, IGNORE_INDEX)
    for row in range(token_ids.shape[0]):
        positions = eligible[row].nonzero(as_tuple=True)[0]
        if positions.numel() == 0:
            raise ValueError(f"sequence {row} has no maskable tokens")
        count = max(1, int(positions.numel() * mask_ratio))
        perm = torch.randperm(positions.numel(), generator=generator)[:count]
        chosen = positions[perm]
        labels[row, chosen] = token_ids[row, chosen]
        masked_ids[row, chosen] = MASK_ID
    return masked_ids, labels


def sample_patch_keep(
    batch: int,
    num_patches: int,
    mask_ratio: float,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Boolean keep-mask over patches; masked patch embeddings get zeroed."""
    keep = torch.ones(batch, num_patches, dtype=torch.bool)
    count = int(num_patches * mask_ratio)
    if count == 0:
        return keep
    for row in range(batch):
        drop = torch.randperm(num_patches, generator=generator)[:count]
        keep[row, drop] = False
    return keep


def mlm_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Cross-entropy over masked positions only."""
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), labels.reshape(-1),
        ignore_index=IGNORE_INDEX,
    )


@dataclass
class StepPlan:
    """Pre-sampled randomness for one training step.

    Negative indices are normally mined from the live similarities during
    the forward pass; pinning them here makes the total loss a pure
    function of the parameters (used by finite-difference checks).
    """

    masked_ids: Tensor
    mlm_labels: Tensor
    patch_keep: Tensor
    neg_text_idx: Tensor | None = None
    neg_image_idx: Tensor | None = None


def make_step_plan(
    token_ids: Tensor,
    attention_mask: Tensor,
    cfg: ModelConfig,
    generator: torch.Generator | None = None,
) -> StepPlan:
    masked_ids, labels = mask_tokens(token_ids, attention_mask, cfg.mask_ratio, generator)
    patch_keep = sample_patch_keep(
        token_ids.shape[0], cfg.num_patches, cfg.image_mask_ratio, generator
    )
    return StepPlan(masked_ids=masked_ids, mlm_labels=labels, patch_keep=patch_keep)


def fgr_mlm_step(
    model: VLModel,
    image_hidden: Tensor,
    fgr_text_hidden: Tensor,
    masked_text_hidden: Tensor | None,
    attention_mask: Tensor,
    mlm_labels: Tensor | None,
    neg_text_idx: Tensor,
    neg_image_idx: Tensor,
    use_et: bool,
    use_mlm: bool,
) -> tuple[Tensor, Tensor]:
    """Match-ranking and MLM losses over positives plus mined negatives.

    With the shared-forward shortcut on, the positives-and-negatives batch
    goes through the text-primary cross encoder exactly once, on masked
    text, and that single pass feeds both the matching head and the MLM
    head. Without it, matching runs on ``fgr_text_hidden`` and MLM gets a
    separate masked pass, so the encoder sees two calls per step.
    """
    n = image_hidden.shape[0]
    if use_et and not use_mlm:
        raise ValueError("the shared-forward shortcut requires MLM to be active")
    arange = torch.arange(n)
    img_order = torch.cat([arange, arange, neg_image_idx])
    txt_order = torch.cat([arange, neg_text_idx, arange])
    labels = torch.cat([
        torch.full((n,), MATCH_CLASS, dtype=torch.long),
        torch.full((2 * n,), MISMATCH_CLASS, dtype=torch.long),
    ])
    zero = image_hidden.new_zeros(())

    if use_et:
        assert masked_text_hidden is not None and mlm_labels is not None
        fused_t = model.fuse_text_primary(
            masked_text_hidden[txt_order], image_hidden[img_order], attention_mask[txt_order]
        )
        fused_i = model.fuse_image_primary(
            image_hidden[img_order], masked_text_hidden[txt_order], attention_mask[txt_order]
        )
        fgr = fgr_loss(model.match_logits(fused_i.cls), model.match_logits(fused_t.cls), labels)
        mlm = mlm_loss(model.mlm_logits(fused_t.sequence[:n]), mlm_labels)
        return fgr, mlm

    fused_t = model.fuse_text_primary(
        fgr_text_hidden[txt_order], image_hidden[img_order], attention_mask[txt_order]
    )
    fused_i = model.fuse_image_primary(
        image_hidden[img_order], fgr_text_hidden[txt_order], attention_mask[txt_order]
    )
    fgr = fgr_loss(model.match_logits(fused_i.cls), model.match_logits(fused_t.cls), labels)
    mlm = zero
    if use_mlm:
        assert masked_text_hidden is not None and mlm_labels is not None
        fused_mlm = model.fuse_text_primary(masked_text_hidden, image_hidden, attention_mask)
        mlm = mlm_loss(model.mlm_logits(fused_mlm.sequence), mlm_labels)
    return fgr, mlm


@dataclass
class StepOutputs:
    losses: LossBundle
    fgd_entropy: float
    candidate_count: int
    neg_text_idx: Tensor | None
    neg_image_idx: Tensor | None
    teacher_image_pooled: Tensor | None = None
    teacher_text_pooled: Tensor | None = None


def compute_losses(
    model: VLModel,
    bank: MomentumBank,
    pixels: Tensor,
    token_ids: Tensor,
    attention_mask: Tensor,
    plan: StepPlan,
    train_cfg: TrainConfig,
    tgd_alpha: float | None = None,
) -> StepOutputs:
    """One full objective evaluation over a batch of aligned pairs.

    The gathered candidate set is the whole global batch: summing each
    simulated shard's row-mean loss and dividing by the shard count equals
    the global row mean, so the value is computed once, shard-free, and the
    per-shard formulation is exercised by :func:`gcpr_sharded`.
    """
    cfg = model.cfg
    n = pixels.shape[0]
    flags = train_cfg
    tau = model.clamped_tau()
    zero = pixels.new_zeros(())

    text = model.encode_text(token_ids, attention_mask)
    image = model.encode_image(pixels)

    et_active = flags.use_et and flags.use_mlm and flags.use_cross_encoders
    need_masked_text = flags.use_fgd or (flags.use_cross_encoders and flags.use_mlm)
    masked_text = model.encode_text(plan.masked_ids, attention_mask) if need_masked_text else None

    t_text = t_image = None
    if flags.use_gcpr or flags.use_fgd:
        with torch.no_grad():
            t_text = bank.teacher.encode_text(token_ids, attention_mask)
            t_image = bank.teacher.encode_image(pixels)

    gcpr = zero
    candidate_count = n
    if flags.use_gcpr:
        sim_i2t = similarity_scores(image.pooled, text.pooled, bank.text_queue, tau)
        sim_t2i = similarity_scores(text.pooled, image.pooled, bank.image_queue, tau)
        candidate_count = sim_i2t.candidate_count
        one_hot = contrastive_targets(n, 0, candidate_count, dtype=pixels.dtype)
        alpha = cfg.tgd_alpha if tgd_alpha is None else tgd_alpha
        if flags.use_tgd and alpha > 0:
            with torch.no_grad():
                t_sim_i2t = similarity_scores(t_image.pooled, t_text.pooled, bank.text_queue, tau)
                t_sim_t2i = similarity_scores(t_text.pooled, t_image.pooled, bank.image_queue, tau)
            targets_i2t = tgd_pseudo_targets(t_sim_i2t.scores, one_hot, alpha)
            targets_t2i = tgd_pseudo_targets(t_sim_t2i.scores, one_hot, alpha)
        else:
            targets_i2t = targets_t2i = one_hot
        gcpr = gcpr_loss(sim_i2t, sim_t2i, targets_i2t, targets_t2i)

    fgr = zero
    mlm = zero
    neg_text_idx = plan.neg_text_idx
    neg_image_idx = plan.neg_image_idx
    if flags.use_cross_encoders:
        if neg_text_idx is None or neg_image_idx is None:
            with torch.no_grad():
                in_batch = image.pooled @ text.pooled.T
            neg_text_idx, neg_image_idx = mine_hard_negatives(in_batch)
        fgr, mlm = fgr_mlm_step(
            model,
            image.hidden,
            text.hidden,
            masked_text.hidden if masked_text is not None else None,
            attention_mask,
            plan.mlm_labels,
            neg_text_idx,
            neg_image_idx,
            use_et=et_active,
            use_mlm=flags.use_mlm,
        )

    fgd = zero
    fgd_entropy = float("nan")
    if flags.use_fgd:
        assert masked_text is not None
        masked_image = model.encode_image(pixels, plan.patch_keep)
        mu_i = bank.image_center.mu if flags.use_centering else torch.zeros_like(bank.image_center.mu)
        mu_t = bank.text_center.mu if flags.use_centering else torch.zeros_like(bank.text_center.mu)
        fgd = 0.5 * (
            fgd_loss(masked_image.pooled, t_image.pooled, mu_i.to(pixels.dtype), cfg.tau_s, cfg.tau_t)
            + fgd_loss(masked_text.pooled, t_text.pooled, mu_t.to(pixels.dtype), cfg.tau_s, cfg.tau_t)
        )
        fgd_entropy = 0.5 * (
            fgd_target_entropy(t_image.pooled, mu_i.to(pixels.dtype), cfg.tau_t)
            + fgd_target_entropy(t_text.pooled, mu_t.to(pixels.dtype), cfg.tau_t)
        )

    return StepOutputs(
        losses=LossBundle(gcpr=gcpr, fgr=fgr, fgd=fgd, mlm=mlm),
        fgd_entropy=fgd_entropy,
        candidate_count=candidate_count,
        neg_text_idx=neg_text_idx,
        neg_image_idx=neg_image_idx,
        teacher_image_pooled=t_image.pooled if t_image is not None else None,
        teacher_text_pooled=t_text.pooled if t_text is not None else None,
    )


def gcpr_sharded(
    model: VLModel,
    pixels: Tensor,
    token_ids: Tensor,
    attention_mask: Tensor,
    shards: int,
    text_queue: FeatureQueue | tuple[Tensor, Tensor] | None = None,
    image_queue: FeatureQueue | tuple[Tensor, Tensor] | None = None,
) -> Tensor:
    """Contrastive loss computed the way k devices would compute it.

    Each shard encodes only its slice; candidate embeddings are gathered
    from every shard so gradients flow across shard boundaries; the total
    is the mean of per-shard losses (the all-reduce average).
    """
    n_total = pixels.shape[0]
    if n_total % shards != 0:
        raise ValueError("global batch must divide evenly across shards")
    n = n_total // shards
    tau = model.clamped_tau()

    image_parts, text_parts = [], []
    for r in range(shards):
        sl = slice(r * n, (r + 1) * n)
        image_parts.append(model.encode_image(pixels[sl]).pooled)
        text_parts.append(model.encode_text(token_ids[sl], attention_mask[sl]).pooled)
    gathered_image = torch.cat(image_parts, dim=0)
    gathered_text = torch.cat(text_parts, dim=0)

    shard_losses = []
    for r in range(shards):
        sim_i2t = similarity_scores(image_parts[r], gathered_text, text_queue, tau)
        sim_t2i = similarity_scores(text_parts[r], gathered_image, image_queue, tau)
        one_hot = contrastive_targets(n, r * n, sim_i2t.candidate_count, dtype=pixels.dtype)
        shard_losses.append(gcpr_loss(sim_i2t, sim_t2i, one_hot, one_hot))
    return torch.stack(shard_losses).mean()
