"""Pre-training and fine-tuning drivers.

The loop is deliberately single-process: device sharding is simulated, and
every per-shard row-mean of each loss averages back to the global row-mean
computed here (the faithful per-shard formulation with cross-shard
gradient flow lives in :func:`minivlp.objectives.gcpr_sharded` and is
exercised by the equivalence tests). Each step runs: sample text fields ->
teacher forward -> full objective -> optimizer step -> EMA update ->
enqueue -> center update, with one structured metric record per step.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bank import MomentumBank
from .config import ModelConfig, TrainConfig, config_to_dict
from .data import PairDataset, apply_filters, collate_batch
from .model import VLModel
from .objectives import (
    LossBundle,
    StepOutputs,
    compute_losses,
    fgr_loss,
    make_step_plan,
    match_labels,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


class TrainingAborted(RuntimeError):
    """Raised when a non-finite loss aborts training."""

    def __init__(self, message: str, checkpoint_path: Path | None = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


def lr_at_step(step: int, total_steps: int, peak: float, warmup_fraction: float) -> float:
    """Linear warmup from zero to peak, then cosine decay toward zero."""
    warmup = int(round(warmup_fraction * total_steps))
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    span = max(1, total_steps - warmup)
    progress = (step - warmup) / span
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def build_optimizer(model: VLModel, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for p in model.trainable_parameters():
        (decay if p.ndim >= 2 else no_decay).append(p)
    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
    )


@dataclass
class TrainResult:
    model: VLModel
    bank: MomentumBank
    metrics: list[dict] = field(default_factory=list)
    checkpoint_path: Path | None = None


class Trainer:
    """Owns the model, bank, optimizer, and the two seeded RNG streams."""

    def __init__(
        self,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        dataset: PairDataset,
        matching_mode: bool = False,
        model: VLModel | None = None,
        bank: MomentumBank | None = None,
    ):
        model_cfg.validate()
        train_cfg.validate()
        self.model_cfg = model_cfg
        self.train_cfg = train_cfg
        self.matching_mode = matching_mode
        self.dataset = dataset
        self.train_records = [
            r for r in dataset.split("train").records if apply_filters(r).keep
        ]
        if len(self.train_records) < train_cfg.batch_size:
            raise ValueError("training split smaller than one batch")

        if model is None:
            torch.manual_seed(train_cfg.seed)
            model = VLModel(model_cfg)
        self.model = model
        self.bank = bank if bank is not None else MomentumBank(model)
        self.optimizer = build_optimizer(model, train_cfg)
        self.torch_gen = torch.Generator().manual_seed(train_cfg.seed + 1)
        self.np_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 2]))

        self.steps_per_epoch = len(self.train_records) // train_cfg.batch_size
        if self.steps_per_epoch == 0:
            raise ValueError("not enough records for a single batch")
        self.total_steps = self.steps_per_epoch * train_cfg.epochs
        self.global_step = 0
        self.epoch = 0
        self.pos = 0  # record cursor inside the current epoch
        self.epoch_order: np.ndarray = np.empty(0, dtype=np.int64)
        self.epoch_fields: list[str] = []
        self.metrics: list[dict] = []
        self._start_epoch()

    # -- epoch & batch plumbing ------------------------------------------

    def _start_epoch(self) -> None:
        n = len(self.train_records)
        self.epoch_order = self.np_rng.permutation(n)
        self.epoch_fields = []
        for idx in self.epoch_order:
            rec = self.train_records[int(idx)]
            valid = apply_filters(rec).valid_fields
            self.epoch_fields.append(valid[int(self.np_rng.integers(len(valid)))])
        self.pos = 0

    def _next_batch(self):
        bs = self.train_cfg.batch_size
        take = self.epoch_order[self.pos : self.pos + bs]
        fields = self.epoch_fields[self.pos : self.pos + bs]
        records = [self.train_records[int(i)] for i in take]
        self.pos += bs
        return records, fields

    # -- one optimization step -------------------------------------------

    def _loss_step(self, records, fields) -> StepOutputs:
        pixels, ids, mask = collate_batch(records, fields, self.model_cfg.max_text_len)
        if self.matching_mode:
            text = self.model.encode_text(ids, mask)
            image = self.model.encode_image(pixels)
            fused_t = self.model.fuse_text_primary(text.hidden, image.hidden, mask)
            fused_i = self.model.fuse_image_primary(image.hidden, text.hidden, mask)
            labels = match_labels(torch.tensor([r.is_match for r in records]))
            loss = fgr_loss(
                self.model.match_logits(fused_i.cls),
                self.model.match_logits(fused_t.cls),
                labels,
            )
            zero = pixels.new_zeros(())
            return StepOutputs(
                losses=LossBundle(gcpr=zero, fgr=loss, fgd=zero, mlm=zero),
                fgd_entropy=float("nan"),
                candidate_count=len(records),
                neg_text_idx=None,
                neg_image_idx=None,
            )
        plan = make_step_plan(ids, mask, self.model_cfg, self.torch_gen)
        return compute_losses(
            self.model, self.bank, pixels, ids, mask, plan, self.train_cfg,
            tgd_alpha=self._tgd_alpha(),
        )

    def _tgd_alpha(self) -> float:
        ramp = self.train_cfg.tgd_ramp_epochs * self.steps_per_epoch
        if ramp <= 0:
            return self.model_cfg.tgd_alpha
        return self.model_cfg.tgd_alpha * min(1.0, self.global_step / ramp)

    def step(self, out_dir: Path | None = None) -> dict:
        records, fields = self._next_batch()
        lr = lr_at_step(
            self.global_step, self.total_steps, self.train_cfg.learning_rate,
            self.train_cfg.warmup_fraction,
        )
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        out = self._loss_step(records, fields)
        total = out.losses.total
        if not torch.isfinite(total):
            path = None
            if out_dir is not None:
                path = Path(out_dir) / "last_good.pt"
                self.save_checkpoint(path)
            raise TrainingAborted(
                f"non-finite loss at step {self.global_step}: {out.losses.as_floats()}",
                checkpoint_path=path,
            )

        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        torch.nn.utils.clip_grad_norm_(self.model.trainable_parameters(), self.train_cfg.grad_clip)
        self.optimizer.step()
        with torch.no_grad():
            self.model.tau.clamp_(min=self.model_cfg.tau_min)

        self.bank.step_update(self.model)
        if out.teacher_image_pooled is not None:
            self.bank.image_queue.enqueue(out.teacher_image_pooled)
            self.bank.text_queue.enqueue(out.teacher_text_pooled)
            self.bank.image_center.update(out.teacher_image_pooled, self.bank.center_momentum)
            self.bank.text_center.update(out.teacher_text_pooled, self.bank.center_momentum)

        record = {
            "step": self.global_step,
            "epoch": self.epoch,
            **out.losses.as_floats(),
            "lr": lr,
            "tau": float(self.model.tau.detach()),
            "queue_fill": self.bank.image_queue.fill_count,
            "fgd_entropy": out.fgd_entropy,
        }
        self.metrics.append(record)
        self.global_step += 1
        if self.pos + self.train_cfg.batch_size > len(self.epoch_order):
            self.epoch += 1
            self._start_epoch()
        return record

    def run(self, out_dir: str | Path | None = None) -> TrainResult:
        out_path = Path(out_dir) if out_dir is not None else None
        metrics_fh = None
        if out_path is not None:
            out_path.mkdir(parents=True, exist_ok=True)
            metrics_fh = open(out_path / "metrics.jsonl", "a")
        try:
            while self.global_step < self.total_steps:
                record = self.step(out_path)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(record) + "\n")
                if record["step"] % max(1, self.train_cfg.log_every * 50) == 0:
                    logger.info(
                        "step %d/%d loss %.4f lr %.2e",
                        record["step"], self.total_steps, record["total"], record["lr"],
                    )
        finally:
            if metrics_fh is not None:
                metrics_fh.close()
        ckpt_path = None
        if out_path is not None:
            ckpt_path = out_path / "checkpoint.pt"
            self.save_checkpoint(ckpt_path)
        return TrainResult(self.model, self.bank, self.metrics, ckpt_path)

    # -- checkpointing -----------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "model_cfg": config_to_dict(self.model_cfg),
            "train_cfg": config_to_dict(self.train_cfg),
            "matching_mode": self.matching_mode,
            "model": self.model.state_dict(),
            "bank": self.bank.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "torch_gen": self.torch_gen.get_state(),
            "np_rng": self.np_rng.bit_generator.state,
            "global_step": self.global_step,
            "epoch": self.epoch,
            "pos": self.pos,
            "epoch_order": self.epoch_order.copy(),
            "epoch_fields": list(self.epoch_fields),
            "total_steps": self.total_steps,
        }
        torch.save(payload, path)
        return path

    @classmethod
    def from_checkpoint(
        cls,
        path: str | Path,
        dataset: PairDataset,
        train_cfg: TrainConfig | None = None,
        matching_mode: bool | None = None,
    ) -> "Trainer":
        """Rebuild a trainer mid-run, or start a fine-tune from saved weights.

        With ``train_cfg`` omitted the run resumes bit-exactly (optimizer
        moments, RNG streams, and epoch cursor restored). Passing a new
        ``train_cfg`` starts a fresh schedule from the stored weights.
        """
        payload = torch.load(path, weights_only=False)
        if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {payload['format_version']}")
        model_cfg = ModelConfig(**payload["model_cfg"])
        resume = train_cfg is None
        cfg = TrainConfig(**payload["train_cfg"]) if resume else train_cfg
        mode = payload["matching_mode"] if matching_mode is None else matching_mode

        torch.manual_seed(cfg.seed)
        model = VLModel(model_cfg)
        model.load_state_dict(payload["model"])
        trainer = cls(model_cfg, cfg, dataset, matching_mode=mode, model=model)
        trainer.bank.load_state_dict(payload["bank"])
        if resume:
            trainer.optimizer.load_state_dict(payload["optimizer"])
            trainer.torch_gen.set_state(payload["torch_gen"])
            trainer.np_rng.bit_generator.state = payload["np_rng"]
            trainer.global_step = payload["global_step"]
            trainer.epoch = payload["epoch"]
            trainer.pos = payload["pos"]
            trainer.epoch_order = payload["epoch_order"].copy()
            trainer.epoch_fields = list(payload["epoch_fields"])
            trainer.total_steps = payload["total_steps"]
        return trainer


def load_model_from_checkpoint(path: str | Path) -> tuple[VLModel, MomentumBank, dict]:
    """Model + bank snapshot for evaluation; no optimizer or RNG state."""
    payload = torch.load(path, weights_only=False)
    model_cfg = ModelConfig(**payload["model_cfg"])
    model = VLModel(model_cfg)
    model.load_state_dict(payload["model"])
    model.eval()
    bank = MomentumBank(model)
    bank.load_state_dict(payload["bank"])
    return model, bank, payload


def pretrain(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: PairDataset,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Full pre-training run over the dataset's train split."""
    return Trainer(model_cfg, train_cfg, dataset).run(out_dir)


def finetune_retrieval(
    checkpoint: str | Path,
    dataset: PairDataset,
    train_cfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Contrastive + match-ranking fine-tuning (no MLM, no feature distillation)."""
    import dataclasses

    cfg = dataclasses.replace(train_cfg, use_mlm=False, use_fgd=False)
    trainer = Trainer.from_checkpoint(checkpoint, dataset, train_cfg=cfg, matching_mode=False)
    return trainer.run(out_dir)


def finetune_matching(
    checkpoint: str | Path,
    dataset: PairDataset,
    train_cfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Match-ranking-only fine-tuning on labeled pairs (labels given, no mining)."""
    import dataclasses

    cfg = dataclasses.replace(
        train_cfg, use_gcpr=False, use_mlm=False, use_fgd=False, use_tgd=False
    )
    trainer = Trainer.from_checkpoint(checkpoint, dataset, train_cfg=cfg, matching_mode=True)
    return trainer.run(out_dir)
