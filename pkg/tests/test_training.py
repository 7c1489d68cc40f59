import dataclasses
import math

import numpy as np
import pytest
import torch

from minivlp.config import ModelConfig, TrainConfig
from minivlp.data import PairDataset, generate_pairs
from minivlp.model import image_encoder_state_snapshot
from minivlp.training import (
    Trainer,
    TrainingAborted,
    finetune_matching,
    finetune_retrieval,
    load_model_from_checkpoint,
    lr_at_step,
    pretrain,
)

from conftest import tiny_model_cfg


def tiny_dataset(count=48, noise=0.0, seed=31):
    return PairDataset(generate_pairs(count, noise_rate=noise, seed=seed, resolution=16), 16)


def tiny_train_cfg(**overrides):
    base = dict(epochs=2, batch_size=8, seed=5, learning_rate=1e-3, log_every=1)
    base.update(overrides)
    return TrainConfig(**base)


# --------------------------------------------------------------------------
# learning-rate schedule
# --------------------------------------------------------------------------


def test_schedule_warmup_and_cosine_endpoints():
    total, peak, warm = 200, 1e-3, 0.05
    assert lr_at_step(0, total, peak, warm) == 0.0
    warm_steps = int(round(warm * total))
    assert lr_at_step(warm_steps, total, peak, warm) == peak
    assert lr_at_step(total - 1, total, peak, warm) < 0.01 * peak
    # cosine: monotone decreasing after warmup
    values = [lr_at_step(s, total, peak, warm) for s in range(warm_steps, total)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_schedule_no_warmup():
    assert lr_at_step(0, 100, 1e-3, 0.0) == 1e-3


# --------------------------------------------------------------------------
# pre-training behavior
# --------------------------------------------------------------------------


def test_short_run_decreases_loss():
    ds = tiny_dataset(64)
    cfg = tiny_model_cfg(image_resolution=16)
    result = pretrain(cfg, tiny_train_cfg(epochs=6), ds)
    first = result.metrics[0]["total"]
    last = np.mean([m["total"] for m in result.metrics[-6:]])
    assert last < first


def test_metric_stream_fields_and_queue_fill():
    ds = tiny_dataset()
    cfg = tiny_model_cfg(image_resolution=16, queue_capacity=32)
    result = pretrain(cfg, tiny_train_cfg(epochs=1), ds)
    rec = result.metrics[-1]
    for key in ("step", "epoch", "gcpr", "fgr", "fgd", "mlm", "total", "lr", "tau", "queue_fill"):
        assert key in rec
    assert rec["queue_fill"] == min(32, 8 * len(result.metrics))
    assert rec["tau"] >= cfg.tau_min


def test_seed_determinism_bitwise():
    ds = tiny_dataset()
    cfg = tiny_model_cfg(image_resolution=16)
    a = pretrain(cfg, tiny_train_cfg(), ds)
    b = pretrain(cfg, tiny_train_cfg(), ds)
    assert [m["total"] for m in a.metrics] == [m["total"] for m in b.metrics]
    for (ka, va), (kb, vb) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_shard_count_does_not_change_trajectory():
    ds = tiny_dataset()
    cfg = tiny_model_cfg(image_resolution=16)
    a = pretrain(cfg, tiny_train_cfg(shards=1), ds)
    b = pretrain(cfg, tiny_train_cfg(shards=4), ds)
    for ma, mb in zip(a.metrics, b.metrics):
        assert abs(ma["total"] - mb["total"]) <= 1e-5 * max(abs(ma["total"]), 1.0)


def test_checkpoint_roundtrip_one_step_bitwise(tmp_path):
    ds = tiny_dataset()
    cfg = tiny_model_cfg(image_resolution=16)
    train_cfg = tiny_train_cfg(epochs=2)

    trainer = Trainer(cfg, train_cfg, ds)
    for _ in range(3):
        trainer.step()
    ckpt = trainer.save_checkpoint(tmp_path / "mid.pt")
    trainer.step()
    expected = {k: v.clone() for k, v in trainer.model.state_dict().items()}

    resumed = Trainer.from_checkpoint(ckpt, ds)
    assert resumed.global_step == 3
    resumed.step()
    for k, v in resumed.model.state_dict().items():
        assert torch.equal(v, expected[k]), k
    # bank state resumes identically too
    for k, v in resumed.bank.state_dict()["teacher"].items():
        assert torch.equal(v, trainer.bank.state_dict()["teacher"][k])


def test_non_finite_loss_aborts_with_checkpoint(tmp_path):
    ds = tiny_dataset()
    cfg = tiny_model_cfg(image_resolution=16)
    trainer = Trainer(cfg, tiny_train_cfg(), ds)
    trainer.step()
    with torch.no_grad():
        trainer.model.text_proj.weight[0, 0] = float("nan")
    with pytest.raises(TrainingAborted) as err:
        trainer.step(tmp_path)
    assert err.value.checkpoint_path is not None
    assert err.value.checkpoint_path.exists()


def test_frozen_image_encoder_is_bitwise_unchanged():
    ds = tiny_dataset()
    cfg = tiny_model_cfg(image_resolution=16, freeze_image_encoder=True)
    trainer = Trainer(cfg, tiny_train_cfg(epochs=1), ds)
    before = image_encoder_state_snapshot(trainer.model)
    trainer.run()
    after = image_encoder_state_snapshot(trainer.model)
    for k in before:
        assert torch.equal(before[k], after[k]), k


def test_training_rejects_undivisible_shards():
    with pytest.raises(ValueError, match="divisible"):
        TrainConfig(batch_size=10, shards=4).validate()


# --------------------------------------------------------------------------
# fine-tuning drivers
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pretrained_ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    ds = tiny_dataset()
    cfg = tiny_model_cfg(image_resolution=16)
    result = pretrain(cfg, tiny_train_cfg(epochs=2), ds, out)
    return result.checkpoint_path, ds


def test_finetune_retrieval_disables_mlm_and_fgd(pretrained_ckpt):
    ckpt, ds = pretrained_ckpt
    result = finetune_retrieval(ckpt, ds, tiny_train_cfg(epochs=1))
    for m in result.metrics:
        assert m["mlm"] == 0.0
        assert m["fgd"] == 0.0
        assert m["gcpr"] > 0.0
        assert m["fgr"] > 0.0


def test_finetune_matching_is_fgr_only(pretrained_ckpt):
    ckpt, _ = pretrained_ckpt
    ds = tiny_dataset(count=48, noise=0.3, seed=77)
    result = finetune_matching(ckpt, ds, tiny_train_cfg(epochs=1))
    for m in result.metrics:
        assert m["gcpr"] == 0.0 and m["mlm"] == 0.0 and m["fgd"] == 0.0
        assert m["fgr"] > 0.0


def test_matching_step_sends_no_gradient_to_projections(pretrained_ckpt):
    ckpt, _ = pretrained_ckpt
    ds = tiny_dataset(count=48, noise=0.3, seed=78)
    cfg = dataclasses.replace(
        tiny_train_cfg(), use_gcpr=False, use_mlm=False, use_fgd=False, use_tgd=False
    )
    trainer = Trainer.from_checkpoint(ckpt, ds, train_cfg=cfg, matching_mode=True)
    records, fields = trainer._next_batch()
    out = trainer._loss_step(records, fields)
    trainer.optimizer.zero_grad(set_to_none=True)
    out.losses.total.backward()
    assert trainer.model.text_proj.weight.grad is None
    assert trainer.model.image_proj.weight.grad is None
    assert trainer.model.match_head.weight.grad is not None


def test_load_model_from_checkpoint_matches_trainer(pretrained_ckpt):
    ckpt, _ = pretrained_ckpt
    model, bank, payload = load_model_from_checkpoint(ckpt)
    assert payload["format_version"] == 1
    assert model.cfg.hidden_dim == 16
    assert bank.image_queue.fill_count > 0
