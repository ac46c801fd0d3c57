"""Two-stage training: supervised base pre-training, then episodic meta-training."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .base_learner import base_loss
from .checkpoint import load_checkpoint, parameter_hash, read_checkpoint, save_checkpoint, \
    split_from_dict
from .config import TrainConfig
from .data import ClassSplit, SegDataset, augment, collate, remap_for_base_training, \
    sample_episode
from .encoder import EncoderConfig
from .ensemble import total_loss
from .meta_learner import meta_loss
from .model import BAM, ModelConfig

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: BAM
    split: ClassSplit
    losses: list = field(default_factory=list)
    frozen_hash_before: str | None = None
    frozen_hash_after: str | None = None


def model_config_for(config: TrainConfig, num_base: int,
                     encoder: EncoderConfig | None = None, **kw) -> ModelConfig:
    return ModelConfig(
        num_base=num_base, encoder=encoder or EncoderConfig(),
        use_prior=config.use_prior, prior_wiring=config.prior_wiring,
        gram_tap=config.gram_tap, gram_normalize=config.gram_normalize,
        use_psi=config.use_psi, ensemble_init=config.ensemble_init,
        shots=config.shots, reduction=config.reduction,
        kshot_fusion=config.kshot_fusion, reweight_scope=config.reweight_scope, **kw)


def _check_finite(loss: torch.Tensor, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss.item()} at step {step}")


def episode_images(config: TrainConfig, dataset: SegDataset, split: ClassSplit) -> SegDataset:
    """Images meta-training draws episodes from. Stage 1 keeps every image (novel pixels
    become background); episodes skip images showing a novel class when asked, so novel
    objects are never taught as query background."""
    if not config.drop_novel_images:
        return dataset
    kept = dataset.without_classes(split.novel_classes)
    log.info("kept %d of %d training images without novel classes", len(kept), len(dataset))
    if not len(kept):
        raise ValueError("every training image contains a novel class")
    return kept


def pretrain_base(config: TrainConfig, dataset: SegDataset, split: ClassSplit,
                  seed: int | None = None, model_config: ModelConfig | None = None,
                  out_path=None) -> TrainResult:
    """Stage 1: encoder + base learner with pixel-wise CE over background + base classes."""
    seed = config.seeds[0] if seed is None else seed
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = BAM(model_config or model_config_for(config, split.num_base))
    model.freeze_stage1(False)
    model.train()
    params = model.stage1_parameters()
    opt = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    labels = remap_for_base_training(dataset.masks, split)
    if config.prior_bias:
        model.base.init_prior_bias(np.bincount(labels[labels != 255].ravel(),
                                               minlength=split.num_base + 1))
    n = len(dataset)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    result = TrainResult(model, split)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            imgs, labs = [], []
            for i in idx:
                img, lab = dataset.image(i), labels[i]
                if config.augment:
                    img, lab = augment(img, lab, rng)
                imgs.append(img.transpose(2, 0, 1))
                labs.append(lab)
            x = torch.from_numpy(np.stack(imgs))
            y = torch.from_numpy(np.stack(labs))
            for g in opt.param_groups:
                g["lr"] = config.lr * (1 - step / total) ** config.poly_power
            feats = model.encoder(x)
            loss = base_loss(model.base(feats.b4, x.shape[-2:]), y)
            _check_finite(loss, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss.append(loss.item())
            step += 1
        result.losses.append(float(np.mean(epoch_loss)))
        log.info("pretrain epoch %d/%d loss %.4f", epoch + 1, config.epochs, result.losses[-1])
    if out_path is not None:
        save_checkpoint(out_path, model, split, "pretrain", config.to_dict())
    return result


def stage2_model(config: TrainConfig, stage1_ckpt, seed: int) -> tuple[BAM, ClassSplit]:
    """Fresh stage-2 model: stage-1 encoder/base weights, new meta/ensemble weights."""
    meta, _ = read_checkpoint(stage1_ckpt)
    stored = ModelConfig.from_dict(meta["model_config"])
    cfg = model_config_for(config, stored.num_base, stored.encoder,
                           base_width=stored.base_width, meta_dim=stored.meta_dim)
    torch.manual_seed(seed)
    model, meta = load_checkpoint(stage1_ckpt, cfg, prefixes=("encoder.", "base."))
    return model, split_from_dict(meta["split"])


def meta_train(config: TrainConfig, stage1_ckpt, dataset: SegDataset,
               seed: int | None = None, out_path=None, steps: int | None = None) -> TrainResult:
    """Stage 2: meta learner + ensemble (+ shot reweighter) on base-class episodes,
    encoder and base learner frozen."""
    seed = config.seeds[0] if seed is None else seed
    model, split = stage2_model(config, stage1_ckpt, seed)
    model.freeze_stage1(True)
    model.train()
    frozen = (model.encoder, model.base)
    result = TrainResult(model, split, frozen_hash_before=parameter_hash(frozen))
    params = [p for p in model.stage2_parameters() if p.requires_grad]
    if not config.use_ensemble:
        params = list(model.meta.parameters())
    opt = torch.optim.SGD(params, lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    rng = np.random.default_rng(seed)
    aug_rng = np.random.default_rng([seed, 1]) if config.augment else None
    steps_per_epoch = max(config.episodes_per_epoch // config.batch_size, 1)
    total = steps if steps is not None else steps_per_epoch * config.epochs
    pool = split.base_classes
    dataset = episode_images(config, dataset, split)
    dense_of = {c: d for d, c in enumerate(split.base_ids, start=1)}
    epoch_loss = []
    for step in range(total):
        eps = [sample_episode(dataset, pool, config.shots, rng, augment_rng=aug_rng,
                              support_annotation=config.annotation_mode)
               for _ in range(config.batch_size)]
        batch = {k: torch.from_numpy(v) for k, v in collate(eps).items()}
        dense = torch.tensor([dense_of[e.class_id] for e in eps])
        out = model(batch["query"], batch["support"], batch["support_mask"],
                    class_dense_id=dense)
        if config.use_ensemble:
            loss = total_loss(out.p_f, out.p_m, batch["query_mask"], config.lam)
        else:
            loss = meta_loss(out.p_m, batch["query_mask"])
        _check_finite(loss, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        epoch_loss.append(loss.item())
        if (step + 1) % steps_per_epoch == 0 or step + 1 == total:
            result.losses.append(float(np.mean(epoch_loss)))
            log.info("meta step %d/%d loss %.4f", step + 1, total, result.losses[-1])
            epoch_loss = []
    model.eval()
    result.frozen_hash_after = parameter_hash(frozen)
    if result.frozen_hash_after != result.frozen_hash_before:
        raise RuntimeError("stage-1 parameters changed during meta-training")
    if out_path is not None:
        save_checkpoint(out_path, model, split, "meta", config.to_dict())
    return result
