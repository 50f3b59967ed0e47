"""Training recipes: baseline, two-stage multi-task, MoCo and inpainting pre-training,
and fine-tuning from a checkpoint.

Every recipe is deterministic for a fixed config: model initialisation follows
``torch.manual_seed(cfg.train.seed)``, while batch order and augmentation draw
from numpy streams keyed by ``(seed, purpose, epoch, index)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from .config import ExperimentConfig, StageConfig, compat_hash, config_hash
from .dataset import ImageRecord, boxes_to_mask, make_split
from .evaluation import MetricsReport, metrics
from .losses import dice_wce, info_nce, masked_mse, weighted_cross_entropy
from .models import (
    CheckpointError,
    CheckpointRef,
    Classifier,
    EncoderDecoder,
    MomentumPair,
    backbone_meta,
    build_backbone,
    class_logits,
    load_checkpoint,
    load_encoder_state,
    save_checkpoint,
    transfer_weights,
)
from .pretext import (
    center_mask,
    make_inpaint_sample,
    scale_to_image,
    scaled_size_range,
    targeted_lung_masks,
)
from .transforms import apply_augment, moco_aug_pipeline, preprocess, stream

logger = logging.getLogger(__name__)

DEFAULT_TAU = {"cxr": 0.2, "cxrModified": 0.07, "v2": 0.2}

# stream purposes, so different consumers never share draws
_ORDER, _AUG, _MOCO_Q, _MOCO_K, _MASKS = range(5)

Hook = Callable[[str, int, nn.Module, dict], None]


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


def cosine_anneal_lr(epoch: int, total: int, lr_max: float, lr_min: float = 0.0) -> float:
    if total < 1 or not 0 <= epoch <= total:
        raise ValueError(f"need 0 <= epoch <= total and total >= 1, got {epoch}/{total}")
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * epoch / total))


def stage_lr(stage: StageConfig, epoch: int) -> float:
    if stage.schedule == "cosine":
        return cosine_anneal_lr(epoch, stage.epochs, stage.lr, stage.lr_min)
    return stage.lr


@dataclass
class TrainResult:
    model: nn.Module
    log: list[dict]
    checkpoint: CheckpointRef | None = None
    stages: dict[str, TrainResult] = field(default_factory=dict)


# --------------------------------------------------------------------------- data


class RecordDataset:
    """Preprocessed images (cached once) with optional masks and seeded augmentation."""

    def __init__(
        self,
        records: list[ImageRecord],
        cfg: ExperimentConfig,
        labels: list[int] | None = None,
        with_masks: bool = False,
        augment: bool = False,
    ):
        size = cfg.image_size
        self.ids = [r.id for r in records]
        self.images = [preprocess(r.pixels, cfg.preproc) for r in records]
        self.labels = [int(r.label) for r in records] if labels is None else [int(y) for y in labels]
        self.masks = [boxes_to_mask(r, size) for r in records] if with_masks else None
        self.policy = cfg.augment if augment else None
        self.seed = cfg.train.seed + cfg.augment.seed_stream
        self.epoch = 0

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i: int) -> dict:
        img = self.images[i]
        mask = None if self.masks is None else self.masks[i]
        if self.policy is not None:
            img, mask = apply_augment(img, mask, self.policy, stream(self.seed, _AUG, self.epoch, i))
        item = {"image": torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))[None],
                "label": self.labels[i], "index": i}
        if mask is not None:
            item["mask"] = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.float32))[None]
        return item


def collate(items: list[dict]) -> dict:
    out = {}
    for key in items[0]:
        vals = [it[key] for it in items]
        out[key] = torch.stack(vals) if isinstance(vals[0], torch.Tensor) else torch.as_tensor(vals)
    return out


def iterate_batches(dataset, batch_size: int, shuffle: bool = False, seed: int = 0, epoch: int = 0):
    n = len(dataset)
    order = stream(seed, _ORDER, epoch).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield collate([dataset[int(i)] for i in order[start:start + batch_size]])


# --------------------------------------------------------------------------- loop


def _check_finite(loss: torch.Tensor, stage: str, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise DivergenceError(f"{stage}: non-finite loss {loss.item()} at epoch {epoch}, step {step}")


def fit(
    model: nn.Module,
    dataset,
    stage_cfg: StageConfig,
    loss_fn: Callable[[nn.Module, dict], torch.Tensor],
    *,
    seed: int,
    stage: str,
    loss_name: str = "train_loss",
    params=None,
    val: RecordDataset | None = None,
    num_classes: int = 4,
    hook: Hook | None = None,
) -> list[dict]:
    """Adam loop with per-epoch lr schedule; returns one log entry per epoch."""
    params = list(model.parameters() if params is None else params)
    opt = torch.optim.Adam(params, lr=stage_cfg.lr, weight_decay=stage_cfg.weight_decay)
    log = []
    step = 0
    for epoch in range(stage_cfg.epochs):
        lr = stage_lr(stage_cfg, epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        dataset.epoch = epoch
        model.train()
        total, count = 0.0, 0
        entry = {"stage": stage, "epoch": epoch, "lr": lr}
        for batch in iterate_batches(dataset, stage_cfg.batch_size, shuffle=True, seed=seed, epoch=epoch):
            if hook is not None:
                hook(stage, step, model, batch)
            loss = loss_fn(model, batch)
            _check_finite(loss, stage, epoch, step)
            if step == 0:
                entry["first_step_loss"] = loss.item()
            opt.zero_grad()
            loss.backward()
            opt.step()
            n = batch["image"].shape[0]
            total += loss.item() * n
            count += n
            step += 1
        entry[loss_name] = total / max(count, 1)
        if val is not None and len(val):
            report = evaluate_dataset(model, val, num_classes)
            entry["val_f1_macro"] = report.f1_macro
            entry["val_acc"] = report.accuracy
        log.append(entry)
        logger.info("%s", entry)
    return log


@torch.no_grad()
def predict_dataset(model: nn.Module, dataset, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Argmax predictions and softmax probabilities, in dataset order."""
    was_training = model.training
    model.eval()
    probs = []
    for batch in iterate_batches(dataset, batch_size):
        probs.append(torch.softmax(class_logits(model, batch["image"]), dim=1))
    model.train(was_training)
    p = torch.cat(probs).numpy()
    return p.argmax(axis=1), p


def evaluate_dataset(model, dataset, num_classes: int = 4, class_names=None) -> MetricsReport:
    preds, _ = predict_dataset(model, dataset)
    positive = 1 if num_classes == 2 else None
    return metrics(preds, dataset.labels, num_classes, class_names, positive=positive)


def evaluate(model, records, cfg: ExperimentConfig, labels=None, num_classes: int | None = None) -> MetricsReport:
    num_classes = num_classes or cfg.model.num_classes
    return evaluate_dataset(model, RecordDataset(records, cfg, labels), num_classes)


# --------------------------------------------------------------------------- artifacts


def _meta(cfg: ExperimentConfig, model_encoder, stage: str, kind: str, epoch: int, num_classes: int) -> dict:
    return {
        "stage": stage,
        "kind": kind,
        "epoch": epoch,
        "num_classes": num_classes,
        "backbone": backbone_meta(cfg.model.backbone, model_encoder),
        "config_hash": config_hash(cfg),
        "compat_hash": compat_hash(cfg),
    }


def write_log(path: str | Path, log: list[dict], cfg_hash: str) -> None:
    with open(path, "w") as fh:
        for entry in log:
            fh.write(json.dumps({**entry, "config_hash": cfg_hash}, sort_keys=True) + "\n")


def _finish(model, state: dict, cfg, out_dir, stage, kind, log, num_classes) -> CheckpointRef | None:
    if out_dir is None:
        return None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = _meta(cfg, model.encoder, stage, kind, len(log), num_classes)
    ref = save_checkpoint(out_dir / f"{stage}.pt", state, meta)
    write_log(out_dir / f"{stage}.log.jsonl", log, meta["config_hash"])
    return ref


def _val_split(records, labels, cfg: ExperimentConfig):
    """Carve a stratified validation subset out of the training records."""
    labels = [int(r.label) for r in records] if labels is None else list(labels)
    frac = cfg.train.val_fraction
    if frac <= 0 or len(records) < 10:
        return records, labels, [], []
    split = make_split(records, frac, cfg.train.seed)
    test = set(split.test_ids)
    fit_recs, fit_y, val_recs, val_y = [], [], [], []
    for r, y in zip(records, labels):
        if r.id in test:
            val_recs.append(r)
            val_y.append(y)
        else:
            fit_recs.append(r)
            fit_y.append(y)
    return fit_recs, fit_y, val_recs, val_y


def _ce_loss(class_weights=None):
    def loss_fn(model, batch):
        return weighted_cross_entropy(class_logits(model, batch["image"]), batch["label"], class_weights)
    return loss_fn


def _dice_wce_loss(loss_cfg):
    def loss_fn(model, batch):
        out = model(batch["image"])
        return dice_wce(out.class_logits, batch["label"], out.seg_logits, batch["mask"], loss_cfg)
    return loss_fn


# --------------------------------------------------------------------------- recipes


def _train_classifier(
    cfg: ExperimentConfig,
    records: list[ImageRecord],
    stage_cfg: StageConfig,
    stage: str,
    out_dir=None,
    labels=None,
    num_classes: int | None = None,
    encoder_state: dict | None = None,
    hook: Hook | None = None,
) -> TrainResult:
    num_classes = num_classes or cfg.model.num_classes
    labels = [int(r.label) for r in records] if labels is None else list(labels)
    if len(set(labels)) < 2:
        raise ValueError("training data must contain at least two classes")
    fit_recs, fit_y, val_recs, val_y = _val_split(records, labels, cfg)
    torch.manual_seed(cfg.train.seed)
    model = Classifier(build_backbone(cfg.model.backbone), num_classes, cfg.model.dropout)
    if encoder_state is not None:
        load_encoder_state(model.encoder, encoder_state)
    train_ds = RecordDataset(fit_recs, cfg, fit_y, augment=stage_cfg.augment)
    val_ds = RecordDataset(val_recs, cfg, val_y) if val_recs else None
    log = fit(model, train_ds, stage_cfg, _ce_loss(), seed=cfg.train.seed, stage=stage,
              val=val_ds, num_classes=num_classes, hook=hook)
    ref = _finish(model, model.state_dict(), cfg, out_dir, stage, "classifier", log, num_classes)
    return TrainResult(model, log, ref)


def train_baseline(cfg: ExperimentConfig, records, out_dir=None, labels=None, num_classes=None, hook=None) -> TrainResult:
    """Supervised classifier trained with plain cross-entropy and Adam."""
    return _train_classifier(cfg, records, cfg.train.baseline, "baseline", out_dir, labels, num_classes, hook=hook)


def finetune(cfg: ExperimentConfig, checkpoint, records, out_dir=None, labels=None, num_classes=None, hook=None) -> TrainResult:
    """Load a pre-trained encoder, attach a fresh head and train classification.

    Raises:
        CheckpointError: the checkpoint was built for another architecture or its
            encoder tensors do not fit the configured backbone.
    """
    path = checkpoint.path if isinstance(checkpoint, CheckpointRef) else checkpoint
    state, meta = load_checkpoint(path)
    want = compat_hash(cfg)
    if meta.get("compat_hash") not in (None, want):
        detail = ""
        try:
            load_encoder_state(build_backbone(cfg.model.backbone), state)
        except CheckpointError as exc:
            detail = f"; {exc}"
        raise CheckpointError(
            f"checkpoint {path} was built for backbone {meta.get('backbone')}, "
            f"config asks for {cfg.model.backbone} (compat hash {meta.get('compat_hash')} != {want}){detail}"
        )
    return _train_classifier(cfg, records, cfg.train.finetune, "finetune", out_dir, labels,
                             num_classes, encoder_state=state, hook=hook)


def train_multitask(
    cfg: ExperimentConfig,
    records: list[ImageRecord],
    out_dir=None,
    stage1_records=None,
    stage2_records=None,
    hook: Hook | None = None,
) -> TrainResult:
    """Three stages: classification pre-training of the encoder, equal-weight
    Dice + CE training of the encoder-decoder, then fine-tuning with the
    class-weighted compound loss. Pre-training data defaults to ``records``.
    """
    mt = cfg.train.multitask
    seed = cfg.train.seed
    nc = cfg.model.num_classes
    stage1_records = records if stage1_records is None else stage1_records
    stage2_records = records if stage2_records is None else stage2_records
    stages: dict[str, TrainResult] = {}
    torch.manual_seed(seed)

    stage1_model = None
    if not mt.skip_stage1:
        stage1_model = Classifier(build_backbone(cfg.model.backbone), nc, cfg.model.dropout)
        ds = RecordDataset(stage1_records, cfg, augment=mt.stage1.augment)
        log = fit(stage1_model, ds, mt.stage1, _ce_loss(), seed=seed, stage="stage1", hook=hook)
        ref = _finish(stage1_model, stage1_model.state_dict(), cfg, out_dir, "stage1", "classifier", log, nc)
        stages["stage1"] = TrainResult(stage1_model, log, ref)

    stage2_model = None
    if not mt.skip_stage2:
        stage2_model = EncoderDecoder(build_backbone(cfg.model.backbone), nc, cfg.model.dropout)
        if stage1_model is not None:
            transfer_weights(stage2_model, stage1_model.state_dict(), ("encoder.",))
        ds = RecordDataset(stage2_records, cfg, with_masks=True, augment=mt.stage2.augment)
        log = fit(stage2_model, ds, mt.stage2, _dice_wce_loss(mt.pretrain_loss), seed=seed,
                  stage="stage2", hook=hook)
        ref = _finish(stage2_model, stage2_model.state_dict(), cfg, out_dir, "stage2", "encoder_decoder", log, nc)
        stages["stage2"] = TrainResult(stage2_model, log, ref)

    model = EncoderDecoder(build_backbone(cfg.model.backbone), nc, cfg.model.dropout)
    if stage2_model is not None:
        prefixes = ("encoder.", "decoder.", "seg_head.") if mt.transfer == "encoder_decoder" else ("encoder.",)
        transfer_weights(model, stage2_model.state_dict(), prefixes)
    elif stage1_model is not None:
        transfer_weights(model, stage1_model.state_dict(), ("encoder.",))
    fit_recs, fit_y, val_recs, val_y = _val_split(records, None, cfg)
    train_ds = RecordDataset(fit_recs, cfg, fit_y, with_masks=True, augment=mt.stage3.augment)
    val_ds = RecordDataset(val_recs, cfg, val_y) if val_recs else None
    log = fit(model, train_ds, mt.stage3, _dice_wce_loss(mt.finetune_loss), seed=seed,
              stage="multitask", val=val_ds, num_classes=nc, hook=hook)
    ref = _finish(model, model.state_dict(), cfg, out_dir, "multitask", "encoder_decoder", log, nc)
    return TrainResult(model, log, ref, stages)


# --------------------------------------------------------------------------- self-supervised


class TwoViewDataset:
    def __init__(self, records, cfg: ExperimentConfig, variant):
        self.images = [preprocess(r.pixels, cfg.preproc) for r in records]
        self.views = moco_aug_pipeline(variant)
        self.seed = cfg.train.seed
        self.epoch = 0

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        vq, vk = self.views(self.images[i], stream(self.seed, _MOCO_Q, self.epoch, i),
                            stream(self.seed, _MOCO_K, self.epoch, i))
        return {"image": torch.from_numpy(np.ascontiguousarray(vq, dtype=np.float32))[None],
                "key_image": torch.from_numpy(np.ascontiguousarray(vk, dtype=np.float32))[None],
                "index": i}


def moco_step(pair: MomentumPair, optimizer: torch.optim.Optimizer, view_q, view_k) -> torch.Tensor:
    """One MoCo update: InfoNCE on the query encoder, then momentum update and enqueue."""
    q = pair.embed_query(view_q)
    k = pair.embed_key(view_k)
    loss = info_nce(q, k, pair.queue.clone(), pair.temperature)
    if not torch.isfinite(loss):
        raise DivergenceError(f"moco: non-finite loss {loss.item()}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    pair.momentum_update()
    pair.enqueue(k)
    return loss.detach()


def build_momentum_pair(cfg: ExperimentConfig, variant: str) -> MomentumPair:
    p = cfg.pretext
    tau = p.temperature if p.temperature is not None else DEFAULT_TAU[variant]
    return MomentumPair(build_backbone(cfg.model.backbone), p.queue_size, p.momentum, tau, p.proj_dim)


def moco_optimizer(pair: MomentumPair, stage: StageConfig) -> torch.optim.Optimizer:
    params = list(pair.query_parameters())
    key_ids = {id(p) for p in pair.key_parameters()} | {id(pair.queue)}
    assert not any(id(p) in key_ids for p in params), "key encoder leaked into the optimizer"
    return torch.optim.Adam(params, lr=stage.lr, weight_decay=stage.weight_decay)


def train_moco(cfg: ExperimentConfig, records, variant: str | None = None, out_dir=None) -> TrainResult:
    """Momentum-contrast pre-training of the encoder on unlabelled images."""
    variant = variant or cfg.pretext.moco_variant
    if variant not in DEFAULT_TAU:
        raise ValueError(f"unknown MoCo variant {variant!r}")
    stage_cfg = cfg.train.pretrain
    if stage_cfg.batch_size > cfg.pretext.queue_size:
        raise ValueError(f"batch size {stage_cfg.batch_size} exceeds queue size {cfg.pretext.queue_size}")
    seed = cfg.train.seed
    torch.manual_seed(seed)
    pair = build_momentum_pair(cfg, variant)
    opt = moco_optimizer(pair, stage_cfg)
    ds = TwoViewDataset(records, cfg, variant)
    log = []
    for epoch in range(stage_cfg.epochs):
        lr = stage_lr(stage_cfg, epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        ds.epoch = epoch
        pair.train()
        losses = []
        for batch in iterate_batches(ds, stage_cfg.batch_size, shuffle=True, seed=seed, epoch=epoch):
            losses.append(moco_step(pair, opt, batch["image"], batch["key_image"]).item())
        entry = {"stage": "moco", "epoch": epoch, "lr": lr, "info_nce": float(np.mean(losses)),
                 "first_step_loss": losses[0], "tau": pair.temperature, "variant": variant,
                 "queue_filled": int(pair.queue_filled)}
        log.append(entry)
        logger.info("%s", entry)
    state = {k: v for k, v in pair.state_dict().items() if k.startswith("encoder.")}
    ref = _finish(pair, state, cfg, out_dir, "moco", "encoder", log, cfg.model.num_classes)
    return TrainResult(pair, log, ref)


class InpaintDataset:
    def __init__(self, records, cfg: ExperimentConfig, mask_mode: str, fill_value: float | None = None):
        p = cfg.pretext
        self.images = [preprocess(r.pixels, cfg.preproc) for r in records]
        self.size = cfg.image_size
        self.mode = mask_mode
        self.size_range = scaled_size_range(self.size, p.size_range, p.reference_size)
        self.center = tuple(scale_to_image(s, self.size, p.reference_size) for s in p.center_size)
        if fill_value is None:
            fill_value = float(np.mean([im.mean() for im in self.images])) if p.fill == "mean" else 0.0
        self.fill = fill_value
        self.seed = cfg.train.seed
        self.epoch = 0

    def __len__(self):
        return len(self.images)

    def masks_for(self, i: int):
        if self.mode == "center":
            return [center_mask(self.size, self.center)]
        return list(targeted_lung_masks(self.size, self.size_range, stream(self.seed, _MASKS, self.epoch, i)))

    def sample(self, i: int):
        return make_inpaint_sample(self.images[i], self.masks_for(i), self.fill)

    def __getitem__(self, i):
        s = self.sample(i)
        return {"image": torch.from_numpy(s.input)[None],
                "target": torch.from_numpy(np.ascontiguousarray(s.target, dtype=np.float32))[None],
                "loss_mask": torch.from_numpy(s.loss_mask.astype(np.float32))[None],
                "index": i}


def _inpaint_loss(model, batch):
    out = model(batch["image"])
    return masked_mse(out.seg_logits, batch["target"], batch["loss_mask"])


MASK_MODES = ("center", "targetedCxr")


def train_inpaint(cfg: ExperimentConfig, records, mask_mode: str | None = None, out_dir=None, hook=None) -> TrainResult:
    """Inpainting pre-training: reconstruct masked regions, MSE on masked pixels only."""
    mask_mode = mask_mode or cfg.pretext.mask_mode
    if mask_mode not in MASK_MODES:
        raise ValueError(f"unknown mask mode {mask_mode!r}; expected one of {MASK_MODES}")
    torch.manual_seed(cfg.train.seed)
    model = EncoderDecoder(build_backbone(cfg.model.backbone), with_classifier=False)
    ds = InpaintDataset(records, cfg, mask_mode)
    log = fit(model, ds, cfg.train.pretrain, _inpaint_loss, seed=cfg.train.seed, stage="inpaint",
              loss_name="maskedMse", hook=hook)
    for entry in log:
        entry["mask_mode"] = mask_mode
    ref = _finish(model, model.state_dict(), cfg, out_dir, "inpaint", "inpaint", log, cfg.model.num_classes)
    if out_dir is not None and cfg.pretext.dump_grids:
        dump_reconstructions(model, ds, Path(out_dir) / "grids", cfg.pretext.dump_grids)
    return TrainResult(model, log, ref)


@torch.no_grad()
def reconstruct(model: EncoderDecoder, ds: InpaintDataset, i: int):
    model.eval()
    s = ds.sample(i)
    recon = model(torch.from_numpy(s.input)[None, None]).seg_logits[0, 0].numpy()
    return s, recon


def dump_reconstructions(model, ds: InpaintDataset, out_dir: Path, count: int) -> list[Path]:
    """Write ``input | reconstruction | target`` strips as PNG plus raw arrays as npz."""
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(min(count, len(ds))):
        s, recon = reconstruct(model, ds, i)
        filled = np.where(s.loss_mask.astype(bool), recon, s.input)
        strip = np.concatenate([s.input, filled, s.target], axis=1)
        png = out_dir / f"recon_{i:03d}.png"
        Image.fromarray(np.round(np.clip(strip, 0, 1) * 255).astype(np.uint8)).save(png)
        np.savez(out_dir / f"recon_{i:03d}.npz", input=s.input, reconstruction=recon,
                 target=s.target, loss_mask=s.loss_mask)
        paths.append(png)
    return paths


# --------------------------------------------------------------------------- loading


def model_from_checkpoint(path, cfg: ExperimentConfig) -> tuple[nn.Module, dict]:
    """Rebuild the model a checkpoint was saved from and load it strictly."""
    state, meta = load_checkpoint(path)
    if meta.get("compat_hash") not in (None, compat_hash(cfg)):
        raise CheckpointError(f"checkpoint {path} does not match the configured backbone {cfg.model.backbone}")
    kind = meta.get("kind", "classifier")
    nc = int(meta.get("num_classes", cfg.model.num_classes))
    encoder = build_backbone(cfg.model.backbone)
    if kind == "classifier":
        model = Classifier(encoder, nc, cfg.model.dropout)
    elif kind == "encoder_decoder":
        model = EncoderDecoder(encoder, nc, cfg.model.dropout)
    elif kind == "inpaint":
        model = EncoderDecoder(encoder, with_classifier=False)
    else:
        raise CheckpointError(f"checkpoint kind {kind!r} has no classification model; fine-tune it first")
    result = model.load_state_dict(state, strict=False)
    if result.missing_keys or result.unexpected_keys:
        raise CheckpointError(
            f"checkpoint {path} does not fit a {kind} model: missing {result.missing_keys}, "
            f"unexpected {result.unexpected_keys}"
        )
    model.eval()
    return model, meta
