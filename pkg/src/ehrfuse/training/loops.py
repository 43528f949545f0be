"""MLM pretraining and fold-wise classification fine-tuning."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from ..augmentation import MaskingConfig, MaskMode, MlmConfig, mlm_mask, sample_rng
from ..encoder import Checkpoint, TextEncoder, load_tensors, parameter_gradients
from ..errors import DivergedLoss
from ..evaluation import PredictionSet
from ..labeling import TaggedHistory
from ..samples import VALIDATION_EPOCH, EncodedSample, classification_samples, collate
from ..tokenizer import Vocabulary
from .folds import FoldAssignment
from .losses import mlm_loss, positive_weights, weighted_bce_loss
from .optim import AdamWState, adamw_step, lr_schedule

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    mlm_lr: float = 4e-5
    cls_lr: float = 1e-5
    weight_decay: float = 0.01
    warmup_proportion: float = 0.25
    mlm_epochs: int = 5
    cls_epochs: int = 3
    eval_every: float = 0.25  # fraction of an epoch between validation passes
    patience: int = 1  # MLM early stopping, in evaluation windows
    mlm_val_fraction: float = 0.05
    eval_batch_size: int = 64
    rho_max: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.mlm_epochs < 0 or self.cls_epochs < 0:
            raise ValueError("batch_size and epoch counts must be positive")
        if self.mlm_lr <= 0 or self.cls_lr <= 0 or self.weight_decay < 0:
            raise ValueError("learning rates must be positive and weight decay non-negative")
        if not 0.0 <= self.warmup_proportion <= 1.0:
            raise ValueError("warmup_proportion must lie in [0, 1]")
        if not 0.0 < self.eval_every:
            raise ValueError("eval_every must be positive")


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def add(self, **rec) -> None:
        self.records.append(rec)
        log.info("%s", rec)

    def losses(self, split: str) -> list[float]:
        return [r["loss"] for r in self.records if r["split"] == split]


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, 1, epoch])).permutation(n)


def _trainable(model: TextEncoder, exclude: str) -> dict[str, torch.nn.Parameter]:
    return {n: p for n, p in model.named_parameters() if not n.startswith(exclude)}


def _finite(loss: torch.Tensor, where: str) -> float:
    v = float(loss.detach())
    if not math.isfinite(v):
        raise DivergedLoss(f"non-finite loss during {where}")
    return v


def _window(cfg: TrainConfig, steps_per_epoch: int) -> int:
    return max(1, int(round(cfg.eval_every * steps_per_epoch)))


# -- MLM pretraining ----------------------------------------------------------


def _mlm_batch(samples: Sequence[EncodedSample], mlm: MlmConfig, vocab_size: int, epoch: int):
    corrupted, labels = [], []
    for s in samples:
        rng = sample_rng(mlm.seed, s.patient_id, s.chunk, epoch)
        c, l = mlm_mask(s.ids, mlm, vocab_size, rng)
        corrupted.append(c)
        labels.append(l)
    batch = collate(samples, corrupted)
    width = batch.ids.shape[1]
    return batch, torch.from_numpy(np.stack(labels)[:, :width])


def _mlm_forward(model, batch, labels, train, gen):
    hidden = model.encode(batch.ids, batch.attention_mask, train, gen)
    sel = labels != -100
    return mlm_loss(model.mlm_logits(hidden[sel]), labels[sel])


def _mlm_eval(model, batches) -> float:
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for batch, labels in batches:
            n = int((labels != -100).sum())
            if n == 0:
                continue
            total += _finite(_mlm_forward(model, batch, labels, False, None), "MLM validation") * n
            count += n
    return total / max(count, 1)


def run_pretraining(
    samples: Sequence[EncodedSample],
    model: TextEncoder,
    cfg: TrainConfig,
    mlm: MlmConfig = MlmConfig(),
    max_steps: int | None = None,
) -> tuple[Checkpoint, TrainLog]:
    """Masked-language-model training with early stopping on held-out patients.

    Returns the checkpoint with the best validation MLM loss.
    """
    V = model.config.vocab_size
    patients = sorted({s.patient_id for s in samples})
    rng = np.random.default_rng(cfg.seed)
    n_val = int(round(cfg.mlm_val_fraction * len(patients)))
    val_ids = set(rng.permutation(patients)[:n_val].tolist()) if n_val else set()
    train = [s for s in samples if s.patient_id not in val_ids]
    val = [s for s in samples if s.patient_id in val_ids]
    val_batches = [
        _mlm_batch(val[i : i + cfg.eval_batch_size], mlm, V, VALIDATION_EPOCH)
        for i in range(0, len(val), cfg.eval_batch_size)
    ]

    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = steps_per_epoch * cfg.mlm_epochs
    if max_steps is not None:
        total = min(total, max_steps)
    window = _window(cfg, steps_per_epoch)
    params = _trainable(model, "decoder")
    state = AdamWState()
    gen = torch.Generator().manual_seed(cfg.seed)
    tlog = TrainLog()

    best = Checkpoint.from_model(model, 0, {"seed": cfg.seed})
    best_loss = _mlm_eval(model, val_batches) if val_batches else math.inf
    if val_batches:
        tlog.add(step=0, epoch=0.0, split="val", loss=best_loss, lr=0.0)
    bad = 0
    step = 0
    running: list[float] = []
    stop = False
    for epoch in range(cfg.mlm_epochs):
        order = _epoch_order(cfg.seed, epoch, len(train))
        for b in range(0, len(order), cfg.batch_size):
            model.train()
            batch, labels = _mlm_batch([train[i] for i in order[b : b + cfg.batch_size]], mlm, V, epoch)
            if not bool((labels != -100).any()):
                continue
            loss = _mlm_forward(model, batch, labels, True, gen)
            running.append(_finite(loss, "MLM training"))
            grads = parameter_gradients(loss, model)
            lr = lr_schedule(step + 1, total, cfg.mlm_lr, cfg.warmup_proportion)
            adamw_step(params, {n: grads[n] for n in params}, state, lr, weight_decay=cfg.weight_decay)
            step += 1
            if step % window == 0 or step == total:
                ep = step / steps_per_epoch
                tlog.add(step=step, epoch=ep, split="train", loss=float(np.mean(running)), lr=lr)
                running = []
                if val_batches:
                    vl = _mlm_eval(model, val_batches)
                    tlog.add(step=step, epoch=ep, split="val", loss=vl, lr=lr)
                    if vl < best_loss:
                        best_loss, bad = vl, 0
                        best = Checkpoint.from_model(model, step, {"seed": cfg.seed})
                    else:
                        bad += 1
                        stop = bad >= cfg.patience
                else:
                    best = Checkpoint.from_model(model, step, {"seed": cfg.seed})
            if stop or step >= total:
                stop = True
                break
        if stop:
            break
    if not val_batches:
        best = Checkpoint.from_model(model, step, {"seed": cfg.seed})
    return best, tlog


# -- classification fine-tuning -----------------------------------------------


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    predictions: PredictionSet
    log: TrainLog
    rho: np.ndarray
    roles: dict


def _cls_eval(model, samples, rho, bs) -> tuple[float, np.ndarray]:
    """Mean weighted loss and per-sample logits (float64)."""
    model.eval()
    total, logits = 0.0, []
    with torch.no_grad():
        for i in range(0, len(samples), bs):
            part = samples[i : i + bs]
            batch = collate(part)
            z = model(batch.ids, batch.attention_mask)
            total += float(weighted_bce_loss(z, batch.y, batch.omega, rho)) * len(part)
            logits.append(z.double().numpy())
    z = np.concatenate(logits) if logits else np.zeros((0, len(rho)))
    return total / max(len(samples), 1), z


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0, 1 / (1 + np.exp(-z)), np.exp(z) / (1 + np.exp(z)))


def init_classifier(pretrained: Checkpoint, num_phenotypes: int, seed: int) -> TextEncoder:
    cfg = dataclasses.replace(pretrained.config, num_phenotypes=num_phenotypes)
    model = TextEncoder(cfg, seed=seed)
    encoder_only = {k: v for k, v in pretrained.tensors.items() if not k.startswith("decoder")}
    load_tensors(model, encoder_only)
    return model


def run_finetuning(
    tagged: Sequence[TaggedHistory],
    folds: FoldAssignment,
    model_index: int,
    cfg: TrainConfig,
    pretrained: Checkpoint,
    vocab: Vocabulary,
    masking: MaskingConfig = MaskingConfig(),
    corpus: Sequence[str] = (),
) -> FinetuneResult:
    """Train fold-model ``model_index`` and predict its test fold.

    ``tagged`` is aligned with ``folds.folds``. Training and validation
    samples use stochastic clinical masking with comorbidity replication;
    test patients get one TEST-masked sample per chunk, and a patient's
    probability is the maximum over its chunks.
    """
    roles = folds.roles(model_index)
    train_t = [tagged[i] for i in folds.members(roles["train"])]
    val_t = [tagged[i] for i in folds.members(roles["val"])]
    test_t = [tagged[i] for i in folds.members(roles["test"])]
    D = len(tagged[0].phenotype_ids)
    max_tokens = pretrained.config.max_tokens

    rho = positive_weights(np.stack([t.y for t in train_t]), cfg.rho_max)
    rho_t = torch.from_numpy(rho.astype(np.float32))
    model = init_classifier(pretrained, D, cfg.seed + 17 * (model_index + 1))
    params = _trainable(model, "mlm_bias")

    def train_samples(epoch: int) -> list[EncodedSample]:
        return classification_samples(train_t, vocab, max_tokens, masking, MaskMode.TRAIN_VAL, epoch, corpus)

    val_s = classification_samples(val_t, vocab, max_tokens, masking, MaskMode.TRAIN_VAL,
                                   VALIDATION_EPOCH, corpus)
    test_s = classification_samples(test_t, vocab, max_tokens, masking, MaskMode.TEST)

    first = train_samples(0)
    steps_per_epoch = math.ceil(len(first) / cfg.batch_size)
    total = steps_per_epoch * cfg.cls_epochs
    window = _window(cfg, steps_per_epoch)
    state = AdamWState()
    gen = torch.Generator().manual_seed(cfg.seed + 1000 * (model_index + 1))
    tlog = TrainLog()

    best_loss, _ = _cls_eval(model, val_s, rho_t, cfg.eval_batch_size)
    best = Checkpoint.from_model(model, 0, {"seed": cfg.seed, "model": model_index})
    tlog.add(step=0, epoch=0.0, split="val", loss=best_loss, lr=0.0)
    step = 0
    running: list[float] = []
    for epoch in range(cfg.cls_epochs):
        samples = first if epoch == 0 else train_samples(epoch)
        order = _epoch_order(cfg.seed + model_index, epoch, len(samples))
        for b in range(0, len(order), cfg.batch_size):
            model.train()
            batch = collate([samples[i] for i in order[b : b + cfg.batch_size]])
            z = model(batch.ids, batch.attention_mask, True, gen)
            loss = weighted_bce_loss(z, batch.y, batch.omega, rho_t)
            running.append(_finite(loss, "fine-tuning"))
            grads = parameter_gradients(loss, model)
            lr = lr_schedule(min(step + 1, total), total, cfg.cls_lr, cfg.warmup_proportion)
            adamw_step(params, {n: grads[n] for n in params}, state, lr, weight_decay=cfg.weight_decay)
            step += 1
            if step % window == 0:
                ep = step / steps_per_epoch
                tlog.add(step=step, epoch=ep, split="train", loss=float(np.mean(running)), lr=lr)
                running = []
                vl, _ = _cls_eval(model, val_s, rho_t, cfg.eval_batch_size)
                tlog.add(step=step, epoch=ep, split="val", loss=vl, lr=lr)
                if vl < best_loss:
                    best_loss = vl
                    best = Checkpoint.from_model(model, step, {"seed": cfg.seed, "model": model_index})
    if step % window:
        vl, _ = _cls_eval(model, val_s, rho_t, cfg.eval_batch_size)
        tlog.add(step=step, epoch=step / steps_per_epoch, split="val", loss=vl, lr=0.0)
        if vl < best_loss:
            best = Checkpoint.from_model(model, step, {"seed": cfg.seed, "model": model_index})

    final = best.to_model()
    _, z = _cls_eval(final, test_s, rho_t, cfg.eval_batch_size)
    probs = _sigmoid(z)
    row = {}
    for s, p in zip(test_s, probs):
        row[s.patient_id] = p if s.patient_id not in row else np.maximum(row[s.patient_id], p)
    pids = tuple(t.patient_id for t in test_t)
    preds = PredictionSet(
        pids,
        tagged[0].phenotype_ids,
        np.stack([row[p] for p in pids]) if pids else np.zeros((0, D)),
        np.stack([t.y for t in test_t]) if pids else np.zeros((0, D)),
        np.full(len(pids), roles["test"]),
    )
    return FinetuneResult(best, preds, tlog, rho, roles)
