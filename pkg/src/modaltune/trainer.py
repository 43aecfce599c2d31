"""Optimization loop aligning fused outputs with projected text targets.

One patient per step (the batch-size-1 regime), all task prompts evaluated
per step under a single KL objective, AdamW on adapter parameters only,
linear-warmup cosine-annealed learning rate, one checkpoint per epoch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .evaluation import (DegenerateTaskError, FeatureScaler, SurvivalData,
                         balanced_accuracy, concordance_index, fit_cph,
                         fit_linear_probe, predict_probe, risk_scores)
from .modal_adapter import ModalAdapter
from .numerics import DropoutRng, NumericError, softmax, stable_stream_seed
from .slide_encoder import FrozenEncoder
from .text_targets import (GENERAL_TASK, Projector, SUBTYPE_TASK, SURVIVAL_TASK,
                           TextTargetSet)


@dataclass
class TrainConfig:
    epochs: int = 30
    max_lr: float = 1e-4
    warmup_epochs: int = 10
    weight_decay: float = 5e-4
    batch_size: int = 1
    seed: int = 0
    n_tasks: int = 3
    single_modal: bool = False
    single_task_prompt: bool = False
    no_text_embedding: bool = False
    projector_mode: str = "text_fixed"
    pan_cancer: bool = False
    dropout_enabled: bool = True
    kl_temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.batch_size != 1:
            raise ValueError("training runs in the single-batch regime (batch_size=1)")
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs must be <= epochs")


@dataclass
class TrainSample:
    patient: object           # Patient (bag/expression/clinical accessors)
    targets: TextTargetSet | None
    site: str
    class_index: int | None = None
    duration_bin: int | None = None
    event: bool | None = None


@dataclass
class ValSet:
    """Per-site probe data used for epoch selection.

    Patient lists are the full splits; the class masks select the records
    with a class label (RARE records never enter probe label sets).
    """

    site: str
    train_patients: list
    val_patients: list
    train_class_mask: np.ndarray
    train_labels: np.ndarray
    val_class_mask: np.ndarray
    val_labels: np.ndarray
    train_surv: SurvivalData | None = None
    val_surv: SurvivalData | None = None


@dataclass
class Checkpoint:
    epoch: int
    state: dict[str, Tensor]
    val_metrics: dict
    rng_cursor: int


@dataclass
class TrainResult:
    checkpoints: list[Checkpoint]
    epoch_losses: list[float]
    seen_patient_ids: set[str]
    frozen_digest_before: str
    frozen_digest_after: str
    n_task_forwards: int
    classification_skips: int = 0


def kl_alignment_loss(z_list: list[Tensor], y_list: list[Tensor],
                      detach_targets: bool = True,
                      temperature: float = 1.0) -> Tensor:
    """Mean over tasks of KL(softmax(z/|z|) || softmax(y/|y|)).

    Targets are detached by default so gradients flow only into z.
    temperature=1 applies the softmax to the unit-norm vectors as-is; it is
    exposed as a knob but never changed by the shipped configs.
    """
    if len(z_list) != len(y_list) or not z_list:
        raise ValueError("z and y lists must be nonempty and the same length")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    total = None
    for z, y in zip(z_list, y_list):
        if z.shape != y.shape:
            raise ValueError(f"width mismatch: {tuple(z.shape)} vs {tuple(y.shape)}")
        z_norm = torch.linalg.vector_norm(z)
        y_det = y.detach() if detach_targets else y
        y_norm = torch.linalg.vector_norm(y_det)
        if z_norm.item() == 0.0 or y_norm.item() == 0.0:
            raise NumericError("zero-norm vector in the alignment loss")
        p = softmax(z / (z_norm * temperature))
        log_p = torch.log(p)
        log_q = torch.log(softmax(y_det / (y_norm * temperature)))
        term = (p * (log_p - log_q)).sum()
        total = term if total is None else total + term
    return total / len(z_list)


def lr_at(step: int, total_steps: int, warmup_steps: int, max_lr: float) -> float:
    """Linear warmup to max_lr, then cosine decay to zero at total_steps."""
    if step > total_steps:
        raise ValueError("step beyond total_steps")
    if warmup_steps > 0 and step < warmup_steps:
        return max_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return max_lr if step == warmup_steps else 0.0
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return max_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class DirectLabelHeads(nn.Module):
    """Per-task heads for the label-supervised training variant.

    A linear classifier over subtype classes plus a discrete-time survival
    head over the four duration bins (negative log partial likelihood with
    sigmoid bin hazards).
    """

    def __init__(self, d_in: int, n_classes: int, n_bins: int = 4,
                 seed: int = 0) -> None:
        super().__init__()
        if n_classes < 2:
            raise DegenerateTaskError("classification head needs >= 2 classes")
        gen = torch.Generator().manual_seed(seed)
        scale = 1.0 / d_in ** 0.5
        self.cls_w = nn.Parameter(
            torch.empty(d_in, n_classes).uniform_(-scale, scale, generator=gen))
        self.cls_b = nn.Parameter(torch.zeros(n_classes))
        self.surv_w = nn.Parameter(
            torch.empty(d_in, n_bins).uniform_(-scale, scale, generator=gen))
        self.surv_b = nn.Parameter(torch.zeros(n_bins))

    def classification_loss(self, z: Tensor, class_index: int) -> Tensor:
        logits = z @ self.cls_w + self.cls_b
        return -torch.log_softmax(logits, dim=-1)[class_index]

    def survival_loss(self, z: Tensor, duration_bin: int, event: bool) -> Tensor:
        hazards = torch.sigmoid(z @ self.surv_w + self.surv_b)
        log_keep = torch.log1p(-hazards)
        if event:
            before = log_keep[:duration_bin].sum() if duration_bin > 0 else 0.0
            return -(before + torch.log(hazards[duration_bin]))
        return -log_keep[:duration_bin + 1].sum()


def _projected_targets(sample: TrainSample, projector: Projector | None) -> list[Tensor]:
    assert sample.targets is not None
    if projector is not None and projector.mode == "text_trainable":
        return [projector.project(r) for r in sample.targets.raw]
    return list(sample.targets.projected)


def train(adapter: ModalAdapter, frozen: FrozenEncoder,
          samples: list[TrainSample], cfg: TrainConfig,
          val_sets: list[ValSet] | None = None,
          projector: Projector | None = None,
          heads: DirectLabelHeads | None = None) -> TrainResult:
    """Run the full schedule and return one checkpoint per epoch."""
    digest_before = frozen.content_digest()
    task_ids = ([GENERAL_TASK] if cfg.single_task_prompt
                else list(range(1, cfg.n_tasks + 1)))
    params = [p for p in adapter.parameters() if p.requires_grad]
    if heads is not None:
        params += list(heads.parameters())
    if projector is not None and projector.mode == "text_trainable":
        params += [projector.weight]
    optimizer = torch.optim.AdamW(params, lr=cfg.max_lr, betas=(0.9, 0.999),
                                  eps=1e-8, weight_decay=cfg.weight_decay)
    total_steps = cfg.epochs * len(samples)
    warmup_steps = cfg.warmup_epochs * len(samples)

    checkpoints: list[Checkpoint] = []
    epoch_losses: list[float] = []
    seen: set[str] = set()
    step = 0
    n_forwards = 0
    cls_skips = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(
            stable_stream_seed(cfg.seed, "epoch-order", epoch)).permutation(len(samples))
        running = 0.0
        for idx in order:
            sample = samples[int(idx)]
            seen.add(sample.patient.patient_id)
            lr = lr_at(step, total_steps, warmup_steps, cfg.max_lr)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad(set_to_none=True)

            loss = _sample_loss(adapter, frozen, sample, cfg, task_ids,
                                projector, heads, step)
            n_forwards += len(task_ids) if heads is None else 2
            if heads is not None and sample.class_index is None:
                cls_skips += 1
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} patient {sample.patient.patient_id}")
            loss.backward()
            optimizer.step()
            running += float(loss.detach())
            step += 1
        epoch_losses.append(running / len(samples))
        metrics = (_validation_metrics(adapter, frozen, val_sets, cfg.seed)
                   if val_sets else {})
        checkpoints.append(Checkpoint(
            epoch=epoch,
            state={k: v.detach().clone() for k, v in adapter.state_dict().items()},
            val_metrics=metrics, rng_cursor=step))
    digest_after = frozen.content_digest()
    if digest_after != digest_before:
        raise RuntimeError("frozen encoder weights changed during training")
    return TrainResult(checkpoints=checkpoints, epoch_losses=epoch_losses,
                       seen_patient_ids=seen, frozen_digest_before=digest_before,
                       frozen_digest_after=digest_after,
                       n_task_forwards=n_forwards, classification_skips=cls_skips)


def _sample_loss(adapter: ModalAdapter, frozen: FrozenEncoder,
                 sample: TrainSample, cfg: TrainConfig, task_ids: list[int],
                 projector: Projector | None, heads: DirectLabelHeads | None,
                 step: int) -> Tensor:
    patient = sample.patient
    # Modal tokens are task-independent (only the prompt row differs), so
    # encode them once per step and share the subgraph across task passes.
    modal_rng = DropoutRng(cfg.seed, step * (cfg.n_tasks + 1)) if cfg.dropout_enabled else None
    modal_tokens = adapter.modal_tokens_for(patient.expression_tensor(),
                                            patient.clinical, modal_rng)

    def run(task: int) -> Tensor:
        rng = (DropoutRng(cfg.seed, step * (cfg.n_tasks + 1) + task)
               if cfg.dropout_enabled else None)
        return adapter(patient.bag, task, frozen, rng=rng,
                       modal_tokens_override=modal_tokens).z_comb

    if heads is not None:
        z_surv = run(SURVIVAL_TASK)
        assert sample.duration_bin is not None and sample.event is not None
        loss = heads.survival_loss(z_surv, sample.duration_bin, sample.event)
        if sample.class_index is not None:
            z_cls = run(SUBTYPE_TASK)
            loss = loss + heads.classification_loss(z_cls, sample.class_index)
        return loss

    z_list = [run(j) for j in task_ids]
    targets = _projected_targets(sample, projector)
    y_list = [targets[j - 1] for j in task_ids]
    detach = not (projector is not None and projector.mode == "text_trainable")
    return kl_alignment_loss(z_list, y_list, detach_targets=detach,
                             temperature=cfg.kl_temperature)


def _validation_metrics(adapter: ModalAdapter, frozen: FrozenEncoder,
                        val_sets: list[ValSet], seed: int) -> dict:
    from .evaluation import extract_features

    per_site_ba: dict[str, float] = {}
    per_site_ci: dict[str, float] = {}
    for vs in val_sets:
        raw_train = extract_features(adapter, frozen, vs.train_patients).x
        scaler = FeatureScaler.fit(raw_train)
        train_x = scaler.apply(raw_train)
        val_x = scaler.apply(extract_features(adapter, frozen,
                                              vs.val_patients).x)
        clf = fit_linear_probe(train_x[vs.train_class_mask], vs.train_labels,
                               seed=seed)
        per_site_ba[vs.site] = balanced_accuracy(
            vs.val_labels, predict_probe(clf, val_x[vs.val_class_mask]))
        if vs.train_surv is not None and vs.val_surv is not None \
                and vs.val_surv.events.sum() > 0:
            beta = fit_cph(train_x, vs.train_surv)
            per_site_ci[vs.site] = concordance_index(
                risk_scores(val_x, beta), vs.val_surv)
    metrics = {"balanced_accuracy": per_site_ba,
               "mean_balanced_accuracy": float(np.mean(list(per_site_ba.values())))}
    if per_site_ci:
        metrics["c_index"] = per_site_ci
        metrics["mean_c_index"] = float(np.mean(list(per_site_ci.values())))
    return metrics


def select_checkpoint(checkpoints: list[Checkpoint]) -> int:
    """Epoch with the best mean validation balanced accuracy; ties -> earliest."""
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    best_epoch, best = None, -math.inf
    for ck in checkpoints:
        score = ck.val_metrics.get("mean_balanced_accuracy")
        if score is None:
            raise ValueError(f"checkpoint {ck.epoch} lacks validation metrics")
        if score > best:
            best, best_epoch = score, ck.epoch
    return int(best_epoch)


def load_checkpoint(adapter: ModalAdapter, checkpoint: Checkpoint) -> None:
    adapter.load_state_dict(checkpoint.state)
