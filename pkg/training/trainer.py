"""
Coarse stage, fine stage (teacher/student warm-up then self-training) and
the supervised and direct-transfer references.

Epochs are numbered from 0. Epochs ``< warmup_epochs`` are warm-up; the
teacher is frozen at the start of epoch ``warmup_epochs``.
"""
import copy
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from django.conf import settings

from evaluation.metrics import Aggregation, evaluate_dataset
from guidewire_platform.exceptions import (
    DatasetError, EmptyDatasetError, InsufficientPixelsError, ShapeMismatchError, TrainingAbortedError,
)
from guidewire_platform.seeding import SEED_SPACE, spawn_seeds
from segmentation.checkpoints import checkpoint_digest, save_checkpoint
from segmentation.lora import (
    attach_lora, freeze_model, lora_modules, mark_trainable, merge_lora, trainable_parameters,
)
from segmentation.networks import PLAIN_CONV_HEAD, PROMPT_DECODER, PromptableSegmenter, binarize
from segmentation.prompts import PromptMode, PromptSet, box_prompt, make_prompts

from .augment import AugmentationPolicy, perturb_batch
from .losses import (
    SELFTRAIN_WEIGHTS, WARMUP_WEIGHTS, LossConfig, LossParts, LossWeights, dice_loss,
    embedding_consistency_loss, loss_values, pooled_positive_embedding, pred_consistency_loss,
    total_loss, ts_loss, ws_loss,
)
from .manifest import EpochRecord, RunManifest

logger = logging.getLogger(__name__)

WARMUP = 'warmup'
SELFTRAIN = 'selftrain'

STAGE_CODES = {'coarse': 0, 'fine': 1, 'supervised': 2, 'direct': 3, 'real_supervised': 4}


@dataclass(frozen=True)
class ScheduleConfig:
    warmup_epochs: int = 3
    total_epochs: int = 10
    coarse_epochs: int = 10
    weights_warmup: LossWeights = WARMUP_WEIGHTS
    weights_selftrain: LossWeights = SELFTRAIN_WEIGHTS
    learning_rate: float = 1e-4
    batch_size_train: int = 2
    batch_size_eval: int = 16
    seed: int = 0
    teacher_prompt_mode: str = PromptMode.BOX.value
    point_count: int = 5
    fine_sample_count: Optional[int] = None

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError('warmup_epochs must be non-negative and smaller than total_epochs')
        if self.coarse_epochs < 1:
            raise ValueError('coarse_epochs must be at least 1')
        if self.learning_rate <= 0:
            raise ValueError('learning_rate must be positive')
        if self.batch_size_train < 1 or self.batch_size_eval < 1:
            raise ValueError('batch sizes must be at least 1')
        if self.seed < 0:
            raise ValueError('seed must be non-negative')
        if PromptMode(self.teacher_prompt_mode) is PromptMode.NONE:
            raise ValueError('the teacher needs a prompt mode other than none')
        if self.point_count < 0:
            raise ValueError('point_count must be non-negative')
        if self.fine_sample_count is not None and self.fine_sample_count < 1:
            raise ValueError('fine_sample_count must be at least 1')

    def to_dict(self):
        return {
            'warmup_epochs': self.warmup_epochs,
            'total_epochs': self.total_epochs,
            'coarse_epochs': self.coarse_epochs,
            'weights_warmup': self.weights_warmup.as_dict(),
            'weights_selftrain': self.weights_selftrain.as_dict(),
            'learning_rate': self.learning_rate,
            'batch_size_train': self.batch_size_train,
            'batch_size_eval': self.batch_size_eval,
            'seed': self.seed,
            'teacher_prompt_mode': self.teacher_prompt_mode,
            'point_count': self.point_count,
            'fine_sample_count': self.fine_sample_count,
        }


def configure_torch():
    torch.set_num_threads(max(1, getattr(settings, 'GUIDEWIRE_TORCH_THREADS', 1)))


def epoch_rng(seed, stage, epoch):
    return np.random.default_rng([seed, STAGE_CODES[stage], epoch])


def build_segmenter(model_config, decoder_kind, seed, encoder_state=None):
    """Fresh model under ``seed``, optionally starting from an encoder state, with LoRA attached."""
    torch.manual_seed(seed)
    model = PromptableSegmenter(replace(model_config, decoder_kind=decoder_kind))
    if encoder_state is not None:
        model.image_encoder.load_state_dict(encoder_state)
    if model.config.lora_rank > 0:
        attach_lora(model)
    else:
        mark_trainable(model)
    return model


def merged_encoder_state(model):
    """Encoder weights of ``model`` with its adapters folded in; ``model`` itself is left untouched."""
    merged = merge_lora(copy.deepcopy(model))
    return {name: tensor.clone() for name, tensor in merged.image_encoder.state_dict().items()}


def frame_prompts(mask, mode, point_count, seed):
    """
    Prompts derived from a mask. An empty mask gets the no-prompt token; too
    few pixels for points degrades to the box (or no prompt).
    """
    mode = PromptMode(mode)
    if mode is PromptMode.NONE or not np.any(mask):
        return PromptSet()
    try:
        return make_prompts(mask, mode, point_count, seed)
    except InsufficientPixelsError:
        if mode.uses_box:
            return PromptSet.for_mask(mask, boxes=(box_prompt(mask),))
        return PromptSet()


def _labelled(samples):
    if not samples:
        raise EmptyDatasetError('training needs at least one sample')
    missing = [sample.name for sample in samples if not sample.has_mask]
    if missing:
        raise DatasetError(f'{len(missing)} samples have no mask', {'frames': missing[:20]})
    return np.stack([s.image for s in samples]).astype(np.float32), np.stack([s.mask for s in samples])


def _record_abort(exc, manifest, stage, epoch, step):
    """Log ``exc`` in ``manifest.failures`` and attach the manifest to it."""
    for key, value in (('stage', stage), ('epoch', epoch), ('step', step)):
        exc.details.setdefault(key, value)
    if manifest is not None:
        manifest.failures.append({'error': type(exc).__name__, 'message': str(exc), **exc.details})
        exc.manifest = manifest
    return exc


def _check_finite(loss, stage, epoch, step, manifest=None):
    if not bool(torch.isfinite(loss)):
        exc = TrainingAbortedError(f'non-finite loss in {stage} epoch {epoch}', {'value': float(loss.detach())})
        raise _record_abort(exc, manifest, stage, epoch, step)


def _fit_dice(model, images, masks, epochs, schedule, stage, manifest, loss_config, logits_fn):
    optimizer = torch.optim.Adam(trainable_parameters(model), lr=schedule.learning_rate)
    batch_size = schedule.batch_size_train
    for epoch in range(epochs):
        model.train()
        order = epoch_rng(schedule.seed, stage, epoch).permutation(len(images))
        total, steps = 0.0, 0
        for start in range(0, len(order), batch_size):
            index = order[start:start + batch_size]
            x = torch.from_numpy(images[index])
            y = torch.from_numpy(masks[index]).to(torch.float32)
            loss = dice_loss(torch.sigmoid(logits_fn(model, x)), y, loss_config.eps_dice) / len(index)
            _check_finite(loss, stage, epoch, steps, manifest)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach())
            steps += 1
        manifest.append_epoch(EpochRecord(stage=stage, epoch=epoch, phase=stage,
                                          losses={'dice': total / steps}, steps=steps))
        logger.info('%s epoch %d: dice %.4f', stage, epoch, total / steps)
    return model


def _plain_logits(model, x):
    return model.plain_decode(model.encode_image(x))


def _end_to_end_logits(model, x):
    return model.segment(x)


def train_coarse(samples, model_config, schedule, loss_config=None, config_snapshot=None):
    """Fine-tune adapters and a plain head on labelled (synthesized) samples with dice."""
    loss_config = loss_config or LossConfig()
    images, masks = _labelled(samples)
    configure_torch()
    model = build_segmenter(model_config, PLAIN_CONV_HEAD, schedule.seed)
    manifest = RunManifest(stage='coarse', config=config_snapshot or _snapshot(model_config, schedule))
    _fit_dice(model, images, masks, schedule.coarse_epochs, schedule, 'coarse', manifest,
              loss_config, _plain_logits)
    manifest.record_checkpoint('coarse', checkpoint_digest(model))
    return model, manifest


def train_supervised_student(samples, model_config, schedule, init_model=None, loss_config=None,
                             config_snapshot=None, stage='supervised'):
    """
    Prompt-free model trained with dice on the masks carried by ``samples``
    (pseudo-labels or ground truth). The encoder starts from ``init_model``
    when given. ``stage`` is ``supervised`` for pseudo-labels and
    ``real_supervised`` for ground truth.
    """
    if stage not in STAGE_CODES:
        raise ValueError(f'unknown training stage {stage!r}')
    loss_config = loss_config or LossConfig()
    images, masks = _labelled(samples)
    configure_torch()
    config = init_model.config if init_model is not None else model_config
    encoder_state = merged_encoder_state(init_model) if init_model is not None else None
    model = build_segmenter(config, PROMPT_DECODER, spawn_seeds(schedule.seed, 3)[2], encoder_state)
    manifest = RunManifest(stage=stage, config=config_snapshot or _snapshot(config, schedule))
    _fit_dice(model, images, masks, schedule.total_epochs, schedule, stage, manifest,
              loss_config, _end_to_end_logits)
    return model, manifest


def direct_transfer_baseline(source_samples, target_eval, model_config, schedule, loss_config=None,
                             config_snapshot=None):
    """Train on raw source frames and evaluate on the target domain with no adaptation."""
    loss_config = loss_config or LossConfig()
    images, masks = _labelled(source_samples)
    configure_torch()
    model = build_segmenter(model_config, PLAIN_CONV_HEAD, schedule.seed)
    manifest = RunManifest(stage='direct', config=config_snapshot or _snapshot(model_config, schedule))
    _fit_dice(model, images, masks, schedule.coarse_epochs, schedule, 'direct', manifest,
              loss_config, _plain_logits)
    report = evaluate_checkpoint(model, target_eval, PromptMode.NONE, batch_size=schedule.batch_size_eval,
                                 label='direct_transfer')
    return model, report, manifest


def _snapshot(model_config, schedule, loss_config=None, policy=None):
    snapshot = {'model': model_config.to_dict(), 'schedule': schedule.to_dict()}
    if loss_config is not None:
        snapshot['loss'] = vars(loss_config).copy()
    if policy is not None:
        snapshot['augmentation'] = {key: list(value) if isinstance(value, tuple) else value
                                    for key, value in vars(policy).items()}
    return snapshot


def _usable_frames(target_samples, pseudo_labels, limit):
    if len(target_samples) != len(pseudo_labels):
        raise ShapeMismatchError(f'{len(target_samples)} frames vs {len(pseudo_labels)} pseudo-labels')
    usable = []
    for sample, label in zip(target_samples, pseudo_labels):
        mask = np.asarray(getattr(label, 'mask', label), dtype=np.uint8)
        if mask.shape != sample.shape:
            raise ShapeMismatchError(f'pseudo-label for {sample.name} has shape {mask.shape}')
        if mask.any():
            usable.append((sample, mask))
    if limit is not None:
        usable = usable[:limit]
    if not usable:
        raise EmptyDatasetError('no frame has a non-empty pseudo-label')
    skipped = len(target_samples) - len(usable)
    if skipped:
        logger.info('Fine stage skips %d frames (empty pseudo-label or over the sample limit)', skipped)
    return usable


def _adapter_grad_norm(model):
    norms = [parameter.grad.norm().item()
             for adapter in lora_modules(model)
             for parameter in (adapter.lora_A, adapter.lora_B)
             if parameter.grad is not None]
    return max(norms, default=0.0)


def _fine_step(student, teacher, x, x_aug, y_p, teacher_prompts, weights, loss_config, warmup):
    """
    One batch. Summed parts are divided by the batch size; the embedding
    term is already a batch mean. Returns ``(parts, total)``.
    """
    with torch.set_grad_enabled(warmup):
        z_tea = teacher.encode_image(x)
        z_tea_aug = teacher.encode_image(x_aug)
        tea_embeddings = [teacher.encode_prompts(p) for p in teacher_prompts]
        p_tea = teacher.decode_mask(z_tea, tea_embeddings)
        p_tea_aug = teacher.decode_mask(z_tea_aug, tea_embeddings)

    z_stu = student.encode_image(x)
    z_stu_aug = student.encode_image(x_aug)
    no_prompt = student.encode_prompts(PromptSet())
    p_stu = student.decode_mask(z_stu, no_prompt)
    p_stu_aug = student.decode_mask(z_stu_aug, no_prompt)

    batch = len(y_p)
    parts = LossParts(
        ts=ts_loss(p_stu, p_stu_aug, p_tea, loss_config) / batch if weights.alpha > 0 else None,
        ws=ws_loss(p_stu, p_stu_aug, p_tea, p_tea_aug, y_p, loss_config) / batch if weights.beta > 0 else None,
        emb=embedding_consistency_loss(
            [pooled_positive_embedding(z_stu[i], y_p[i]) for i in range(len(y_p))],
            [pooled_positive_embedding(z_tea[i], y_p[i]) for i in range(len(y_p))],
            loss_config.tau, loss_config.embedding_loss_form,
        ) if weights.gamma > 0 else None,
        pred=pred_consistency_loss(p_tea, p_tea_aug, loss_config) / batch if weights.delta > 0 else None,
    )
    return parts, total_loss(parts, weights)


def init_fine_pair(coarse_model, model_config, schedule):
    """
    Teacher and student built independently under different seeds, both
    starting from the coarse encoder (adapters merged) with fresh adapters.
    """
    config = coarse_model.config if coarse_model is not None else model_config
    teacher_seed, student_seed, _ = spawn_seeds(schedule.seed, 3)
    encoder_state = merged_encoder_state(coarse_model) if coarse_model is not None else None
    teacher = build_segmenter(config, PROMPT_DECODER, teacher_seed, encoder_state)
    student = build_segmenter(config, PROMPT_DECODER, student_seed, encoder_state)
    return teacher, student


def train_fine(target_samples, pseudo_labels, coarse_model=None, model_config=None, schedule=None,
               loss_config=None, policy=None, eval_set=None, checkpoint_dir=None, config_snapshot=None):
    """
    Warm-up then self-training of the teacher/student pair on target frames.
    Returns ``(student, teacher, manifest)``.
    """
    schedule = schedule or ScheduleConfig()
    loss_config = loss_config or LossConfig()
    policy = policy or AugmentationPolicy()
    if coarse_model is None and model_config is None:
        raise ValueError('train_fine needs a coarse model or a model config')

    usable = _usable_frames(target_samples, pseudo_labels, schedule.fine_sample_count)
    images = np.stack([sample.image for sample, _ in usable]).astype(np.float32)
    labels = np.stack([mask for _, mask in usable])

    configure_torch()
    teacher, student = init_fine_pair(coarse_model, model_config, schedule)
    manifest = RunManifest(
        stage='fine',
        config=config_snapshot or _snapshot(student.config, schedule, loss_config, policy),
        notes={'usable_frames': [sample.name for sample, _ in usable]},
    )
    teacher_optimizer = torch.optim.Adam(trainable_parameters(teacher), lr=schedule.learning_rate)
    student_optimizer = torch.optim.Adam(trainable_parameters(student), lr=schedule.learning_rate)
    manifest.mark_phase('fine', WARMUP if schedule.warmup_epochs > 0 else SELFTRAIN, 0)

    batch_size = schedule.batch_size_train
    for epoch in range(schedule.total_epochs):
        warmup = epoch < schedule.warmup_epochs
        if epoch == schedule.warmup_epochs:
            if checkpoint_dir is not None and epoch > 0:
                _save_phase_checkpoints(manifest, checkpoint_dir, teacher, student, WARMUP)
            freeze_model(teacher)
            student_optimizer = torch.optim.Adam(trainable_parameters(student), lr=schedule.learning_rate)
            if epoch > 0:
                manifest.mark_phase('fine', SELFTRAIN, epoch)
            logger.info('Teacher frozen at epoch %d; switching to self-training', epoch)

        weights = schedule.weights_warmup if warmup else schedule.weights_selftrain
        rng = epoch_rng(schedule.seed, 'fine', epoch)
        order = rng.permutation(len(images))
        augment_seeds = rng.integers(0, SEED_SPACE, size=len(images))
        teacher.train(warmup)
        student.train()

        sums, steps, grad_norm = {}, 0, 0.0
        for start in range(0, len(order), batch_size):
            index = order[start:start + batch_size]
            x = torch.from_numpy(images[index])
            x_aug = torch.from_numpy(perturb_batch(images[index], policy, augment_seeds[index]))
            y_p = torch.from_numpy(labels[index]).to(torch.float32)
            prompts = [frame_prompts(labels[i], schedule.teacher_prompt_mode, schedule.point_count,
                                     [schedule.seed, epoch, int(i)]) for i in index]

            try:
                parts, loss = _fine_step(student, teacher, x, x_aug, y_p, prompts, weights, loss_config, warmup)
            except TrainingAbortedError as exc:
                raise _record_abort(exc, manifest, 'fine', epoch, steps)
            _check_finite(loss, 'fine', epoch, steps, manifest)
            teacher_optimizer.zero_grad()
            student_optimizer.zero_grad()
            if loss.requires_grad:
                loss.backward()
                grad_norm = max(grad_norm, _adapter_grad_norm(teacher))
                student_optimizer.step()
                if warmup:
                    teacher_optimizer.step()

            for name, value in loss_values(parts).items():
                if value is not None:
                    sums[name] = sums.get(name, 0.0) + value
            sums['total'] = sums.get('total', 0.0) + float(loss.detach())
            steps += 1

        metrics = {}
        if eval_set:
            metrics = {
                'teacher': asdict(evaluate_checkpoint(
                    teacher, eval_set, schedule.teacher_prompt_mode, schedule.point_count,
                    schedule.seed, schedule.batch_size_eval).summary),
                'student': asdict(evaluate_checkpoint(
                    student, eval_set, PromptMode.NONE, batch_size=schedule.batch_size_eval).summary),
            }
        record = EpochRecord(
            stage='fine', epoch=epoch, phase=WARMUP if warmup else SELFTRAIN,
            weights=weights.as_dict(),
            losses={name: value / steps for name, value in sums.items()},
            metrics=metrics,
            teacher_digest=checkpoint_digest(teacher),
            student_digest=checkpoint_digest(student),
            teacher_adapter_grad_norm=grad_norm,
            steps=steps,
        )
        manifest.append_epoch(record)
        logger.info('fine epoch %d (%s): total %.4f', epoch, record.phase, record.losses['total'])

    if checkpoint_dir is not None:
        _save_phase_checkpoints(manifest, checkpoint_dir, teacher, student, 'final')
    return student, teacher, manifest


def _save_phase_checkpoints(manifest, directory, teacher, student, tag):
    directory = Path(directory)
    for role, model in (('teacher', teacher), ('student', student)):
        digest = save_checkpoint(model, directory / f'{role}_{tag}.ckpt', {'role': role, 'phase': tag})
        manifest.record_checkpoint(f'{role}_{tag}', digest)


@torch.no_grad()
def predict_masks(model, images, prompts=None, batch_size=16):
    """Binary masks for ``images``; ``prompts`` holds one PromptSet per frame or is None."""
    model.eval()
    images = np.asarray(images, dtype=np.float32)
    masks = []
    for start in range(0, len(images), batch_size):
        chunk = torch.from_numpy(images[start:start + batch_size])
        chunk_prompts = None if prompts is None else list(prompts[start:start + batch_size])
        logits = model.segment(chunk, chunk_prompts)
        masks.extend(m.numpy() for m in binarize(logits, model.config.binarize_threshold))
    return masks


def evaluate_checkpoint(model, samples, prompt_mode=PromptMode.NONE, point_count=5, seed=0, batch_size=16,
                        label='', aggregation=Aggregation.MEAN_PER_FRAME):
    """
    Segment ``samples`` under ``prompt_mode`` (prompts derived from the ground
    truth) and report IoU/F1/Acc/Sen.
    """
    if not samples:
        raise EmptyDatasetError('evaluation needs at least one sample')
    missing = [sample.name for sample in samples if not sample.has_mask]
    if missing:
        raise DatasetError(f'{len(missing)} evaluation samples have no mask', {'frames': missing[:20]})

    mode = PromptMode(prompt_mode)
    prompts = None
    if mode is not PromptMode.NONE:
        model.require_decoder(PROMPT_DECODER)
        prompts = [frame_prompts(sample.mask, mode, point_count, [seed, index])
                   for index, sample in enumerate(samples)]
    predictions = predict_masks(model, np.stack([s.image for s in samples]), prompts, batch_size)
    return evaluate_dataset(predictions, [s.mask for s in samples], aggregation=aggregation,
                            names=[s.name for s in samples], label=label or mode.value)
