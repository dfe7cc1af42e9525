"""
Pipeline stages. Each reads its inputs from files under ``out`` (or the
configured dataset roots) and writes its artifacts back there, so the
management commands and ``bench`` run exactly the same code.
"""
import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np
from django.conf import settings

from guidewire_platform.exceptions import BenchmarkFailedError, DatasetError, TrainingAbortedError
from pseudolabels.generation import generate_pseudo_labels, write_pseudo_labels
from segmentation.checkpoints import load_checkpoint, save_checkpoint
from segmentation.prompts import PromptMode, dump_prompts
from simulation.compositing import build_background_pool, synthesize_dataset
from simulation.scenes import (
    DomainTag, NoiseParams, generate_scenes, generate_target_frames, generate_vessel_backgrounds,
)
from training.models import record_run
from training.trainer import (
    direct_transfer_baseline, evaluate_checkpoint, frame_prompts, predict_masks, train_coarse,
    train_fine, train_supervised_student,
)

from .datasets import export_pool, load_dataset, load_pool, read_mask, write_dataset, write_mask

logger = logging.getLogger(__name__)

SOURCE_DIR = 'source'
TARGET_DIR = 'target'
TARGET_EVAL_DIR = 'target_eval'
SYNTHESIZED_DIR = 'synthesized'
CHECKPOINT_DIR = 'checkpoints'
EVAL_DIR = 'eval'

COARSE_CHECKPOINT = 'coarse.ckpt'
STUDENT_CHECKPOINT = 'student_final.ckpt'
TEACHER_CHECKPOINT = 'teacher_final.ckpt'


def _root(configured, out, default):
    return Path(configured) if configured else Path(out) / default


def _checkpoint(out, name):
    return Path(out) / CHECKPOINT_DIR / name


def run_synth(config, out, domain=DomainTag.SOURCE.value):
    """Procedural source scenes, or the desk target domain (train and eval splits)."""
    out = Path(out)
    seeds = config.seeds
    if DomainTag(domain) is DomainTag.TARGET:
        bench = config.benchmark
        train = generate_target_frames(config.scene, bench.target_train_count, seeds['target_train'],
                                       bench.target_noise_sigma, prefix='target')
        held_out = generate_target_frames(config.scene, bench.target_eval_count, seeds['target_eval'],
                                          bench.target_noise_sigma, prefix='target_eval')
        write_dataset(train, out / TARGET_DIR)
        write_dataset(held_out, out / TARGET_EVAL_DIR)
        return {'target': len(train), 'target_eval': len(held_out)}

    scenes = generate_scenes(config.scene, config.synthesis.scene_count, seeds['scenes'])
    write_dataset(scenes, out / SOURCE_DIR)
    return {'source': len(scenes)}


def run_pool(config, out):
    """
    Background patches from ``paths.backgrounds`` when configured, otherwise
    from procedural guidewire-free vessel backgrounds. Target frames are never
    cropped.
    """
    K = config.synthesis.pool_size
    if config.paths.backgrounds:
        frames = load_dataset(Path(config.paths.backgrounds), DomainTag.TARGET)
        if not frames:
            raise DatasetError(f'no background frames in {config.paths.backgrounds}')
    else:
        frames = generate_vessel_backgrounds(config.scene, K, config.seeds['pool'])
    pool = build_background_pool(
        [sample.image for sample in frames], patch_size=(config.scene.height, config.scene.width),
        K=K, seed=config.seeds['pool'], names=[s.name for s in frames],
    )
    export_pool(pool, out)
    return {'pool': len(pool)}


def run_composite(config, out):
    source = load_dataset(_root(config.paths.source, out, SOURCE_DIR), require_masks=True)
    pool = load_pool(out)
    synthesis = config.synthesis
    frames = synthesize_dataset(
        source, pool, synthesis.synthesized_count,
        NoiseParams(sigma=synthesis.noise_sigma, seed=config.seeds['noise']),
        seed=config.seeds['composite'],
    )
    write_dataset(frames, Path(out) / SYNTHESIZED_DIR)
    return {'synthesized': len(frames)}


def _finish_run(manifest, out, stem, seed):
    manifest.write(out, stem)
    run = record_run(manifest, out, seed=seed)
    return manifest.digest(), run


def _train(out, stem, seed, trainer, *args, **kwargs):
    """Run ``trainer``; an aborted run still leaves its partial manifest and an aborted registry row."""
    try:
        return trainer(*args, **kwargs)
    except TrainingAbortedError as exc:
        if exc.manifest is not None:
            exc.manifest.write(out, stem)
            record_run(exc.manifest, out, seed=seed, status='aborted')
            logger.error('%s run aborted; partial manifest written to %s', stem, out)
        raise


def run_train_coarse(config, out):
    samples = load_dataset(Path(out) / SYNTHESIZED_DIR, DomainTag.SYNTHESIZED, require_masks=True)
    model, manifest = _train(out, 'coarse', config.seed, train_coarse, samples, config.model, config.schedule,
                             config.loss, config_snapshot=config.to_dict())
    digest = save_checkpoint(model, _checkpoint(out, COARSE_CHECKPOINT), {'stage': 'coarse'})
    manifest_digest, _ = _finish_run(manifest, out, 'coarse', config.seed)
    return {'checkpoint': digest, 'manifest': manifest_digest}


def run_pseudo_label(config, out):
    out = Path(out)
    coarse, _ = load_checkpoint(_checkpoint(out, COARSE_CHECKPOINT))
    targets = load_dataset(_root(config.paths.target, out, TARGET_DIR), DomainTag.TARGET)
    labels, failures = generate_pseudo_labels(
        coarse, targets, config.pseudo_label_threshold, config.cluster,
        batch_size=config.schedule.batch_size_eval, workers=settings.GUIDEWIRE_WORKERS,
    )
    write_pseudo_labels(labels, out, failures, config.cluster, config.pseudo_label_threshold)
    if config.debug.dump_prompts:
        prompts = {
            label.source_frame: frame_prompts(label.mask, config.schedule.teacher_prompt_mode,
                                              config.schedule.point_count, [config.seed, index])
            for index, label in enumerate(labels)
        }
        dump_prompts(prompts, out / 'prompts.json')
    return {'labels': len(labels), 'empty': sum(l.low_confidence for l in labels), 'failures': len(failures)}


def load_pseudo_labelled(config, out):
    """Target frames paired with their pseudo-masks (as the sample mask)."""
    out = Path(out)
    targets = load_dataset(_root(config.paths.target, out, TARGET_DIR), DomainTag.TARGET)
    mask_dir = out / 'pseudo_masks'
    if not mask_dir.is_dir():
        raise DatasetError(f'{mask_dir} does not exist; run pseudo_label first')
    paired = []
    for sample in targets:
        path = mask_dir / f'{sample.name}.png'
        if not path.is_file():
            raise DatasetError(f'no pseudo-label for frame {sample.name}')
        paired.append(replace(sample, mask=read_mask(path)))
    return paired


def _eval_set(config, out):
    root = _root(config.paths.target_eval, out, TARGET_EVAL_DIR)
    if not (root / 'images').is_dir():
        return None
    return load_dataset(root, DomainTag.TARGET, require_masks=True)


def run_train_fine(config, out):
    coarse, _ = load_checkpoint(_checkpoint(out, COARSE_CHECKPOINT))
    paired = load_pseudo_labelled(config, out)
    _, _, manifest = _train(
        out, 'fine', config.seed, train_fine, paired, [sample.mask for sample in paired],
        coarse_model=coarse, schedule=config.schedule, loss_config=config.loss,
        policy=config.augmentation, eval_set=_eval_set(config, out),
        checkpoint_dir=Path(out) / CHECKPOINT_DIR, config_snapshot=config.to_dict(),
    )
    manifest_digest, _ = _finish_run(manifest, out, 'fine', config.seed)
    return {'student': manifest.checkpoints['student_final'], 'teacher': manifest.checkpoints['teacher_final'],
            'manifest': manifest_digest}


def run_eval(config, out, checkpoint=None, dataset=None, prompt_mode=None, label=None):
    out = Path(out)
    checkpoint = Path(checkpoint) if checkpoint else _checkpoint(out, STUDENT_CHECKPOINT)
    mode = PromptMode(prompt_mode or config.evaluation.prompt_mode)
    model, _ = load_checkpoint(checkpoint)
    samples = load_dataset(Path(dataset) if dataset else _root(config.paths.target_eval, out, TARGET_EVAL_DIR),
                           DomainTag.TARGET, require_masks=True)
    label = label or f'{checkpoint.stem}_{mode.value.replace("+", "_")}'
    report = evaluate_checkpoint(
        model, samples, mode, config.evaluation.point_count, config.seed,
        config.schedule.batch_size_eval, label=label, aggregation=config.evaluation.aggregation,
    )
    report.write(out / EVAL_DIR, stem=label)
    logger.info('%s: IoU %.2f', label, report.summary.iou * 100)
    return report


def run_infer(config, out, checkpoint, dataset, prompt_mode=None):
    """Write binary predictions for every frame of ``dataset`` to ``<out>/predictions``."""
    out = Path(out)
    mode = PromptMode(prompt_mode or PromptMode.NONE)
    model, _ = load_checkpoint(checkpoint)
    samples = load_dataset(dataset, DomainTag.TARGET, require_masks=mode is not PromptMode.NONE)
    prompts = None
    if mode is not PromptMode.NONE:
        prompts = [frame_prompts(s.mask, mode, config.evaluation.point_count, [config.seed, i])
                   for i, s in enumerate(samples)]
    masks = predict_masks(model, np.stack([s.image for s in samples]), prompts, config.schedule.batch_size_eval)
    for sample, mask in zip(samples, masks):
        write_mask(mask, out / 'predictions' / f'{sample.name}.png')
    return {'predictions': len(masks)}


def run_baseline_direct(config, out):
    out = Path(out)
    source = load_dataset(_root(config.paths.source, out, SOURCE_DIR), require_masks=True)
    held_out = _eval_set(config, out)
    if held_out is None:
        raise DatasetError('direct transfer needs a labelled target evaluation set')
    model, report, manifest = _train(out, 'direct', config.seed, direct_transfer_baseline, source, held_out,
                                     config.model, config.schedule, config.loss, config_snapshot=config.to_dict())
    report.write(out / EVAL_DIR, stem='direct_transfer')
    save_checkpoint(model, _checkpoint(out, 'direct.ckpt'), {'stage': 'direct'})
    _finish_run(manifest, out, 'direct', config.seed)
    return report


SUPERVISED_REFERENCES = {'pseudo': 'supervised', 'real': 'real_supervised'}


def run_supervised_reference(config, out, labels='pseudo'):
    """
    Prompt-free model supervised by non-empty masks only: the pseudo-labels
    (``labels='pseudo'``) or the target ground truth (``labels='real'``).
    """
    out = Path(out)
    stage = SUPERVISED_REFERENCES[labels]
    coarse, _ = load_checkpoint(_checkpoint(out, COARSE_CHECKPOINT))
    if labels == 'real':
        frames = load_dataset(_root(config.paths.target, out, TARGET_DIR), DomainTag.TARGET, require_masks=True)
    else:
        frames = load_pseudo_labelled(config, out)
    paired = [sample for sample in frames if sample.mask.any()]
    if config.schedule.fine_sample_count is not None:
        paired = paired[:config.schedule.fine_sample_count]
    if not paired:
        raise DatasetError(f'no non-empty {labels} label to supervise with')
    held_out = _eval_set(config, out)
    if held_out is None:
        raise DatasetError('the supervised reference needs a labelled target evaluation set')
    model, manifest = _train(out, stage, config.seed, train_supervised_student, paired, config.model,
                             config.schedule, init_model=coarse, loss_config=config.loss,
                             config_snapshot=config.to_dict(), stage=stage)
    save_checkpoint(model, _checkpoint(out, f'{labels}_supervised.ckpt'), {'stage': stage})
    _finish_run(manifest, out, stage, config.seed)
    report = evaluate_checkpoint(model, held_out, PromptMode.NONE, batch_size=config.schedule.batch_size_eval,
                                 label=f'{labels}_supervised', aggregation=config.evaluation.aggregation)
    report.write(out / EVAL_DIR, stem=f'{labels}_supervised')
    return report


def _check(lhs, rhs, margin=0.0):
    return {'value': lhs, 'reference': rhs, 'margin': margin, 'passed': lhs >= rhs + margin}


def enforce_checks(checks):
    """Raise BenchmarkFailedError when any check failed. Skipped checks (``passed`` None) do not count."""
    failed = sorted(name for name, check in checks.items() if check['passed'] is False)
    if failed:
        raise BenchmarkFailedError(f'benchmark checks failed: {", ".join(failed)}',
                                   {name: checks[name] for name in failed})


def run_bench(config, out):
    """
    The whole desk pipeline followed by the four trend checks. The summary
    is written before the checks are enforced.
    """
    out = Path(out)
    run_synth(config, out, DomainTag.TARGET.value)
    run_synth(config, out, DomainTag.SOURCE.value)
    run_pool(config, out)
    run_composite(config, out)
    coarse = run_train_coarse(config, out)
    run_pseudo_label(config, out)
    fine = run_train_fine(config, out)

    end2end = run_eval(config, out, prompt_mode=PromptMode.NONE, label='student_end2end')
    prompted = run_eval(config, out, prompt_mode=PromptMode.BOX_POINT, label='student_box_point')
    teacher = run_eval(config, out, checkpoint=_checkpoint(out, TEACHER_CHECKPOINT),
                       prompt_mode=PromptMode.BOX, label='teacher_box')
    warmup_path = _checkpoint(out, 'student_warmup.ckpt')
    warmup = run_eval(config, out, checkpoint=warmup_path, prompt_mode=PromptMode.NONE,
                      label='student_warmup_end2end') if warmup_path.is_file() else None
    direct = run_baseline_direct(config, out)
    supervised = run_supervised_reference(config, out)
    real_supervised = run_supervised_reference(config, out, labels='real')

    bench = config.benchmark
    student_iou = end2end.summary.iou
    checks = {
        'adapted_beats_direct': _check(student_iou, direct.summary.iou, bench.adaptation_margin),
        'selftraining_improves': (_check(student_iou, warmup.summary.iou) if warmup is not None
                                  else {'passed': None, 'reason': 'no warm-up phase'}),
        'beats_pseudo_supervised': _check(student_iou, supervised.summary.iou),
        'prompted_close_to_end2end': _check(prompted.summary.iou, student_iou, -bench.prompt_tolerance),
    }
    summary = {
        'seed': config.seed,
        'config_digest': config.digest(),
        'checkpoints': {'coarse': coarse['checkpoint'], 'student': fine['student'], 'teacher': fine['teacher']},
        'manifests': {'coarse': coarse['manifest'], 'fine': fine['manifest']},
        'iou': {
            'student_end2end': student_iou,
            'student_box_point': prompted.summary.iou,
            'teacher_box': teacher.summary.iou,
            'student_warmup_end2end': warmup.summary.iou if warmup is not None else None,
            'direct_transfer': direct.summary.iou,
            'pseudo_supervised': supervised.summary.iou,
            'real_supervised': real_supervised.summary.iou,
        },
        'checks': checks,
    }
    (out / 'bench_summary.json').write_text(json.dumps(summary, indent=2, sort_keys=True), encoding='utf-8')
    enforce_checks(checks)
    return summary
