import hashlib
import json
import logging

from django.db import DatabaseError, models, transaction

logger = logging.getLogger(__name__)


class TrainingRun(models.Model):
    """
    One executed pipeline stage. The file artifacts under ``output_dir`` stay
    authoritative; this row indexes them.
    """
    STAGE_CHOICES = [
        ('coarse', 'Coarse Stage'),
        ('fine', 'Fine Stage'),
        ('supervised', 'Supervised Reference'),
        ('direct', 'Direct Transfer'),
        ('real_supervised', 'Real-Label Supervised'),
    ]

    STATUS_CHOICES = [
        ('completed', 'Completed'),
        ('aborted', 'Aborted'),
    ]

    stage = models.CharField(max_length=20, choices=STAGE_CHOICES)
    output_dir = models.CharField(max_length=500)
    seed = models.BigIntegerField(default=0)
    config_digest = models.CharField(max_length=64)
    manifest_digest = models.CharField(max_length=64)
    manifest = models.JSONField(default=dict)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='completed')

    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        ordering = ['-created_at']
        indexes = [
            models.Index(fields=['stage', 'status'], name='training_run_stage_idx'),
            models.Index(fields=['manifest_digest'], name='training_run_digest_idx'),
        ]

    def __str__(self):
        return f"{self.get_stage_display()} run {self.manifest_digest[:12]} ({self.status})"

    @property
    def final_epoch(self):
        return self.epochs.order_by('-epoch').first()


class EpochLog(models.Model):
    run = models.ForeignKey(TrainingRun, on_delete=models.CASCADE, related_name='epochs')
    epoch = models.PositiveIntegerField()
    phase = models.CharField(max_length=20)
    weights = models.JSONField(default=dict, blank=True)
    losses = models.JSONField(default=dict, blank=True)
    metrics = models.JSONField(default=dict, blank=True)
    teacher_digest = models.CharField(max_length=64, blank=True)
    student_digest = models.CharField(max_length=64, blank=True)

    class Meta:
        ordering = ['run', 'epoch']
        unique_together = ['run', 'epoch']

    def __str__(self):
        return f"Epoch {self.epoch} ({self.phase}) of run {self.run_id}"


def config_digest(config):
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode('utf-8')).hexdigest()


def record_run(manifest, output_dir, seed=0, status='completed'):
    """
    Index a finished RunManifest in the registry. Returns the TrainingRun, or
    None when the database is unavailable (the stage still succeeds).
    """
    try:
        with transaction.atomic():
            run = TrainingRun.objects.create(
                stage=manifest.stage,
                output_dir=str(output_dir),
                seed=seed,
                config_digest=config_digest(manifest.config),
                manifest_digest=manifest.digest(),
                manifest=manifest.to_dict(),
                status=status,
            )
            EpochLog.objects.bulk_create([
                EpochLog(
                    run=run,
                    epoch=record.epoch,
                    phase=record.phase,
                    weights=record.weights,
                    losses=record.losses,
                    metrics=record.metrics,
                    teacher_digest=record.teacher_digest or '',
                    student_digest=record.student_digest or '',
                )
                for record in manifest.epochs
            ])
    except DatabaseError as exc:
        logger.warning('Run registry unavailable, %s run not recorded: %s', manifest.stage, exc)
        return None
    return run
