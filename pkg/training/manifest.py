"""
Append-only record of a training run: config snapshot, per-epoch losses,
metrics and digests, phase markers and checkpoint digests.
"""
import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

LOSS_COLUMNS = ('ts', 'ws', 'emb', 'pred', 'dice', 'total')


@dataclass(frozen=True)
class EpochRecord:
    stage: str
    epoch: int
    phase: str
    weights: dict = field(default_factory=dict)
    losses: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    teacher_digest: Optional[str] = None
    student_digest: Optional[str] = None
    teacher_adapter_grad_norm: float = 0.0
    steps: int = 0


@dataclass
class RunManifest:
    stage: str
    config: dict = field(default_factory=dict)
    epochs: list = field(default_factory=list)
    phases: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def append_epoch(self, record: EpochRecord):
        last = self.epochs[-1] if self.epochs else None
        if last is not None and last.stage == record.stage and record.epoch <= last.epoch:
            raise ValueError(f'epoch {record.epoch} of {record.stage} is not after the last recorded epoch')
        self.epochs.append(record)

    def mark_phase(self, stage, phase, epoch):
        self.phases.append({'stage': stage, 'phase': phase, 'epoch': epoch})

    def record_checkpoint(self, name, digest):
        if name in self.checkpoints:
            raise ValueError(f'checkpoint {name!r} already recorded')
        self.checkpoints[name] = digest

    def to_dict(self):
        return {
            'stage': self.stage,
            'config': self.config,
            'epochs': [asdict(record) for record in self.epochs],
            'phases': list(self.phases),
            'checkpoints': dict(self.checkpoints),
            'failures': list(self.failures),
            'notes': dict(self.notes),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self):
        return hashlib.sha256(self.to_json().encode('utf-8')).hexdigest()

    def write(self, directory, stem):
        """``<stem>_manifest.json`` and ``<stem>_losses.csv``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f'{stem}_manifest.json').write_text(self.to_json(), encoding='utf-8')
        with open(directory / f'{stem}_losses.csv', 'w', newline='', encoding='utf-8') as handle:
            writer = csv.writer(handle)
            writer.writerow(['stage', 'epoch', 'phase', *LOSS_COLUMNS])
            for record in self.epochs:
                writer.writerow([
                    record.stage, record.epoch, record.phase,
                    *('' if record.losses.get(column) is None else repr(record.losses[column])
                      for column in LOSS_COLUMNS),
                ])
        return directory / f'{stem}_manifest.json'
