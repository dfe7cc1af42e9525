"""
Shared behaviour of the pipeline management commands: ``--config``/``--out``/
``--seed`` handling, the output-directory lock and the error record.
"""
import json
import logging
import os
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from guidewire_platform.exceptions import GuidewireError, OutputLockedError

from .config import dump_config, load_config

logger = logging.getLogger(__name__)

LOCK_NAME = '.lock'
ERROR_RECORD = 'error.json'


class OutputLock:
    """Exclusive lock file inside the output directory."""

    def __init__(self, out):
        self.path = Path(out) / LOCK_NAME

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OutputLockedError(f'{self.path.parent} is in use by another run', {'lock': str(self.path)})
        os.write(fd, str(os.getpid()).encode('ascii'))
        os.close(fd)
        return self

    def __exit__(self, exc_type, exc, tb):
        self.path.unlink(missing_ok=True)
        return False


def write_error_record(out, stage, exc):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    record = {
        'stage': stage,
        'error': type(exc).__name__,
        'message': str(exc),
        'details': getattr(exc, 'details', {}),
    }
    path = out / ERROR_RECORD
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str), encoding='utf-8')
    return path


class PipelineCommand(BaseCommand):
    stage = None

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='Run configuration (YAML)')
        parser.add_argument('--out', default='run', help='Output directory for every artifact of the stage')
        parser.add_argument('--seed', type=int, default=None, help='Override the global seed of the config')
        self.add_stage_arguments(parser)

    def add_stage_arguments(self, parser):
        pass

    def run_stage(self, config, out, options):
        raise NotImplementedError

    def describe(self, result):
        if isinstance(result, dict):
            return ', '.join(f'{key}={value}' for key, value in result.items())
        summary = result.summary
        return (f'IoU {summary.iou * 100:.2f}  F1 {summary.f1 * 100:.2f}  '
                f'Acc {summary.accuracy * 100:.2f}  Sen {summary.sensitivity * 100:.2f}')

    def handle(self, *args, **options):
        out = Path(options['out'])
        try:
            config = load_config(options['config'])
            if options['seed'] is not None:
                config = config.with_seed(options['seed'])
            with OutputLock(out):
                dump_config(config, out / 'effective_config.yaml')
                self.stdout.write(f'Running {self.stage} into {out}...')
                result = self.run_stage(config, out, options)
        except GuidewireError as exc:
            if not isinstance(exc, OutputLockedError):
                write_error_record(out, self.stage, exc)
            for line in getattr(exc, 'diagnostics', []):
                self.stderr.write(self.style.ERROR(f'  {line}'))
            raise CommandError(f'{self.stage} failed: {exc}') from exc
        except Exception as exc:
            logger.exception('%s failed with an unexpected error', self.stage)
            write_error_record(out, self.stage, exc)
            raise CommandError(f'{self.stage} failed: {type(exc).__name__}: {exc}') from exc

        (out / ERROR_RECORD).unlink(missing_ok=True)
        self.stdout.write(self.style.SUCCESS(f'{self.stage} finished: {self.describe(result)}'))
