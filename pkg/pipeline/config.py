"""
Run configuration: a YAML file whose sections are validated by the forms in
``pipeline.forms`` and turned into the module dataclasses.
"""
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml
from django import forms
from django.core.exceptions import NON_FIELD_ERRORS

from evaluation.metrics import Aggregation
from guidewire_platform.exceptions import ConfigError
from guidewire_platform.seeding import spawn_seeds
from pseudolabels.clustering import ClusterParams
from segmentation.networks import ModelConfig, PROMPT_DECODER
from segmentation.prompts import PromptMode
from simulation.scenes import SceneParams
from training.augment import AugmentationPolicy
from training.losses import LossConfig, LossWeights
from training.trainer import ScheduleConfig

from .forms import (
    AugmentationForm, BenchmarkForm, ClusterForm, DebugForm, EvaluationForm, LossForm, ModelForm,
    PathsForm, SceneForm, ScheduleForm, SelftrainWeightsForm, SynthesisForm, WarmupWeightsForm,
)

SECTION_FORMS = {
    'paths': PathsForm,
    'scene': SceneForm,
    'synthesis': SynthesisForm,
    'cluster': ClusterForm,
    'model': ModelForm,
    'loss': LossForm,
    'schedule': ScheduleForm,
    'augmentation': AugmentationForm,
    'benchmark': BenchmarkForm,
    'evaluation': EvaluationForm,
    'debug': DebugForm,
}
WEIGHT_FORMS = {'weights_warmup': WarmupWeightsForm, 'weights_selftrain': SelftrainWeightsForm}

SEED_STREAMS = ('scenes', 'target_train', 'target_eval', 'pool', 'composite', 'noise', 'training', 'prompts')


@dataclass(frozen=True)
class PathsConfig:
    source: str = ''
    target: str = ''
    target_eval: str = ''
    backgrounds: str = ''


@dataclass(frozen=True)
class SynthesisConfig:
    scene_count: int = 200
    pool_size: int = 32
    synthesized_count: int = 254
    noise_sigma: float = 5.0


@dataclass(frozen=True)
class BenchmarkConfig:
    target_train_count: int = 200
    target_eval_count: int = 50
    target_noise_sigma: float = 6.0
    adaptation_margin: float = 0.05
    prompt_tolerance: float = 0.05


@dataclass(frozen=True)
class EvaluationConfig:
    aggregation: Aggregation = Aggregation.MEAN_PER_FRAME
    prompt_mode: PromptMode = PromptMode.NONE
    point_count: int = 5


@dataclass(frozen=True)
class DebugConfig:
    dump_prompts: bool = False


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    scene: SceneParams = field(default_factory=SceneParams)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    cluster: ClusterParams = field(default_factory=ClusterParams)
    pseudo_label_threshold: float = 0.5
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    debug: DebugConfig = field(default_factory=DebugConfig)

    @property
    def seeds(self):
        """Per-stream seeds derived from the global seed."""
        return dict(zip(SEED_STREAMS, spawn_seeds(self.seed, len(SEED_STREAMS))))

    def with_seed(self, seed):
        return replace(self, seed=seed, schedule=replace(self.schedule, seed=seed),
                       scene=replace(self.scene, seed=seed))

    def to_dict(self):
        scene = asdict(self.scene)
        scene.pop('seed')
        model = self.model.to_dict()
        model.pop('decoder_kind')
        schedule = self.schedule.to_dict()
        schedule.pop('seed')
        cluster = asdict(self.cluster)
        cluster['threshold'] = self.pseudo_label_threshold
        augmentation = asdict(self.augmentation)
        for key in ('blur_sigma_range', 'erase_size_range'):
            augmentation[key] = list(augmentation[key])
        evaluation = asdict(self.evaluation)
        evaluation['aggregation'] = self.evaluation.aggregation.value
        evaluation['prompt_mode'] = self.evaluation.prompt_mode.value
        return {
            'seed': self.seed,
            'paths': asdict(self.paths),
            'scene': scene,
            'synthesis': asdict(self.synthesis),
            'cluster': cluster,
            'model': model,
            'loss': asdict(self.loss),
            'schedule': schedule,
            'augmentation': augmentation,
            'benchmark': asdict(self.benchmark),
            'evaluation': evaluation,
            'debug': asdict(self.debug),
        }

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode('utf-8')).hexdigest()


def _clean_section(prefix, form_class, data, diagnostics, nested=()):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        diagnostics.append(f'{prefix}: must be a mapping')
        return None
    known = set(form_class.base_fields)
    for key in sorted(set(data) - known - set(nested), key=str):
        diagnostics.append(f'{prefix}.{key}: unknown key')

    form = form_class(data={**form_class.defaults(), **{k: v for k, v in data.items() if k in known}})
    if not form.is_valid():
        for name, messages in form.errors.items():
            path = prefix if name == NON_FIELD_ERRORS else f'{prefix}.{name}'
            diagnostics.extend(f'{path}: {message}' for message in messages)
        return None
    return form.cleaned_data


def _build(prefix, factory, diagnostics, **kwargs):
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as exc:
        diagnostics.append(f'{prefix}: {exc}')
        return None


def parse_config(raw) -> RunConfig:
    """Validate an already-parsed YAML document; missing keys take their defaults."""
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError('configuration must be a mapping', ['<root>: must be a mapping'])

    diagnostics = []
    for key in sorted(set(raw) - set(SECTION_FORMS) - {'seed'}, key=str):
        diagnostics.append(f'{key}: unknown key')
    try:
        seed = forms.IntegerField(min_value=0).clean(raw.get('seed', 0))
    except forms.ValidationError as exc:
        diagnostics.extend(f'seed: {message}' for message in exc.messages)
        seed = 0

    sections = {
        name: _clean_section(name, form_class, raw.get(name), diagnostics,
                             nested=WEIGHT_FORMS if name == 'schedule' else ())
        for name, form_class in SECTION_FORMS.items()
    }
    schedule_raw = raw.get('schedule') if isinstance(raw.get('schedule'), dict) else {}
    weights = {
        name: _clean_section(f'schedule.{name}', form_class, schedule_raw.get(name), diagnostics)
        for name, form_class in WEIGHT_FORMS.items()
    }
    if diagnostics:
        raise ConfigError('invalid configuration: ' + '; '.join(diagnostics), diagnostics)

    scene = sections['scene']
    model_data = sections['model']
    if tuple(model_data['image_size']) != (scene['height'], scene['width']):
        diagnostics.append('model.image_size: must equal [scene.height, scene.width]')

    cluster_data = dict(sections['cluster'])
    threshold = cluster_data.pop('threshold')
    schedule = _build('schedule', ScheduleConfig, diagnostics, seed=seed,
                      weights_warmup=LossWeights(**weights['weights_warmup']),
                      weights_selftrain=LossWeights(**weights['weights_selftrain']),
                      **sections['schedule'])
    evaluation = sections['evaluation']
    config = RunConfig(
        seed=seed,
        paths=PathsConfig(**sections['paths']),
        scene=_build('scene', SceneParams, diagnostics, seed=seed, **scene),
        synthesis=SynthesisConfig(**sections['synthesis']),
        cluster=_build('cluster', ClusterParams, diagnostics, **cluster_data),
        pseudo_label_threshold=threshold,
        model=_build('model', ModelConfig, diagnostics, decoder_kind=PROMPT_DECODER, **model_data),
        loss=_build('loss', LossConfig, diagnostics, **sections['loss']),
        schedule=schedule,
        augmentation=_build('augmentation', AugmentationPolicy, diagnostics, **sections['augmentation']),
        benchmark=BenchmarkConfig(**sections['benchmark']),
        evaluation=EvaluationConfig(
            aggregation=Aggregation(evaluation['aggregation']),
            prompt_mode=PromptMode(evaluation['prompt_mode']),
            point_count=evaluation['point_count'],
        ),
        debug=DebugConfig(**sections['debug']),
    )
    if diagnostics:
        raise ConfigError('invalid configuration: ' + '; '.join(diagnostics), diagnostics)
    return config


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f'config file {path} does not exist', [f'{path}: not found'])
    try:
        raw = yaml.safe_load(path.read_text(encoding='utf-8'))
    except yaml.YAMLError as exc:
        raise ConfigError(f'config file {path} is not valid YAML', [str(exc)]) from exc
    return parse_config(raw)


def dump_config(config: RunConfig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=False), encoding='utf-8')
    return path
