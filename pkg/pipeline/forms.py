"""
One form per run-config section. A field's ``initial`` is the default used
when the key is absent from the YAML file.
"""
from django import forms
from django.core.exceptions import ValidationError

from segmentation.prompts import PromptMode
from training.losses import EMBEDDING_LOSS_FORMS

PROMPT_MODE_CHOICES = [(mode.value, mode.value) for mode in PromptMode]
TEACHER_PROMPT_CHOICES = [choice for choice in PROMPT_MODE_CHOICES if choice[0] != PromptMode.NONE.value]
AGGREGATION_CHOICES = [('mean_per_frame', 'Mean per frame'), ('micro', 'Micro (pooled counts)')]


class PairField(forms.Field):
    """A two-element YAML list, cast element-wise."""

    def __init__(self, *, cast=float, min_value=None, ordered=True, **kwargs):
        self.cast = cast
        self.min_value = min_value
        self.ordered = ordered
        super().__init__(**kwargs)

    def to_python(self, value):
        if value in self.empty_values:
            return None
        if not isinstance(value, (list, tuple)) or len(value) != 2:
            raise ValidationError('Enter a list of exactly two numbers.')
        try:
            pair = tuple(self.cast(v) for v in value)
        except (TypeError, ValueError):
            raise ValidationError('Enter a list of exactly two numbers.')
        if self.cast is int and any(float(v) != int(v) for v in value):
            raise ValidationError('Enter whole numbers.')
        return pair

    def validate(self, value):
        super().validate(value)
        if value is None:
            return
        if self.min_value is not None and min(value) < self.min_value:
            raise ValidationError(f'Values must be at least {self.min_value}.')
        if self.ordered and value[0] > value[1]:
            raise ValidationError('Enter the lower bound first.')


class SectionForm(forms.Form):

    @classmethod
    def defaults(cls):
        return {name: field.initial for name, field in cls.base_fields.items()}


class PathsForm(SectionForm):
    source = forms.CharField(required=False, initial='')
    target = forms.CharField(required=False, initial='')
    target_eval = forms.CharField(required=False, initial='')
    backgrounds = forms.CharField(required=False, initial='')


class SceneForm(SectionForm):
    control_point_count = forms.IntegerField(min_value=4, initial=6)
    wire_width_px = forms.FloatField(min_value=0.5, initial=2.0)
    wire_intensity = forms.IntegerField(min_value=0, max_value=255, initial=40)
    background_intensity = forms.IntegerField(min_value=0, max_value=255, initial=180)
    height = forms.IntegerField(min_value=64, initial=256)
    width = forms.IntegerField(min_value=64, initial=256)
    antialias = forms.BooleanField(required=False, initial=True)

    def clean(self):
        cleaned_data = super().clean()
        wire = cleaned_data.get('wire_intensity')
        background = cleaned_data.get('background_intensity')
        if wire is not None and wire == background:
            raise forms.ValidationError('wire_intensity must differ from background_intensity.')
        return cleaned_data


class SynthesisForm(SectionForm):
    scene_count = forms.IntegerField(min_value=1, initial=200)
    pool_size = forms.IntegerField(min_value=1, initial=32)
    synthesized_count = forms.IntegerField(min_value=1, initial=254)
    noise_sigma = forms.FloatField(min_value=0.0, initial=5.0)


class ClusterForm(SectionForm):
    eps = forms.FloatField(min_value=0.1, initial=3.0)
    min_pts = forms.IntegerField(min_value=1, initial=4)
    min_cluster_size = forms.IntegerField(min_value=1, initial=20)
    keep_top_k = forms.IntegerField(min_value=1, required=False, initial=None)
    threshold = forms.FloatField(min_value=0.01, max_value=0.99, initial=0.5)


class ModelForm(SectionForm):
    image_size = PairField(cast=int, min_value=16, ordered=False, initial=(256, 256))
    patch_size = forms.IntegerField(min_value=2, initial=16)
    embed_dim = forms.IntegerField(min_value=4, initial=96)
    encoder_layers = forms.IntegerField(min_value=1, initial=6)
    attention_heads = forms.IntegerField(min_value=1, initial=4)
    lora_rank = forms.IntegerField(min_value=0, initial=4)
    lora_scale = forms.FloatField(min_value=0.0, initial=1.0)
    binarize_threshold = forms.FloatField(min_value=0.01, max_value=0.99, initial=0.5)
    tune_base_encoder = forms.BooleanField(required=False, initial=False)

    def clean(self):
        cleaned_data = super().clean()
        size = cleaned_data.get('image_size')
        patch = cleaned_data.get('patch_size')
        if size and patch and (size[0] % patch or size[1] % patch):
            raise forms.ValidationError(f'image_size {list(size)} must be divisible by patch_size {patch}.')
        dim = cleaned_data.get('embed_dim')
        heads = cleaned_data.get('attention_heads')
        if dim and heads and dim % heads:
            raise forms.ValidationError('embed_dim must be divisible by attention_heads.')
        return cleaned_data


class LossForm(SectionForm):
    eps_dice = forms.FloatField(min_value=1e-12, initial=1e-6)
    focal_exponent = forms.FloatField(min_value=0.0, initial=2.0)
    tau = forms.FloatField(min_value=1e-6, initial=0.3)
    lambda_ts = forms.FloatField(min_value=0.0, initial=1.0)
    lambda_ts_prime = forms.FloatField(min_value=0.0, initial=1.0)
    lambda_ws_stu = forms.FloatField(min_value=0.0, initial=0.5)
    lambda_ws_stu_prime = forms.FloatField(min_value=0.0, initial=0.5)
    lambda_ws_tea = forms.FloatField(min_value=0.0, initial=0.5)
    lambda_ws_tea_prime = forms.FloatField(min_value=0.0, initial=0.5)
    lambda_c_focal = forms.FloatField(min_value=0.0, initial=0.5)
    lambda_c_dice = forms.FloatField(min_value=0.0, initial=0.5)
    prob_clamp = forms.FloatField(min_value=1e-12, max_value=0.01, initial=1e-6)
    embedding_loss_form = forms.ChoiceField(choices=[(f, f) for f in EMBEDDING_LOSS_FORMS], initial='infonce')
    target_threshold = forms.FloatField(min_value=0.01, max_value=0.99, initial=0.5)


class LossWeightsForm(SectionForm):
    alpha = forms.FloatField(min_value=0.0, initial=0.0)
    beta = forms.FloatField(min_value=0.0, initial=0.0)
    gamma = forms.FloatField(min_value=0.0, initial=0.0)
    delta = forms.FloatField(min_value=0.0, initial=0.0)


class WarmupWeightsForm(LossWeightsForm):
    alpha = forms.FloatField(min_value=0.0, initial=0.0)
    beta = forms.FloatField(min_value=0.0, initial=1.0)
    gamma = forms.FloatField(min_value=0.0, initial=0.5)
    delta = forms.FloatField(min_value=0.0, initial=1.0)


class SelftrainWeightsForm(LossWeightsForm):
    alpha = forms.FloatField(min_value=0.0, initial=5.0)
    beta = forms.FloatField(min_value=0.0, initial=0.0)
    gamma = forms.FloatField(min_value=0.0, initial=1.0)
    delta = forms.FloatField(min_value=0.0, initial=0.0)


class ScheduleForm(SectionForm):
    warmup_epochs = forms.IntegerField(min_value=0, initial=3)
    total_epochs = forms.IntegerField(min_value=1, initial=10)
    coarse_epochs = forms.IntegerField(min_value=1, initial=10)
    learning_rate = forms.FloatField(min_value=1e-12, initial=1e-4)
    batch_size_train = forms.IntegerField(min_value=1, initial=2)
    batch_size_eval = forms.IntegerField(min_value=1, initial=16)
    teacher_prompt_mode = forms.ChoiceField(choices=TEACHER_PROMPT_CHOICES, initial=PromptMode.BOX.value)
    point_count = forms.IntegerField(min_value=0, initial=5)
    fine_sample_count = forms.IntegerField(min_value=1, required=False, initial=None)

    def clean(self):
        cleaned_data = super().clean()
        warmup = cleaned_data.get('warmup_epochs')
        total = cleaned_data.get('total_epochs')
        if warmup is not None and total is not None and warmup >= total:
            raise forms.ValidationError('warmup_epochs must be smaller than total_epochs.')
        return cleaned_data


class AugmentationForm(SectionForm):
    intensity_jitter = forms.FloatField(min_value=0.0, max_value=0.99, initial=0.2)
    blur_sigma_range = PairField(min_value=0.0, initial=(0.5, 1.5))
    noise_sigma = forms.FloatField(min_value=0.0, initial=4.0)
    erase_count = forms.IntegerField(min_value=0, initial=2)
    erase_size_range = PairField(cast=int, min_value=1, initial=(8, 24))


class BenchmarkForm(SectionForm):
    target_train_count = forms.IntegerField(min_value=1, initial=200)
    target_eval_count = forms.IntegerField(min_value=1, initial=50)
    target_noise_sigma = forms.FloatField(min_value=0.0, initial=6.0)
    adaptation_margin = forms.FloatField(min_value=0.0, initial=0.05)
    prompt_tolerance = forms.FloatField(min_value=0.0, initial=0.05)


class EvaluationForm(SectionForm):
    aggregation = forms.ChoiceField(choices=AGGREGATION_CHOICES, initial='mean_per_frame')
    prompt_mode = forms.ChoiceField(choices=PROMPT_MODE_CHOICES, initial=PromptMode.NONE.value)
    point_count = forms.IntegerField(min_value=0, initial=5)


class DebugForm(SectionForm):
    dump_prompts = forms.BooleanField(required=False, initial=False)
