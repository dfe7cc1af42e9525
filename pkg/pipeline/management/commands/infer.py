from pipeline.commands import PipelineCommand
from pipeline.stages import run_infer
from segmentation.prompts import PromptMode


class Command(PipelineCommand):
    help = 'Write binary guidewire masks for every frame of a dataset'
    stage = 'infer'

    def add_stage_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--dataset', required=True)
        parser.add_argument('--prompt-mode', choices=[mode.value for mode in PromptMode],
                            default=PromptMode.NONE.value)

    def run_stage(self, config, out, options):
        return run_infer(config, out, options['checkpoint'], options['dataset'], options['prompt_mode'])
