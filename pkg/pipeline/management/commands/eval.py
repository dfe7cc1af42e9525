from pipeline.commands import PipelineCommand
from pipeline.stages import run_eval
from segmentation.prompts import PromptMode


class Command(PipelineCommand):
    help = 'Evaluate a checkpoint end-to-end or with ground-truth-derived prompts'
    stage = 'eval'

    def add_stage_arguments(self, parser):
        parser.add_argument('--checkpoint', help='Defaults to <out>/checkpoints/student_final.ckpt')
        parser.add_argument('--dataset', help='Labelled dataset root; defaults to the target evaluation split')
        parser.add_argument('--prompt-mode', choices=[mode.value for mode in PromptMode],
                            help='Overrides evaluation.prompt_mode')
        parser.add_argument('--label', help='Stem of the written metrics files')

    def run_stage(self, config, out, options):
        return run_eval(config, out, checkpoint=options['checkpoint'], dataset=options['dataset'],
                        prompt_mode=options['prompt_mode'], label=options['label'])
