from pipeline.commands import PipelineCommand
from pipeline.stages import run_train_fine


class Command(PipelineCommand):
    help = 'Fine stage: teacher/student warm-up then self-training on pseudo-labelled target frames'
    stage = 'train_fine'

    def run_stage(self, config, out, options):
        return run_train_fine(config, out)
