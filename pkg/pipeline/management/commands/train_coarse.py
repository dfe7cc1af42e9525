from pipeline.commands import PipelineCommand
from pipeline.stages import run_train_coarse


class Command(PipelineCommand):
    help = 'Coarse stage: train adapters and the plain head on the synthesized dataset'
    stage = 'train_coarse'

    def run_stage(self, config, out, options):
        return run_train_coarse(config, out)
