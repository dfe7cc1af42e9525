from pipeline.commands import PipelineCommand
from pipeline.stages import run_baseline_direct


class Command(PipelineCommand):
    help = 'Direct transfer: train on raw source scenes, evaluate on the target domain'
    stage = 'baseline_direct'

    def run_stage(self, config, out, options):
        return run_baseline_direct(config, out)
