from pipeline.commands import PipelineCommand
from pipeline.stages import run_pool


class Command(PipelineCommand):
    help = 'Crop the background pool from target-domain frames'
    stage = 'pool'

    def run_stage(self, config, out, options):
        return run_pool(config, out)
