from pipeline.commands import PipelineCommand
from pipeline.stages import run_composite


class Command(PipelineCommand):
    help = 'Paste source guidewires onto pool backgrounds to build the synthesized dataset'
    stage = 'composite'

    def run_stage(self, config, out, options):
        return run_composite(config, out)
