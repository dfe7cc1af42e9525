from pipeline.commands import PipelineCommand
from pipeline.stages import run_synth


class Command(PipelineCommand):
    help = 'Generate procedural source scenes, or the desk target domain with --domain target'
    stage = 'synth'

    def add_stage_arguments(self, parser):
        parser.add_argument('--domain', choices=['source', 'target'], default='source')

    def run_stage(self, config, out, options):
        return run_synth(config, out, options['domain'])
