from pipeline.commands import PipelineCommand
from pipeline.stages import SUPERVISED_REFERENCES, run_supervised_reference


class Command(PipelineCommand):
    help = 'Prompt-free reference supervised by pseudo-labels, or by ground truth with --labels real'
    stage = 'supervised_reference'

    def add_stage_arguments(self, parser):
        parser.add_argument('--labels', choices=sorted(SUPERVISED_REFERENCES), default='pseudo')

    def run_stage(self, config, out, options):
        return run_supervised_reference(config, out, options['labels'])
