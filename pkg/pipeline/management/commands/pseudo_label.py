from pipeline.commands import PipelineCommand
from pipeline.stages import run_pseudo_label


class Command(PipelineCommand):
    help = 'Pseudo-label the target frames with the coarse model and DBSCAN cleaning'
    stage = 'pseudo_label'

    def run_stage(self, config, out, options):
        return run_pseudo_label(config, out)
