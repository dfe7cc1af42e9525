from pipeline.commands import PipelineCommand
from pipeline.stages import run_bench


class Command(PipelineCommand):
    help = 'Run the full desk-scale pipeline and check the expected trends'
    stage = 'bench'

    def run_stage(self, config, out, options):
        return run_bench(config, out)

    def describe(self, result):
        lines = [f"student IoU {result['iou']['student_end2end'] * 100:.2f}"]
        for name, check in result['checks'].items():
            lines.append(f"{name}: {'ok' if check['passed'] else 'skipped'}")
        return '; '.join(lines)
