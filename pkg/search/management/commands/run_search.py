"""
Django management command to run a tree search on a task.

Usage:
    python manage.py run_search search/fixtures/synthetic_demo/task.json --budget 40 --stagnation 3
    python manage.py run_search task.json --planner llm --coder llm --out runs/attn-01
"""

from pathlib import Path

from search.backends import build_components, resolve_options
from search.engine import EngineConfig, SearchEngine
from search.management.base import SearchCommand
from search.tasks import load_task
from search.trace import TraceStore


class Command(SearchCommand):
    help = 'Run the tree search (select, refine, evolve) on a task file'

    def add_arguments(self, parser):
        parser.add_argument('task_file', type=str, help='Path to the task JSON file')
        parser.add_argument('--config', type=str, help='JSON file with option values')
        parser.add_argument('--budget', type=int, help='Evaluation budget B (default 120)')
        parser.add_argument('--stagnation', type=int, help='Stagnation limit K (default 7)')
        parser.add_argument('--planner-retries', type=int, help='Planner re-prompts on unparsable output')
        parser.add_argument('--no-feedback', dest='feedback_on_retry', action='store_const', const=False,
                            help='Do not show the previous attempt to the coder')
        parser.add_argument('--coder-temperature', type=float, help='Coder sampling temperature')
        parser.add_argument('--seed', type=int, help='Random seed')
        parser.add_argument('--evaluator', choices=['task', 'synthetic', 'subprocess'],
                            help='Evaluator (default: the one the task declares)')
        parser.add_argument('--out', type=str, help='Run directory (default: under HYPOTREE RUNS_DIR)')
        self.add_backend_arguments(parser)
        self.add_format_argument(parser)

    def handle(self, *args, **options):
        task = load_task(options['task_file'])
        resolved = resolve_options(options, options.get('config'))
        planner, coder, evaluator = build_components(resolved, task)

        config = EngineConfig.from_settings(
            budget=resolved['budget'],
            stagnation=resolved['stagnation'],
            planner_retries=resolved['planner_retries'],
            feedback_on_retry=resolved['feedback_on_retry'],
            seed=resolved['seed'],
            coder_temperature=resolved['coder_temperature'],
        )
        run_dir = Path(resolved['out']) if resolved.get('out') else self.default_run_dir(task.task_id)
        if options['format'] == 'text':
            self.stdout.write(
                f'Running {task.task_id}: budget {config.budget}, stagnation {config.stagnation}, '
                f'planner {planner.name}, coder {coder.name}'
            )
            self.stdout.write(f'  Run directory: {run_dir}')

        engine = SearchEngine(
            task, config, planner, coder, evaluator, TraceStore(run_dir),
            run_info={'task_file': str(task.source_path), 'options': _persisted(resolved)},
        )
        result = engine.run()
        self.report_result(result, run_dir, options['format'])


def _persisted(options: dict) -> dict:
    """Backend choices a resume needs to rebuild the same components"""
    keys = ('planner', 'planner_file', 'planner_model', 'coder', 'coder_file', 'coder_model',
            'evaluator', 'planner_retries')
    persisted = {key: options.get(key) for key in keys}
    for key in ('planner_file', 'coder_file'):
        if persisted[key]:
            persisted[key] = str(Path(persisted[key]).resolve())
    return persisted
