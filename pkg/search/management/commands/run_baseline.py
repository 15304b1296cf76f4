"""
Django management command to run the archive-based program-space evolution
baseline on a task, with the same budget semantics as run_search.

Usage:
    python manage.py run_baseline search/fixtures/synthetic_demo/task.json --budget 40 --coder greedy
"""

from pathlib import Path

from search.backends import build_coder_backend, resolve_options
from search.baseline import BaselineConfig, run_baseline
from search.evaluators import build_evaluator
from search.management.base import SearchCommand
from search.tasks import load_task
from search.trace import TraceStore


class Command(SearchCommand):
    help = 'Run the program-space evolution baseline on a task file'

    def add_arguments(self, parser):
        parser.add_argument('task_file', type=str, help='Path to the task JSON file')
        parser.add_argument('--config', type=str, help='JSON file with option values')
        parser.add_argument('--budget', type=int, help='Evaluation budget (default 120)')
        parser.add_argument('--archive-capacity', type=int, help='Programs kept in the archive')
        parser.add_argument('--parents-per-step', type=int, help='Archive entries shown per generation')
        parser.add_argument('--exploration-floor', type=float,
                            help='Uniform share of the parent sampling weights, in [0, 1]')
        parser.add_argument('--coder-temperature', type=float, help='Coder sampling temperature')
        parser.add_argument('--seed', type=int, help='Random seed')
        parser.add_argument('--evaluator', choices=['task', 'synthetic', 'subprocess'],
                            help='Evaluator (default: the one the task declares)')
        parser.add_argument('--out', type=str, help='Run directory (default: under HYPOTREE RUNS_DIR)')
        self.add_backend_arguments(parser, planner=False, coder_choices=('greedy', 'llm', 'transcript'))
        self.add_format_argument(parser)

    def handle(self, *args, **options):
        task = load_task(options['task_file'])
        base = resolve_options({})
        base['coder'] = 'greedy'
        resolved = resolve_options(options, options.get('config'), base=base)
        evaluator = build_evaluator(task, resolved['evaluator'])
        backend = build_coder_backend(resolved, task, evaluator)

        config = BaselineConfig.from_settings(
            budget=resolved['budget'],
            archive_capacity=resolved['archive_capacity'],
            parents_per_step=resolved['parents_per_step'],
            exploration_floor=resolved['exploration_floor'],
            seed=resolved['seed'],
            coder_temperature=resolved['coder_temperature'],
        )
        run_dir = Path(resolved['out']) if resolved.get('out') else self.default_run_dir(task.task_id, 'baseline')
        if options['format'] == 'text':
            self.stdout.write(
                f'Running baseline on {task.task_id}: budget {config.budget}, '
                f'archive {config.archive_capacity}, coder {backend.name}'
            )
            self.stdout.write(f'  Run directory: {run_dir}')

        result = run_baseline(task, config, backend, evaluator, TraceStore(run_dir),
                              run_info={'task_file': str(task.source_path)})
        self.report_result(result, run_dir, options['format'])
