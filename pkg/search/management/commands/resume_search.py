"""
Django management command to resume an interrupted tree search, or to
continue a finished one with more budget and possibly other backends.

Usage:
    python manage.py resume_search runs/demo-tree-20261019-101500
    python manage.py resume_search runs/demo --extra-budget 50 --coder llm --coder-model gpt-4.1
"""

from pathlib import Path

from django.core.management.base import CommandError

from search.backends import build_components, resolve_options
from search.engine import EngineConfig, SearchEngine
from search.management.base import EXIT_USAGE, SearchCommand
from search.tasks import load_task
from search.trace import TraceStore


class Command(SearchCommand):
    help = 'Resume a tree-search run from its run directory'

    def add_arguments(self, parser):
        parser.add_argument('run_dir', type=str, help='Run directory holding run.log')
        parser.add_argument('--extra-budget', type=int,
                            help='Evaluations to add to the budget ledger')
        parser.add_argument('--task-file', type=str,
                            help='Task file, when it moved since the run started')
        parser.add_argument('--config', type=str, help='JSON file with option values')
        self.add_backend_arguments(parser)
        self.add_format_argument(parser)

    def handle(self, *args, **options):
        run_dir = Path(options['run_dir'])
        store = TraceStore(run_dir)
        events = store.events()
        if not events or events[0]['type'] != 'RunStarted':
            raise CommandError(f'{run_dir} holds no run', returncode=EXIT_USAGE)
        started = events[0]['data']
        if started.get('mode', 'tree') != 'tree':
            raise CommandError(f'{run_dir} is a {started["mode"]} run and cannot be resumed',
                               returncode=EXIT_USAGE)

        task_file = options.get('task_file') or started.get('task_file')
        if not task_file or task_file == 'None':
            raise CommandError('the run does not record its task file; pass --task-file', returncode=EXIT_USAGE)
        task = load_task(task_file)

        base = resolve_options({})
        base.update({k: v for k, v in started.get('options', {}).items() if v is not None})
        resolved = resolve_options(options, options.get('config'), base=base)
        planner, coder, evaluator = build_components(resolved, task)
        config = EngineConfig(**started['config'])

        engine = SearchEngine(task, config, planner, coder, evaluator, store)
        result = engine.resume(extra_budget=resolved['extra_budget'])
        if not result.resumed:
            self.stdout.write(self.style.WARNING(
                f'{run_dir} already finished ({result.exit_status}); pass --extra-budget to continue it'
            ))
        self.report_result(result, run_dir, options['format'])
