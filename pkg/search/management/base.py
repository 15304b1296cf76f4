"""
Shared plumbing for the search management commands: option flags, run
directories, exit codes and the structured (JSON) report mode.

Exit codes: 0 completed or frontier-exhausted, 2 usage or format error,
3 infrastructure-error, 4 backend-error.
"""

import json
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError
from django.utils import timezone

from search.exceptions import (
    BackendUnavailable, InfrastructureError, LandscapeFormatError, OptionsError, TaskFormatError, TraceError,
)
from search.models import ExitStatus

EXIT_USAGE = 2
EXIT_INFRASTRUCTURE = 3
EXIT_BACKEND = 4

STATUS_EXIT_CODES = {
    ExitStatus.COMPLETED: 0,
    ExitStatus.FRONTIER_EXHAUSTED: 0,
    ExitStatus.INFRASTRUCTURE_ERROR: EXIT_INFRASTRUCTURE,
    ExitStatus.BACKEND_ERROR: EXIT_BACKEND,
}


class SearchCommand(BaseCommand):
    """BaseCommand with domain-error to exit-code mapping"""

    def add_format_argument(self, parser, choices=('text', 'structured'), default='text'):
        parser.add_argument(
            '--format',
            choices=choices,
            default=default,
            help='Output format; "structured" prints one JSON document'
        )

    def add_backend_arguments(self, parser, planner=True, coder_choices=('scripted', 'llm', 'transcript')):
        if planner:
            parser.add_argument('--planner', choices=['rules', 'llm', 'transcript'],
                                help='Planner backend (default: rules)')
            parser.add_argument('--planner-file', type=str,
                                help='Rule table (rules) or response list (transcript)')
            parser.add_argument('--planner-model', type=str, help='Model name for --planner llm')
        parser.add_argument('--coder', choices=list(coder_choices), help='Coder backend')
        parser.add_argument('--coder-file', type=str, help='Response list for --coder transcript')
        parser.add_argument('--coder-model', type=str, help='Model name for --coder llm')

    def execute(self, *args, **options):
        try:
            return super().execute(*args, **options)
        except (TaskFormatError, LandscapeFormatError, OptionsError, TraceError) as exc:
            raise CommandError(str(exc), returncode=EXIT_USAGE) from exc
        except InfrastructureError as exc:
            raise CommandError(str(exc), returncode=EXIT_INFRASTRUCTURE) from exc
        except BackendUnavailable as exc:
            raise CommandError(str(exc), returncode=EXIT_BACKEND) from exc

    def default_run_dir(self, task_id: str, mode: str = 'tree') -> Path:
        stamp = timezone.now().strftime('%Y%m%d-%H%M%S')
        return Path(settings.HYPOTREE['RUNS_DIR']) / f'{task_id}-{mode}-{stamp}'

    def write_structured(self, document: dict) -> None:
        self.stdout.write(json.dumps(document, indent=2, sort_keys=True, default=str))

    def report_result(self, result, run_dir, fmt: str) -> None:
        """Print the outcome and fail with the status's exit code on an abort"""
        document = {
            'run_dir': str(run_dir),
            'exit_status': str(result.exit_status),
            'best_score': result.best_score,
            'best_program_id': result.best_program.program_id if result.best_program else None,
            'rounds_used': result.rounds_used,
            'error': result.error,
        }
        if fmt == 'structured':
            self.write_structured(document)
        else:
            style = self.style.SUCCESS if not result.aborted else self.style.ERROR
            self.stdout.write(style(f'Run {result.exit_status}: {run_dir}'))
            score = 'none' if result.best_score is None else f'{result.best_score:.2f}'
            self.stdout.write(f'  Best score: {score} ({document["best_program_id"] or "no program"})')
            self.stdout.write(f'  Rounds used: {result.rounds_used}')
        if result.aborted:
            raise CommandError(
                f'run aborted ({result.exit_status}): {result.error}; resume with resume_search {run_dir}',
                returncode=STATUS_EXIT_CODES[result.exit_status],
            )
