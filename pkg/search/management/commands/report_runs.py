"""
Django management command to report on one or more runs side by side:
best-so-far curves (with a min/mean/max band across runs), the Fast_p
table and per-workload speedups of each run's best program.

Usage:
    python manage.py report_runs runs/a runs/b runs/c --fastp 0.5 1.0 1.5
    python manage.py report_runs runs/a --format structured
    python manage.py report_runs runs/a runs/b --config report.json
"""

from pathlib import Path

from django.core.management.base import CommandError

from search.backends import resolve_options
from search.exceptions import EmptyInput
from search.management.base import EXIT_USAGE, SearchCommand
from search.reports import best_so_far_curve, curve_band, curves_csv, fast_p_csv, fast_p_table
from search.trace import TraceStore


class Command(SearchCommand):
    help = 'Best-so-far curves, Fast_p table and speedups for one or more runs'

    def add_arguments(self, parser):
        parser.add_argument('run_dirs', nargs='+', type=str, help='Run directories')
        parser.add_argument('--fastp', nargs='+', type=float,
                            help='Speedup thresholds (default from HYPOTREE FASTP_THRESHOLDS)')
        parser.add_argument('--out-dir', type=str,
                            help='Also write best_so_far.csv and fast_p.csv here')
        parser.add_argument('--config', type=str, help='JSON file with fastp and out_dir values')
        self.add_format_argument(parser, choices=('csv', 'structured'), default='csv')

    def handle(self, *args, **options):
        resolved = resolve_options(options, options.get('config'))
        thresholds = resolved['fastp']
        runs = []
        for run_dir in options['run_dirs']:
            store = TraceStore(run_dir)
            if not store.exists():
                raise CommandError(f'{run_dir} has no run.log', returncode=EXIT_USAGE)
            runs.append((self._label(run_dir, options['run_dirs']), store.events()))

        try:
            curves = {label: best_so_far_curve(events) for label, events in runs}
            rows = fast_p_table(runs, thresholds)
        except EmptyInput as exc:
            raise CommandError(f'nothing to report: {exc}', returncode=EXIT_USAGE) from exc

        curve_text, table_text = curves_csv(curves), fast_p_csv(rows)
        if resolved['out_dir']:
            out_dir = Path(resolved['out_dir'])
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / 'best_so_far.csv').write_text(curve_text, encoding='utf-8')
            (out_dir / 'fast_p.csv').write_text(table_text, encoding='utf-8')

        if options['format'] == 'structured':
            self.write_structured({
                'curves': {label: [list(point) for point in curve] for label, curve in curves.items()},
                'band': [list(point) for point in curve_band(list(curves.values()))],
                'fast_p': [
                    {**row, 'fast_p': {f'{t:g}': v for t, v in row['fast_p'].items()}}
                    for row in rows
                ],
            })
            return
        self.stdout.write('# best-so-far')
        self.stdout.write(curve_text, ending='')
        self.stdout.write('# fast_p')
        self.stdout.write(table_text, ending='')

    @staticmethod
    def _label(run_dir: str, all_dirs) -> str:
        name = Path(run_dir).name
        if sum(1 for d in all_dirs if Path(d).name == name) > 1:
            return str(run_dir)
        return name
