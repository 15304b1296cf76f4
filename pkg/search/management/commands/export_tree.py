"""
Django management command to export a run's search tree.

Usage:
    python manage.py export_tree runs/demo > tree.dot && dot -Tpng -O tree.dot
    python manage.py export_tree runs/demo --format structured --out tree.json
"""

from pathlib import Path

from django.core.management.base import CommandError

from search.management.base import EXIT_USAGE, SearchCommand
from search.reports import export_tree
from search.trace import TraceStore


class Command(SearchCommand):
    help = 'Export the search tree of a run as Graphviz DOT or JSON'

    def add_arguments(self, parser):
        parser.add_argument('run_dir', type=str, help='Run directory holding run.log')
        parser.add_argument('--out', type=str, help='Write to this file instead of stdout')
        self.add_format_argument(parser, choices=('graph-dot', 'structured'), default='graph-dot')

    def handle(self, *args, **options):
        store = TraceStore(options['run_dir'])
        if not store.exists():
            raise CommandError(f'{options["run_dir"]} has no run.log', returncode=EXIT_USAGE)
        document = export_tree(store.events(), options['format'])
        if options.get('out'):
            Path(options['out']).write_text(document, encoding='utf-8')
            self.stdout.write(self.style.SUCCESS(f'Wrote {options["out"]}'))
        else:
            self.stdout.write(document, ending='')
