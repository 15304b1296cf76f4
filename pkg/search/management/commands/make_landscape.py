"""
Django management command to generate a seeded synthetic landscape, its
exhaustive-enumeration optimum (sidecar file) and optionally a task file
that uses it.

Usage:
    python manage.py make_landscape --directives 5 --seed 1 --out /tmp/land.json --task-out /tmp/task.json
"""

import os
from pathlib import Path

from search.exceptions import OptionsError
from search.landscape import MAX_ENUMERABLE, dump_document, enumerate_optimum, generate_landscape, landscape_from_data
from search.management.base import SearchCommand
from search.tasks import Workload

PROGRAM_FILE = 'program.txt'


def reference_workloads(document: dict) -> list:
    """Reference latency is half the base latency of each workload"""
    return [
        Workload(workload_id=w, p_ref_us=round(base / 2.0, 3))
        for w, base in sorted(document['base_us'].items())
    ]


def task_document(document: dict, landscape_path: Path, task_path: Path, seed: int) -> dict:
    return {
        'task_id': f'synthetic-{len(document["directives"])}-{seed}',
        'objective': 'Choose the set of optimization directives with the lowest latency on every workload.',
        'reference_impl': 'directives:',
        'instructions': (
            f'{PROGRAM_FILE} starts with "directives:" followed by one directive per line. '
            f'Known directives: {", ".join(document["directives"])}.'
        ),
        'target': 'the synthetic landscape',
        'file_manifest': [{'name': PROGRAM_FILE, 'description': 'directive list'}],
        'workloads': [
            {'workload_id': w.workload_id, 'parameters': {}, 'p_ref_us': w.p_ref_us}
            for w in reference_workloads(document)
        ],
        'evaluator': {
            'kind': 'synthetic',
            'landscape_file': os.path.relpath(landscape_path.resolve(), task_path.resolve().parent),
            'determinism_seed': seed,
        },
    }


class Command(SearchCommand):
    help = 'Generate a seeded synthetic landscape with its enumeration-oracle optimum'

    def add_arguments(self, parser):
        parser.add_argument('--directives', type=int, default=5,
                            help=f'Number of directives (2..{MAX_ENUMERABLE})')
        parser.add_argument('--seed', type=int, default=0, help='Generator seed')
        parser.add_argument('--workloads', type=int, default=2, help='Number of workloads')
        parser.add_argument('--out', type=str, required=True, help='Landscape file to write')
        parser.add_argument('--task-out', type=str, help='Also write a task file using the landscape')
        self.add_format_argument(parser)

    def handle(self, *args, **options):
        if not 2 <= options['directives'] <= MAX_ENUMERABLE:
            raise OptionsError(f'--directives must be between 2 and {MAX_ENUMERABLE}')
        if options['workloads'] < 1:
            raise OptionsError('--workloads must be at least 1')

        document = generate_landscape(options['directives'], options['seed'], options['workloads'])
        landscape = landscape_from_data(document)
        workloads = reference_workloads(document)
        optimum = enumerate_optimum(landscape, workloads)

        out = Path(options['out'])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(dump_document(document), encoding='utf-8')
        sidecar = out.with_name(f'{out.stem}.oracle.json')
        sidecar.write_text(dump_document({
            'seed': options['seed'],
            'workloads': [{'workload_id': w.workload_id, 'p_ref_us': w.p_ref_us} for w in workloads],
            'optimum': optimum,
        }), encoding='utf-8')

        written = {'landscape': str(out), 'oracle': str(sidecar)}
        if options.get('task_out'):
            task_path = Path(options['task_out'])
            task_path.parent.mkdir(parents=True, exist_ok=True)
            task_path.write_text(
                dump_document(task_document(document, out, task_path, options['seed'])), encoding='utf-8')
            written['task'] = str(task_path)

        if options['format'] == 'structured':
            self.write_structured({**written, 'optimum': optimum})
            return
        for kind, path in written.items():
            self.stdout.write(self.style.SUCCESS(f'Wrote {kind}: {path}'))
        self.stdout.write(
            f'  Optimum: {", ".join(optimum["directives"]) or "(none)"} scoring {optimum["score"]:.4f}'
        )
