"""
Tests for the management commands: options, exit codes and outputs.
"""

import json
import tempfile
from io import StringIO
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from search.tasks import load_task
from search.trace import TraceStore

from .support import DEMO_RULES, DEMO_TASK


class CommandTestCase(SimpleTestCase):

    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.tmp = Path(tmp.name)

    def call(self, *args):
        out = StringIO()
        call_command(*args, stdout=out)
        return out.getvalue()

    def call_structured(self, *args):
        return json.loads(self.call(*args, '--format', 'structured'))

    def assertExitCode(self, code, *args):
        with self.assertRaises(CommandError) as caught:
            self.call(*args)
        self.assertEqual(caught.exception.returncode, code)
        return caught.exception

    def write_json(self, name, document):
        path = self.tmp / name
        path.write_text(json.dumps(document), encoding='utf-8')
        return path

    def demo_search(self, name='tree', budget=12):
        run_dir = self.tmp / name
        document = self.call_structured('run_search', str(DEMO_TASK), '--budget', str(budget),
                                        '--stagnation', '3', '--out', str(run_dir))
        return run_dir, document


class RunSearchCommandTests(CommandTestCase):
    """Test run_search"""

    def test_demo_run(self):
        """Test twelve rounds reach the vectorized program"""
        run_dir, document = self.demo_search()
        self.assertEqual(document['exit_status'], 'completed')
        self.assertEqual(document['rounds_used'], 12)
        self.assertEqual(document['run_dir'], str(run_dir))
        self.assertAlmostEqual(document['best_score'], 119.047619, places=5)
        self.assertEqual((run_dir / 'best' / 'program.txt').read_text(encoding='utf-8'),
                         'directives: tile_a\nlayout_swizzle\nvectorize')

    def test_text_output(self):
        """Test the human-readable summary"""
        output = self.call('run_search', str(DEMO_TASK), '--budget', '4', '--stagnation', '3',
                           '--out', str(self.tmp / 'text'))
        self.assertIn('Running synthetic-demo: budget 4, stagnation 3, planner rule-planner', output)
        self.assertIn('Best score: 62.50 (p0001)', output)
        self.assertIn('Rounds used: 4', output)

    def test_bad_task_file(self):
        """Test exit code 2 for a missing task"""
        self.assertExitCode(2, 'run_search', str(self.tmp / 'missing.json'))

    def test_config_file_precedence(self):
        """Test flags override the config file, which overrides settings"""
        config = self.write_json('options.json', {'budget': 8, 'stagnation': 2, 'seed': 5})
        run_dir = self.tmp / 'configured'
        self.call('run_search', str(DEMO_TASK), '--config', str(config), '--stagnation', '3',
                  '--out', str(run_dir))
        started = TraceStore(run_dir).events()[0]['data']
        self.assertEqual(started['config']['budget'], 8)
        self.assertEqual(started['config']['stagnation'], 3)
        self.assertEqual(started['config']['seed'], 5)
        self.assertEqual(started['config']['planner_retries'], 2)

    def test_invalid_config_file(self):
        """Test unknown keys and bad values"""
        self.assertExitCode(2, 'run_search', str(DEMO_TASK),
                            '--config', str(self.write_json('bad.json', {'bugdet': 3})))
        self.assertExitCode(2, 'run_search', str(DEMO_TASK),
                            '--config', str(self.write_json('zero.json', {'budget': 0})))

    def test_infrastructure_error(self):
        """Test exit code 3 when the bench binary is missing"""
        task = self.write_json('task.json', {
            'task_id': 'broken-bench',
            'objective': 'o',
            'file_manifest': [{'name': 'program.txt'}],
            'workloads': [{'workload_id': 'w0', 'p_ref_us': 10.0}],
            'evaluator': {'kind': 'subprocess', 'command': ['/nonexistent/bench']},
        })
        error = self.assertExitCode(3, 'run_search', str(task), '--planner-file', str(DEMO_RULES),
                                    '--out', str(self.tmp / 'broken'))
        self.assertIn('resume with resume_search', str(error))

    def test_backend_error(self):
        """Test exit code 4 when the planner transcript is empty"""
        transcript = self.write_json('planner.json', [])
        self.assertExitCode(4, 'run_search', str(DEMO_TASK), '--planner', 'transcript',
                            '--planner-file', str(transcript), '--out', str(self.tmp / 'silent'))


class ResumeSearchCommandTests(CommandTestCase):
    """Test resume_search"""

    def test_finished_run(self):
        """Test a completed run is left alone"""
        run_dir, _ = self.demo_search(budget=4)
        before = (run_dir / 'run.log').read_bytes()
        output = self.call('resume_search', str(run_dir))
        self.assertIn('already finished', output)
        self.assertEqual((run_dir / 'run.log').read_bytes(), before)

    def test_extra_budget(self):
        """Test extending a finished run"""
        run_dir, _ = self.demo_search(budget=4)
        document = self.call_structured('resume_search', str(run_dir), '--extra-budget', '4')
        self.assertEqual(document['rounds_used'], 8)
        self.assertEqual(document['exit_status'], 'completed')

    def test_extra_budget_from_config(self):
        """Test --config supplies the extra budget and the flag still wins"""
        config = self.write_json('more.json', {'extra_budget': 4})
        run_dir, _ = self.demo_search(name='from-config', budget=4)
        document = self.call_structured('resume_search', str(run_dir), '--config', str(config))
        self.assertEqual(document['rounds_used'], 8)
        run_dir, _ = self.demo_search(name='flag-wins', budget=4)
        document = self.call_structured('resume_search', str(run_dir), '--config', str(config),
                                        '--extra-budget', '2')
        self.assertEqual(document['rounds_used'], 6)
        bad = self.write_json('less.json', {'extra_budget': -1})
        self.assertExitCode(2, 'resume_search', str(run_dir), '--config', str(bad))

    def test_refusals(self):
        """Test empty directories, baseline runs and negative budgets"""
        self.assertExitCode(2, 'resume_search', str(self.tmp / 'nothing'))
        baseline = self.tmp / 'baseline'
        self.call('run_baseline', str(DEMO_TASK), '--budget', '2', '--out', str(baseline))
        self.assertExitCode(2, 'resume_search', str(baseline))
        run_dir, _ = self.demo_search(budget=2)
        self.assertExitCode(2, 'resume_search', str(run_dir), '--extra-budget', '-1')


class BaselineCommandTests(CommandTestCase):
    """Test run_baseline"""

    def test_greedy_baseline(self):
        """Test the default greedy coder on the demo task"""
        document = self.call_structured('run_baseline', str(DEMO_TASK), '--budget', '10',
                                        '--out', str(self.tmp / 'baseline'))
        self.assertEqual(document['exit_status'], 'completed')
        self.assertEqual(document['rounds_used'], 10)
        self.assertAlmostEqual(document['best_score'], 62.5)

    def test_archive_options(self):
        """Test archive flags reach the recorded config"""
        run_dir = self.tmp / 'small'
        self.call('run_baseline', str(DEMO_TASK), '--budget', '3', '--archive-capacity', '2',
                  '--parents-per-step', '1', '--out', str(run_dir))
        config = TraceStore(run_dir).events()[0]['data']['config']
        self.assertEqual(config['archive_capacity'], 2)
        self.assertEqual(config['parents_per_step'], 1)
        self.assertExitCode(2, 'run_baseline', str(DEMO_TASK), '--exploration-floor', '1.5')


class ReportCommandTests(CommandTestCase):
    """Test report_runs and export_tree"""

    def setUp(self):
        super().setUp()
        self.tree, _ = self.demo_search()
        self.baseline = self.tmp / 'baseline'
        self.call('run_baseline', str(DEMO_TASK), '--budget', '12', '--out', str(self.baseline))

    def test_report_structured(self):
        """Test curves and Fast_p rows for two runs"""
        document = self.call_structured('report_runs', str(self.tree), str(self.baseline),
                                        '--fastp', '1.0', '0.5')
        self.assertEqual(sorted(document['curves']), ['baseline', 'tree'])
        self.assertEqual(len(document['curves']['tree']), 12)
        self.assertEqual(len(document['band']), 12)
        rows = {row['run']: row for row in document['fast_p']}
        self.assertEqual(rows['tree']['fast_p'], {'0.5': 1.0, '1': 1.0})
        self.assertEqual(rows['baseline']['fast_p'], {'0.5': 1.0, '1': 0.0})
        self.assertAlmostEqual(rows['baseline']['speedups']['w0'], 0.625)

    def test_report_csv_files(self):
        """Test the CSV outputs"""
        out_dir = self.tmp / 'report'
        output = self.call('report_runs', str(self.tree), str(self.baseline), '--out-dir', str(out_dir))
        self.assertIn('# best-so-far\nround,tree,baseline,min,mean,max\n', output)
        table = (out_dir / 'fast_p.csv').read_text(encoding='utf-8').splitlines()
        self.assertEqual(table[0], 'run,program_id,best_score,fast_0.5,fast_0.8,fast_1,fast_1.2,'
                                   'speedup_w0,speedup_w1')
        self.assertTrue((out_dir / 'best_so_far.csv').exists())

    def test_report_config_file(self):
        """Test thresholds and the output directory read from --config"""
        out_dir = self.tmp / 'configured'
        config = self.write_json('report.json', {'fastp': [1.0, 0.5], 'out_dir': str(out_dir)})
        document = self.call_structured('report_runs', str(self.tree), '--config', str(config))
        self.assertEqual(document['fast_p'][0]['fast_p'], {'0.5': 1.0, '1': 1.0})
        header = (out_dir / 'fast_p.csv').read_text(encoding='utf-8').splitlines()[0]
        self.assertEqual(header, 'run,program_id,best_score,fast_0.5,fast_1,speedup_w0,speedup_w1')
        document = self.call_structured('report_runs', str(self.tree), '--config', str(config), '--fastp', '2')
        self.assertEqual(list(document['fast_p'][0]['fast_p']), ['2'])
        empty = self.write_json('empty.json', {'fastp': []})
        self.assertExitCode(2, 'report_runs', str(self.tree), '--config', str(empty))

    def test_report_missing_run(self):
        """Test a directory without a log"""
        self.assertExitCode(2, 'report_runs', str(self.tmp / 'nothing'))

    def test_export_tree(self):
        """Test DOT on stdout and JSON to a file"""
        dot = self.call('export_tree', str(self.tree))
        self.assertTrue(dot.startswith('digraph search_tree {'))
        out = self.tmp / 'tree.json'
        self.call('export_tree', str(self.tree), '--format', 'structured', '--out', str(out))
        document = json.loads(out.read_text(encoding='utf-8'))
        self.assertEqual(document['round'], 12)
        self.assertExitCode(2, 'export_tree', str(self.baseline))


class MakeLandscapeCommandTests(CommandTestCase):
    """Test make_landscape"""

    def generate(self, name, *extra):
        out = self.tmp / name / 'land.json'
        task = self.tmp / name / 'task.json'
        self.call('make_landscape', '--directives', '5', '--seed', '1', '--out', str(out),
                  '--task-out', str(task), *extra)
        return out, task

    def test_reproducible(self):
        """Test the same seed writes the same landscape and oracle"""
        first, _ = self.generate('a')
        second, _ = self.generate('b')
        self.assertEqual(first.read_bytes(), second.read_bytes())
        self.assertEqual((first.parent / 'land.oracle.json').read_bytes(),
                         (second.parent / 'land.oracle.json').read_bytes())

    def test_task_file_runs(self):
        """Test the generated task loads and searches"""
        landscape, task_path = self.generate('run')
        task = load_task(task_path)
        self.assertEqual(task.task_id, 'synthetic-5-1')
        self.assertEqual(task.evaluator_config.landscape_file, landscape.resolve())

        generated = json.loads(landscape.read_text(encoding='utf-8'))
        prerequisites = generated.get('prerequisites', {})
        first = next(d for d in generated['directives'] if d not in prerequisites)
        insert = [{'op': 'insert', 'parent': 'n0000', 'intent': f'add {first}', 'priority': 0.5}]
        transcript = self.write_json('planner.json', [
            f'```json\n{json.dumps(insert)}\n```',
            '```json\n[]\n```',
            '```json\n[]\n```',
        ])
        document = self.call_structured('run_search', str(task_path), '--budget', '6', '--stagnation', '2',
                                        '--planner', 'transcript', '--planner-file', str(transcript),
                                        '--out', str(self.tmp / 'gen-run'))
        self.assertEqual(document['exit_status'], 'frontier-exhausted')
        self.assertEqual(document['rounds_used'], 3)
        self.assertGreater(document['best_score'], 0.0)

    def test_directive_bounds(self):
        """Test landscapes too large to enumerate"""
        self.assertExitCode(2, 'make_landscape', '--directives', '13', '--out', str(self.tmp / 'big.json'))
