"""
Tests for the synthetic and subprocess evaluators.
"""

import sys
from dataclasses import replace
from pathlib import Path

from django.test import SimpleTestCase

from search.evaluators import SubprocessEvaluator, SyntheticEvaluator, build_evaluator, parse_report
from search.exceptions import InfrastructureError, ManifestMismatch
from search.landscape import landscape_from_data
from search.models import Program, WorkloadStatus
from search.tasks import load_task, score, task_from_data

FIXTURES = Path(__file__).resolve().parent.parent / 'fixtures'
FAKE_BENCH = Path(__file__).resolve().parent / 'fixtures' / 'fake_bench.py'


def directive_program(text, program_id='p0001'):
    return Program(program_id=program_id, files={'program.txt': text}, round=1)


class SyntheticEvaluatorTests(SimpleTestCase):
    """Test directive programs on the shipped landscape"""

    def setUp(self):
        self.task = load_task(FIXTURES / 'synthetic_demo' / 'task.json')
        self.evaluator = build_evaluator(self.task)

    def test_builds_from_task(self):
        """Test the task's evaluator config selects the synthetic backend"""
        self.assertIsInstance(self.evaluator, SyntheticEvaluator)
        with self.assertRaises(InfrastructureError):
            build_evaluator(self.task, 'subprocess')

    def test_two_step_program_passes(self):
        """Test layout_swizzle plus vectorize on both workloads"""
        obs = self.evaluator.evaluate(self.task, directive_program('directives: layout_swizzle\nvectorize'))
        self.assertTrue(obs.correct)
        self.assertEqual([r.status for r in obs.workload_results], [WorkloadStatus.PASS] * 2)
        self.assertAlmostEqual(obs.workload_results[0].latency_us, 525.0)
        self.assertAlmostEqual(obs.workload_results[1].latency_us, 1050.0)
        self.assertAlmostEqual(score(obs, self.task).aggregate, 95.238095, places=5)
        self.assertIn('w0: 525.000 us', obs.metadata)

    def test_syntax_error(self):
        """Test a program without the header fails to compile everywhere"""
        obs = self.evaluator.evaluate(self.task, directive_program('tile_a'))
        self.assertFalse(obs.correct)
        self.assertEqual({r.status for r in obs.workload_results}, {WorkloadStatus.COMPILE_ERROR})
        self.assertIn('syntax error', obs.metadata)

    def test_unmet_prerequisite(self):
        """Test vectorize alone is a compile error"""
        obs = self.evaluator.evaluate(self.task, directive_program('directives: vectorize'))
        self.assertEqual({r.status for r in obs.workload_results}, {WorkloadStatus.COMPILE_ERROR})
        self.assertEqual(score(obs, self.task).aggregate, 0.0)

    def test_conflicts_are_wrong_answers(self):
        """Test conflicting directives compile but fail correctness"""
        landscape = landscape_from_data({
            'format_version': 1,
            'directives': ['a', 'b'],
            'base_us': {'w0': 100.0, 'w1': 100.0},
            'factors': {'a': 0.5, 'b': 0.5},
            'conflicts': [['a', 'b']],
        })
        obs = SyntheticEvaluator(landscape).evaluate(self.task, directive_program('directives: a\nb'))
        self.assertEqual({r.status for r in obs.workload_results}, {WorkloadStatus.WRONG_ANSWER})
        self.assertIn('conflicting directives', obs.workload_results[0].log_excerpt)

    def test_jitter_is_deterministic(self):
        """Test seeded noise stays within its amplitude and repeats"""
        landscape = landscape_from_data({
            'format_version': 1,
            'directives': ['a'],
            'base_us': {'w0': 100.0, 'w1': 200.0},
            'factors': {'a': 0.5},
            'jitter': 0.1,
        })
        first = SyntheticEvaluator(landscape, seed=3).evaluate(self.task, directive_program('directives: a'))
        second = SyntheticEvaluator(landscape, seed=3).evaluate(self.task, directive_program('directives: a'))
        self.assertEqual(first, second)
        self.assertTrue(45.0 <= first.workload_results[0].latency_us <= 55.0)

    def test_manifest_mismatch_raises(self):
        """Test a program with the wrong files"""
        program = Program(program_id='p', files={'other.txt': 'directives:'})
        with self.assertRaises(ManifestMismatch):
            self.evaluator.evaluate(self.task, program)

    def test_metadata_is_bounded(self):
        """Test the metadata limit keeps the tail"""
        evaluator = SyntheticEvaluator(self.evaluator.landscape, metadata_limit_bytes=40)
        obs = evaluator.evaluate(self.task, directive_program('directives: tile_a'))
        self.assertLessEqual(len(obs.metadata.encode('utf-8')), 40)
        self.assertTrue(obs.metadata.endswith('us'))


class SubprocessEvaluatorTests(SimpleTestCase):
    """Test the compile-run-benchmark harness against a stand-in bench script"""

    def make_task(self, **evaluator):
        return task_from_data({
            'task_id': 'bench',
            'objective': 'o',
            'file_manifest': [{'name': 'plan.txt'}],
            'workloads': [
                {'workload_id': 'small', 'p_ref_us': 10.0},
                {'workload_id': 'large', 'p_ref_us': 40.0},
            ],
            'evaluator': {
                'kind': 'subprocess',
                'command': [sys.executable, str(FAKE_BENCH), '{workspace}', '{task_file}'],
                **evaluator,
            },
        })

    def evaluate(self, text, **evaluator):
        task = self.make_task(**evaluator)
        program = Program(program_id='p0001', files={'plan.txt': text})
        return task, build_evaluator(task).evaluate(task, program)

    def test_pass_takes_median_latency(self):
        """Test the median of the reported samples"""
        task, obs = self.evaluate('5')
        self.assertTrue(obs.correct)
        self.assertEqual([r.latency_us for r in obs.workload_results], [10.0, 10.0])
        self.assertEqual(score(obs, task).per_workload, (100.0, 400.0))
        self.assertIn('max abs error', obs.metadata)

    def test_reported_failure(self):
        """Test a failing report with a non-zero exit status"""
        _, obs = self.evaluate('error compile-error')
        self.assertFalse(obs.correct)
        self.assertEqual({r.status for r in obs.workload_results}, {WorkloadStatus.COMPILE_ERROR})
        self.assertIn('nvcc exited', obs.metadata)

    def test_timeout(self):
        """Test a hanging harness becomes a timeout observation"""
        _, obs = self.evaluate('hang', compile_timeout_s=0.5, run_timeout_s=0.5)
        self.assertEqual({r.status for r in obs.workload_results}, {WorkloadStatus.TIMEOUT})

    def test_no_report_is_infrastructure_error(self):
        """Test a harness that prints no report"""
        with self.assertRaises(InfrastructureError):
            self.evaluate('garbage')

    def test_missing_binary(self):
        """Test an evaluator command that does not exist"""
        task = self.make_task()
        evaluator = SubprocessEvaluator(replace(task.evaluator_config, command=('/nonexistent/bench',)))
        with self.assertRaises(InfrastructureError):
            evaluator.evaluate(task, Program(program_id='p', files={'plan.txt': '1'}))

    def test_independent_workloads(self):
        """Test one child per workload with merged results"""
        command = [sys.executable, str(FAKE_BENCH), '{workspace}', '{task_file}', '{workload}']
        task, obs = self.evaluate('4', command=command, workloads_independent=True)
        self.assertTrue(obs.correct)
        self.assertEqual([r.workload_id for r in obs.workload_results], ['small', 'large'])
        self.assertEqual([r.latency_us for r in obs.workload_results], [8.0, 8.0])

    def test_argv_appends_paths(self):
        """Test commands without placeholders get the workspace and task file"""
        task = self.make_task(command=['bench'])
        argv = SubprocessEvaluator(task.evaluator_config).build_argv(Path('/ws'), Path('/task.json'))
        self.assertEqual(argv, ['bench', '/ws', '/task.json'])


class ReportParsingTests(SimpleTestCase):
    """Test JSON report extraction from child stdout"""

    def test_last_json_line(self):
        """Test progress output before the report"""
        stdout = 'compiling\n{"workloads": [{"workload_id": "w", "status": "pass", "latency_us": 3.0}]}\n'
        report = parse_report(stdout)
        self.assertEqual(report['workloads'][0]['latency_us'], 3.0)
        self.assertEqual(report['global_log'], '')

    def test_invalid_reports(self):
        """Test unparsable and schema-violating stdout"""
        self.assertIsNone(parse_report('no json here'))
        self.assertIsNone(parse_report('{"workloads": [{"workload_id": "w", "status": "pass"}]}'))
        self.assertIsNone(parse_report('{"workloads": [{"workload_id": "w", "status": "exploded"}]}'))
