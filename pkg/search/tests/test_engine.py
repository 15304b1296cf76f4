"""
Tests for the search loop: selection, refinement, planning and run endings.
"""

import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from search.coder import Coder, ScriptedCoderBackend
from search.engine import EngineConfig, SearchEngine, round_seed, summarize_observation
from search.evaluators import build_evaluator
from search.exceptions import InfrastructureError, TraceError
from search.landscape import enumerate_optimum, parse_program_text
from search.llm import TranscriptBackend
from search.models import ROOT_ID, ExitStatus, Insert, NodeStatus, Observation, Update, WorkloadResult, WorkloadStatus
from search.planner import FALLBACK_INTENT, Planner, RulePlanner
from search.reports import best_so_far_curve
from search.trace import apply_event

from .support import (
    DEMO_RULES, ScoreSequenceEvaluator, StubPlanner, demo_engine, demo_task, frozen_store, single_workload_task,
)


class EngineTestCase(SimpleTestCase):

    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.tmp = Path(tmp.name)

    def stub_engine(self, planner, evaluator, budget=10, stagnation=3, coder=None):
        return SearchEngine(
            single_workload_task(),
            EngineConfig(budget=budget, stagnation=stagnation, check_invariants=True),
            planner,
            coder or Coder(ScriptedCoderBackend()),
            evaluator,
            frozen_store(self.tmp / 'run'),
        )

    def events(self, engine, kind=None):
        return [e for e in engine.trace.events() if kind is None or e['type'] == kind]


class DemoRunTests(EngineTestCase):
    """Test the rule planner on the shipped landscape"""

    def setUp(self):
        super().setUp()
        self.task = demo_task()
        self.engine = demo_engine(self.tmp / 'run', task=self.task)
        self.result = self.engine.run()

    def test_finds_joint_optimum(self):
        """Test B=40, K=3 reaches the enumerated optimum"""
        evaluator = build_evaluator(self.task)
        optimum = enumerate_optimum(evaluator.landscape, self.task.workloads)
        self.assertEqual(self.result.exit_status, ExitStatus.COMPLETED)
        self.assertEqual(self.result.rounds_used, 40)
        self.assertAlmostEqual(self.result.best_score, optimum['score'], places=9)
        directives = parse_program_text(self.result.best_program.files['program.txt'])
        self.assertEqual(set(directives), set(optimum['directives']))

    def test_worse_step_is_kept_and_extended(self):
        """Test the enabler closes below its parent and its child beats both"""
        closed = {e['data']['node_id']: e['data']['best_score'] for e in self.events(self.engine, 'NodeClosed')}
        nodes = self.result.state.nodes
        self.assertEqual(nodes['n0004'].intent, 'add layout_swizzle')
        self.assertEqual(nodes['n0004'].parent_node_id, 'n0001')
        self.assertAlmostEqual(closed['n0001'], 62.5)
        self.assertAlmostEqual(closed['n0004'], 59.52381, places=4)
        self.assertEqual(nodes['n0007'].intent, 'add vectorize')
        self.assertEqual(nodes['n0007'].parent_node_id, 'n0004')
        self.assertAlmostEqual(closed['n0007'], 119.047619, places=5)

    def test_selection_order(self):
        """Test the first three selections follow priority"""
        selected = [e['data']['node_id'] for e in self.events(self.engine, 'ActionSelected')]
        self.assertEqual(selected[:3], ['n0001', 'n0004', 'n0007'])
        self.assertEqual(len(selected), 10)

    def test_budget_ledger(self):
        """Test one round per evaluation and a consistent final state"""
        rounds = [e['round'] for e in self.events(self.engine, 'CandidateEvaluated')]
        self.assertEqual(rounds, list(range(1, 41)))
        state = self.result.state
        self.assertEqual(state.budget_remaining, 0)
        self.assertEqual(state.check_invariants(), [])
        closed = [n for n in state.nodes.values() if n.status == NodeStatus.CLOSED and not n.is_root]
        self.assertEqual(len(closed), 10)
        self.assertEqual(sum(n.samples_evaluated for n in closed), 40)

    def test_best_score_moves_at_closure(self):
        """Test the state's best waits for NodeClosed while the curve follows each evaluation"""
        events = self.events(self.engine)
        first = next(i for i, e in enumerate(events) if e['type'] == 'CandidateEvaluated')
        state = None
        for event in events[:first + 1]:
            state = apply_event(state, event)
        self.assertEqual(state.best_score, -math.inf)
        self.assertGreater(best_so_far_curve(events)[0][1], 0.0)
        closed = next(i for i, e in enumerate(events) if e['type'] == 'NodeClosed')
        for event in events[first + 1:closed + 1]:
            state = apply_event(state, event)
        self.assertAlmostEqual(state.best_score, events[closed]['data']['best_score'])

    def test_run_directory(self):
        """Test the summary, best files, snapshots and released lock"""
        trace = self.engine.trace
        summary = trace.read_summary()
        self.assertEqual(summary['exit_status'], ExitStatus.COMPLETED)
        self.assertEqual(summary['best_program_id'], self.result.best_program.program_id)
        self.assertTrue((trace.run_dir / 'best' / 'program.txt').exists())
        self.assertIsNotNone(trace.latest_snapshot())
        self.assertFalse(trace.lock_path.exists())
        self.assertEqual(self.events(self.engine)[-1]['type'], 'RunEnded')

    def test_reruns_are_byte_identical(self):
        """Test a second run with the same seed writes the same log"""
        other = demo_engine(self.tmp / 'again', task=self.task)
        other.run()
        self.assertEqual(other.trace.log_path.read_bytes(), self.engine.trace.log_path.read_bytes())

    def test_refuses_existing_run(self):
        """Test run() on a directory that already holds a log"""
        with self.assertRaises(TraceError):
            demo_engine(self.tmp / 'run', task=self.task).run()


class StagnationTests(EngineTestCase):
    """Test the refinement stopping rule"""

    def one_action(self):
        return StubPlanner(init=[[Insert(ROOT_ID, 'try it', 0.5)]])

    def test_counter_resets_on_improvement(self):
        """Test scores 10, 12, 11, 11, 11 with K=3 take five evaluations"""
        evaluator = ScoreSequenceEvaluator([10, 12, 11, 11, 11, 50])
        result = self.stub_engine(self.one_action(), evaluator).run()
        self.assertEqual(evaluator.calls, 5)
        self.assertEqual(result.rounds_used, 5)
        self.assertAlmostEqual(result.best_score, 12.0)
        self.assertEqual(result.state.nodes['n0001'].samples_evaluated, 5)
        self.assertEqual(result.exit_status, ExitStatus.FRONTIER_EXHAUSTED)

    def test_wrong_answers_stop_after_k_plus_one(self):
        """Test an all-incorrect refinement"""
        evaluator = ScoreSequenceEvaluator([0])
        result = self.stub_engine(self.one_action(), evaluator).run()
        self.assertEqual(evaluator.calls, 4)
        self.assertEqual(result.best_score, 0.0)

    def test_budget_cuts_refinement(self):
        """Test B=2 closes the action mid-refinement"""
        evaluator = ScoreSequenceEvaluator([10, 12, 14])
        engine = self.stub_engine(self.one_action(), evaluator, budget=2)
        result = engine.run()
        self.assertEqual(evaluator.calls, 2)
        self.assertEqual(result.exit_status, ExitStatus.COMPLETED)
        closed = self.events(engine, 'NodeClosed')[0]['data']
        self.assertEqual(closed['exit_reason'], 'budget_exhausted')
        self.assertEqual(len(self.events(engine, 'PlannerExchange')), 1)

    def test_single_evaluation_budget(self):
        """Test B=1 with an empty frontier afterwards skips recovery"""
        planner = self.one_action()
        evaluator = ScoreSequenceEvaluator([10, 20])
        result = self.stub_engine(planner, evaluator, budget=1).run()
        self.assertEqual(evaluator.calls, 1)
        self.assertEqual(result.rounds_used, 1)
        closed = [n for n in result.state.nodes.values() if n.status == NodeStatus.CLOSED and not n.is_root]
        self.assertEqual(len(closed), 1)
        self.assertEqual(len(planner.requests), 1)
        self.assertEqual(result.exit_status, ExitStatus.COMPLETED)

    def test_generation_failures_use_no_budget(self):
        """Test failed generations count toward stagnation only"""
        planner = self.one_action()
        evaluator = ScoreSequenceEvaluator([10])
        coder = Coder(TranscriptBackend(['no files here'] * 6))
        engine = self.stub_engine(planner, evaluator, coder=coder)
        result = engine.run()
        self.assertEqual(evaluator.calls, 0)
        self.assertEqual(result.rounds_used, 0)
        self.assertEqual(len(self.events(engine, 'GenerationFailed')), 3)
        closed = self.events(engine, 'NodeClosed')[0]['data']
        self.assertEqual(closed['generation_failures'], 3)
        self.assertIsNone(closed['best_program_id'])
        trajectory = planner.requests[1].last_trajectory
        self.assertIsNone(trajectory.best_score)
        self.assertIn('no candidate was evaluated', trajectory.render())
        self.assertIsNone(result.best_program)


class PlanningTests(EngineTestCase):
    """Test planner steps inside the loop"""

    def test_fallback_action(self):
        """Test a planner that never yields an edit block"""
        backend = TranscriptBackend(['prose'] * 3 + ['```json\n[]\n```'] * 2)
        task = demo_task()
        engine = SearchEngine(
            task, EngineConfig(budget=40, stagnation=3), Planner(backend, retries=2),
            Coder(ScriptedCoderBackend()), build_evaluator(task), frozen_store(self.tmp / 'run'),
        )
        result = engine.run()
        fallback = [e['data'] for e in self.events(engine, 'EditApplied') if e['data'].get('fallback')]
        self.assertEqual(len(fallback), 1)
        self.assertEqual(result.state.nodes['n0001'].intent, FALLBACK_INTENT)
        self.assertEqual(result.rounds_used, 4)
        self.assertAlmostEqual(result.best_score, 50.0)
        self.assertEqual(result.exit_status, ExitStatus.FRONTIER_EXHAUSTED)

    def test_rejected_edit_gets_one_correction(self):
        """Test an update on a closed node is sent back once"""
        planner = StubPlanner(
            init=[[Insert(ROOT_ID, 'a', 0.5)]],
            evolve=[[Update('n0001', 0.9, 'again')]],
            correction=[[Insert('n0001', 'b', 0.4)]],
        )
        engine = self.stub_engine(planner, ScoreSequenceEvaluator([10]), stagnation=1)
        result = engine.run()
        events = self.events(engine)
        rejected = next(i for i, e in enumerate(events) if e['type'] == 'EditApplied' and not e['data']['accepted'])
        self.assertIn('update needs an open node', events[rejected]['data']['reason'])
        self.assertEqual(events[rejected + 1]['type'], 'PlannerExchange')
        self.assertEqual(events[rejected + 1]['data']['phase'], 'correction')
        correction_request = planner.requests[2]
        self.assertIn('update needs an open node', correction_request.rejected[0])
        self.assertEqual(result.state.nodes['n0002'].parent_node_id, 'n0001')
        self.assertEqual(result.state.nodes['n0002'].status, NodeStatus.CLOSED)

    def test_recovery_refills_frontier(self):
        """Test recovery inserts keep the run going"""
        planner = StubPlanner(
            init=[[Insert(ROOT_ID, 'a', 0.5)]],
            recovery=[[Insert(ROOT_ID, 'b', 0.3)]],
        )
        evaluator = ScoreSequenceEvaluator([10])
        result = self.stub_engine(planner, evaluator, stagnation=1).run()
        self.assertEqual(result.state.nodes['n0002'].status, NodeStatus.CLOSED)
        self.assertEqual(evaluator.calls, 4)
        self.assertEqual(result.exit_status, ExitStatus.FRONTIER_EXHAUSTED)


class FlakyCoderBackend:
    """Scripted coder that answers with no file block at the given rate"""

    name = 'flaky-coder'

    def __init__(self, rng, failure_rate):
        self.inner = ScriptedCoderBackend()
        self.rng = rng
        self.failure_rate = failure_rate

    def complete(self, messages, temperature=None, context=None):
        if self.rng.random() < self.failure_rate:
            return 'nothing to show yet'
        return self.inner.complete(messages, temperature, context)


class FlakyEvaluator:
    """Turns some evaluations into wrong answers"""

    def __init__(self, inner, rng, failure_rate):
        self.inner = inner
        self.kind = inner.kind
        self.rng = rng
        self.failure_rate = failure_rate

    def evaluate(self, task, program):
        observation = self.inner.evaluate(task, program)
        if self.rng.random() < self.failure_rate:
            return Observation([
                WorkloadResult(r.workload_id, WorkloadStatus.WRONG_ANSWER, log_excerpt='mismatch')
                for r in observation.workload_results
            ])
        return observation


class BudgetAccountingTests(EngineTestCase):
    """Test the budget ledger over many seeded configurations"""

    def test_random_configurations(self):
        """Test evaluations, rounds and remaining budget always agree"""
        task = demo_task()
        rng = np.random.default_rng(2024)
        for index in range(100):
            budget = int(rng.integers(1, 31))
            stagnation = int(rng.integers(1, 6))
            engine = SearchEngine(
                task,
                EngineConfig(budget=budget, stagnation=stagnation, seed=index, check_invariants=True),
                RulePlanner.from_file(DEMO_RULES),
                Coder(FlakyCoderBackend(rng, float(rng.choice([0.0, 0.3, 0.6])))),
                FlakyEvaluator(build_evaluator(task), rng, float(rng.choice([0.0, 0.25, 0.5]))),
                frozen_store(self.tmp / f'run{index}'),
            )
            result = engine.run()
            state = result.state
            evaluated = self.events(engine, 'CandidateEvaluated')
            context = f'config {index}: B={budget} K={stagnation}'
            self.assertIn(result.exit_status, (ExitStatus.COMPLETED, ExitStatus.FRONTIER_EXHAUSTED), context)
            self.assertGreaterEqual(state.budget_remaining, 0, context)
            self.assertEqual(len(evaluated), budget - state.budget_remaining, context)
            self.assertEqual(len(evaluated), result.rounds_used, context)
            self.assertEqual([e['round'] for e in evaluated], list(range(1, len(evaluated) + 1)), context)
            self.assertEqual(state.check_invariants(), [], context)
            if result.exit_status == ExitStatus.COMPLETED:
                self.assertEqual(state.budget_remaining, 0, context)
            if evaluated:
                top = max(e['data']['scores']['aggregate'] for e in evaluated)
                self.assertAlmostEqual(result.best_score, top, msg=context)


class AbortTests(EngineTestCase):
    """Test runs ending on infrastructure and backend failures"""

    def test_infrastructure_error(self):
        """Test a broken evaluator aborts without spending budget"""
        class BrokenEvaluator:
            kind = 'broken'

            def evaluate(self, task, program):
                raise InfrastructureError('bench binary not found')

        engine = self.stub_engine(StubPlanner(init=[[Insert(ROOT_ID, 'a', 0.5)]]), BrokenEvaluator())
        result = engine.run()
        self.assertEqual(result.exit_status, ExitStatus.INFRASTRUCTURE_ERROR)
        self.assertTrue(result.aborted)
        self.assertIn('bench binary not found', result.error)
        self.assertEqual(result.rounds_used, 0)
        self.assertEqual(self.events(engine)[-1]['type'], 'RunEnded')
        self.assertFalse(engine.trace.lock_path.exists())

    def test_backend_error(self):
        """Test an exhausted planner transcript"""
        engine = self.stub_engine(Planner(TranscriptBackend([])), ScoreSequenceEvaluator([10]))
        result = engine.run()
        self.assertEqual(result.exit_status, ExitStatus.BACKEND_ERROR)
        self.assertIn('exhausted', result.error)


class HelperTests(SimpleTestCase):
    """Test config validation, seeds and observation excerpts"""

    def test_config_bounds(self):
        """Test budget and stagnation lower bounds"""
        with self.assertRaises(ValueError):
            EngineConfig(budget=0)
        with self.assertRaises(ValueError):
            EngineConfig(stagnation=0)

    def test_round_seed(self):
        """Test per-round seeds are stable and distinct"""
        self.assertEqual(round_seed(0, 5, 1), round_seed(0, 5, 1))
        self.assertNotEqual(round_seed(0, 5, 1), round_seed(0, 6, 1))
        self.assertNotEqual(round_seed(0, 5, 1), round_seed(1, 5, 1))

    def test_excerpt_is_bounded(self):
        """Test the observation summary respects its byte limit"""
        obs = Observation(
            [WorkloadResult('w0', WorkloadStatus.PASS, latency_us=12.5),
             WorkloadResult('w1', WorkloadStatus.RUNTIME_ERROR, log_excerpt='launch failed\nillegal address')],
            metadata='x' * 5000,
        )
        text = summarize_observation(obs, 200)
        self.assertLessEqual(len(text.encode('utf-8')), 200)
        self.assertTrue(text.startswith('correct: no\nw0: pass 12.500 us\nw1: runtime-error: illegal address'))
