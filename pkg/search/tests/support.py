"""
Shared test doubles: a frozen clock, scripted planners and evaluators.
"""

from pathlib import Path

from search.coder import Coder, ScriptedCoderBackend
from search.engine import EngineConfig, SearchEngine
from search.evaluators import build_evaluator
from search.models import Observation, WorkloadResult, WorkloadStatus
from search.planner import PlannerResponse, RulePlanner
from search.tasks import load_task, task_from_data
from search.trace import TraceStore

FIXTURES = Path(__file__).resolve().parent.parent / 'fixtures'
DEMO_DIR = FIXTURES / 'synthetic_demo'
DEMO_TASK = DEMO_DIR / 'task.json'
DEMO_RULES = DEMO_DIR / 'planner_rules.json'
FROZEN_TS = '2026-01-01T00:00:00+00:00'


def frozen_store(run_dir) -> TraceStore:
    return TraceStore(run_dir, clock=lambda: FROZEN_TS, durable=False)


def demo_task():
    return load_task(DEMO_TASK)


def demo_engine(run_dir, budget=40, stagnation=3, evaluator=None, task=None) -> SearchEngine:
    task = task or demo_task()
    return SearchEngine(
        task,
        EngineConfig(budget=budget, stagnation=stagnation, check_invariants=True),
        RulePlanner.from_file(DEMO_RULES),
        Coder(ScriptedCoderBackend()),
        evaluator or build_evaluator(task),
        frozen_store(run_dir),
    )


def single_workload_task():
    """One workload at p_ref 100 us, so a latency of 10000/s scores s"""
    return task_from_data({
        'task_id': 'single',
        'objective': 'be fast',
        'file_manifest': [{'name': 'program.txt'}],
        'workloads': [{'workload_id': 'w0', 'p_ref_us': 100.0}],
        'evaluator': {'kind': 'synthetic', 'landscape_file': 'unused.json'},
    })


class ScoreSequenceEvaluator:
    """Returns the given scores in order; 0 is a wrong answer"""

    kind = 'score-sequence'

    def __init__(self, scores):
        self.scores = list(scores)
        self.calls = 0

    def evaluate(self, task, program):
        value = self.scores[min(self.calls, len(self.scores) - 1)]
        self.calls += 1
        if value <= 0:
            return Observation([WorkloadResult('w0', WorkloadStatus.WRONG_ANSWER, log_excerpt='mismatch')])
        return Observation([WorkloadResult('w0', WorkloadStatus.PASS, latency_us=10000.0 / value)])


class EvaluatorCrash(Exception):
    pass


class CrashingEvaluator:
    """Delegates to `inner` and dies on call number `crash_on`"""

    def __init__(self, inner, crash_on):
        self.inner = inner
        self.kind = inner.kind
        self.crash_on = crash_on
        self.calls = 0

    def evaluate(self, task, program):
        self.calls += 1
        if self.calls == self.crash_on:
            raise EvaluatorCrash(f'killed at call {self.calls}')
        return self.inner.evaluate(task, program)


class StubPlanner:
    """Answers each phase from a queue of edit lists; empty once the queue runs dry"""

    name = 'stub-planner'

    def __init__(self, init=(), evolve=(), recovery=(), correction=()):
        self.queues = {
            'init': list(init),
            'evolve': list(evolve),
            'recovery': list(recovery),
            'correction': list(correction),
        }
        self.requests = []

    def _answer(self, phase, request):
        self.requests.append(request)
        queue = self.queues[phase]
        edits = queue.pop(0) if queue else []
        return PlannerResponse(edits=list(edits), commentary=f'stub {phase}')

    def plan_init(self, request):
        return self._answer('init', request)

    def plan_evolve(self, request):
        return self._answer('evolve', request)

    def plan_recovery(self, request):
        return self._answer('recovery', request)

    def plan_correction(self, request):
        return self._answer('correction', request)
