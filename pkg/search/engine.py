"""
The search loop: select an open action, refine it until stagnation, let the
planner evolve the tree, repeat until the evaluation budget is spent.

Every state change goes through an appended trace event folded by
trace.apply_event, so a crashed run resumes from its log and continues
with exactly the events an uninterrupted run would have written.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from django.conf import settings

from .coder import CoderRequest
from .exceptions import (
    BackendUnavailable, EditError, GenerationError, IllegalTarget, InfrastructureError, TraceError,
)
from .models import (
    ExitStatus, Insert, NodeStatus, Observation, PlannerPhase, Program, ProgramOrigin,
    SearchState, select_action, validate_edit,
)
from .planner import FALLBACK_INTENT, FALLBACK_PRIORITY, Trajectory, build_request
from .serializers import (
    ObservationSerializer, ProgramSerializer, edit_from_dict, edit_to_dict,
    observation_from_data, program_from_data,
)
from .tasks import score
from .trace import PlanProgress, PlanStep, ResumePoint, apply_event, resume_point
from .utils import byte_length, canonical_json, finite_or_none, format_score, sha256_text, truncate_tail

logger = logging.getLogger(__name__)


@dataclass
class EngineConfig:
    budget: int = 120
    stagnation: int = 7
    planner_retries: int = 2
    feedback_on_retry: bool = True
    seed: int = 0
    coder_temperature: float = 0.8
    observation_excerpt_bytes: int = 2048
    history_window_bytes: int = 4096
    check_invariants: bool = False

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError('budget must be at least 1')
        if self.stagnation < 1:
            raise ValueError('stagnation must be at least 1')
        if self.planner_retries < 0:
            raise ValueError('planner_retries must be >= 0')

    @classmethod
    def from_settings(cls, **overrides) -> 'EngineConfig':
        defaults = settings.HYPOTREE
        values = {
            'budget': defaults['BUDGET'],
            'stagnation': defaults['STAGNATION'],
            'planner_retries': defaults['PLANNER_RETRIES'],
            'feedback_on_retry': defaults['FEEDBACK_ON_RETRY'],
            'seed': defaults['SEED'],
            'coder_temperature': defaults['CODER_TEMPERATURE'],
            'observation_excerpt_bytes': defaults['OBSERVATION_EXCERPT_BYTES'],
            'history_window_bytes': defaults['HISTORY_WINDOW_BYTES'],
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self) -> dict:
        data = asdict(self)
        data.pop('check_invariants')
        return data


@dataclass
class RefinementOutcome:
    node_id: str
    samples_evaluated: int
    generation_failures: int
    best_program_id: Optional[str]
    best_score: Optional[float]
    exit_reason: str
    trajectory: Optional[Trajectory] = None


@dataclass
class RunResult:
    best_program: Optional[Program]
    best_score: Optional[float]
    rounds_used: int
    exit_status: str
    error: str = ''
    state: Optional[SearchState] = None
    resumed: bool = False

    @property
    def aborted(self) -> bool:
        return self.exit_status in (ExitStatus.INFRASTRUCTURE_ERROR, ExitStatus.BACKEND_ERROR)


def round_seed(seed: int, round: int, attempt: int = 0) -> int:
    """Per-round seed, identical for a resumed and an uninterrupted run"""
    rng = np.random.default_rng([abs(seed), round, attempt])
    return int(rng.integers(0, 2 ** 31 - 1))


def summarize_observation(obs: Observation, limit_bytes: int) -> str:
    """Per-workload status lines, then as much of the metadata tail as fits"""
    lines = [f'correct: {"yes" if obs.correct else "no"}']
    for result in obs.workload_results:
        if result.passed:
            lines.append(f'{result.workload_id}: pass {result.latency_us:.3f} us')
        elif result.log_excerpt.strip():
            last = result.log_excerpt.strip().splitlines()[-1]
            lines.append(f'{result.workload_id}: {result.status}: {last}')
        else:
            lines.append(f'{result.workload_id}: {result.status}')
    text = '\n'.join(lines)
    room = limit_bytes - byte_length(text) - byte_length('\nmetadata:\n')
    if obs.metadata and room > 0:
        text = f'{text}\nmetadata:\n{truncate_tail(obs.metadata, room)}'
    return truncate_tail(text, limit_bytes)


@dataclass
class RefinementProgress:
    """Local refinement state of one action, rebuilt from its events"""
    node_id: str
    attempt_index: int = 0
    counter: int = 0
    samples: int = 0
    generation_failures: int = 0
    best_program: Optional[Program] = None
    best_observation: Optional[Observation] = None
    best_score: float = -math.inf
    best_excerpt: str = ''
    feedback: Optional[str] = None
    feedback_failed: bool = True
    pending_program: Optional[Program] = None
    scores: list = field(default_factory=list)

    def absorb(self, event: dict) -> None:
        kind, data = event['type'], event['data']
        if kind == 'CandidateGenerated':
            self.pending_program = program_from_data(data['program'])
            self.attempt_index = data['attempt_index'] + 1
        elif kind == 'GenerationFailed':
            self.attempt_index = data['attempt_index'] + 1
            self.counter += 1
            self.generation_failures += 1
            self.feedback = f'generation failed: {data["error"]}'
            self.feedback_failed = True
        elif kind == 'CandidateEvaluated':
            if self.pending_program is None:
                raise TraceError(f'event {event["seq"]} evaluates a program that was never generated')
            observation = observation_from_data(data['observation'])
            aggregate = data['scores']['aggregate']
            self.samples += 1
            self.scores.append(aggregate)
            if aggregate > self.best_score:
                self.best_score = aggregate
                self.best_program = self.pending_program
                self.best_observation = observation
                self.best_excerpt = data['excerpt']
                self.counter = 0
            else:
                self.counter += 1
            self.feedback = data['excerpt']
            self.feedback_failed = not observation.correct
            self.pending_program = None

    @property
    def finite_best(self) -> Optional[float]:
        return finite_or_none(self.best_score)


class SearchEngine:
    """
    Tree search over optimization intents.

    The planner (LLM or rule table) edits the tree, the coder turns the
    selected intent into programs, the evaluator measures them. The trace
    store is the single source of truth for the run.
    """

    def __init__(self, task, config: EngineConfig, planner, coder, evaluator, trace, run_info: Optional[dict] = None):
        self.task = task
        self.run_info = run_info or {}
        self.config = config
        self.planner = planner
        self.coder = coder
        self.evaluator = evaluator
        self.trace = trace
        self.state: Optional[SearchState] = None
        self.resuming = False

    # Entry points

    def run(self) -> RunResult:
        self.trace.create()
        try:
            self._emit('RunStarted', {
                'mode': 'tree',
                'task_id': self.task.task_id,
                'objective': self.task.objective_text,
                'budget': self.config.budget,
                'config': self.config.to_dict(),
                'backends': self.backend_names(),
                **self.run_info,
            })
            logger.info('run %s started: task %s, budget %s, K=%s',
                        self.trace.run_dir, self.task.task_id, self.config.budget, self.config.stagnation)
            return self._guarded(self._fresh)
        finally:
            self.trace.release_lock()

    def resume(self, extra_budget: int = 0) -> RunResult:
        """Continue an interrupted run, or extend a finished one by `extra_budget`"""
        self.trace.open()
        try:
            events = self.trace.events()
            point = resume_point(events)
            if point.mode != 'tree':
                raise TraceError(f'{self.trace.run_dir} is a {point.mode} run')
            self.state = self.trace.restore()
            if self.state is None:
                raise TraceError(f'{self.trace.run_dir} has no RunStarted event')
            self._advance_backends(events, point)

            if point.finished and not extra_budget:
                logger.info('run %s already finished (%s)', self.trace.run_dir, point.ended['exit_status'])
                return self._result(point.ended['exit_status'])
            self.resuming = True
            if extra_budget:
                self._emit('BudgetExtended', {'amount': extra_budget})
            logger.info('resuming run %s at event %s, round %s', self.trace.run_dir, point.last_seq, self.state.round)
            return self._guarded(lambda: self._continue(point))
        finally:
            self.trace.release_lock()

    def backend_names(self) -> dict:
        return {
            'planner': self.planner.name,
            'coder': self.coder.name,
            'evaluator': getattr(self.evaluator, 'kind', type(self.evaluator).__name__),
        }

    # Loop

    def _fresh(self) -> str:
        self._plan_step(PlannerPhase.INIT)
        self._checkpoint()
        return self._loop()

    def _continue(self, point: ResumePoint) -> str:
        if point.finished:
            if point.evolve_pending:
                self._plan_step(PlannerPhase.EVOLVE, self._trajectory_of(point))
                self._checkpoint()
            return self._loop()
        if not point.init_done:
            self._plan_step(PlannerPhase.INIT)
            self._checkpoint()
        elif point.refinement is not None:
            progress = RefinementProgress(node_id=point.refinement['node_id'])
            for event in point.refinement_events:
                progress.absorb(event)
            self._refine_and_evolve(progress.node_id, progress)
        elif point.plan is not None:
            phase = point.plan.phase
            trajectory = self._trajectory_of(point) if phase == PlannerPhase.EVOLVE else None
            self._plan_step(phase, trajectory, resume=point.plan)
            self._checkpoint()
            if phase == PlannerPhase.RECOVERY and not self.state.frontier:
                return ExitStatus.FRONTIER_EXHAUSTED
        elif point.evolve_pending and self.state.budget_remaining > 0:
            self._plan_step(PlannerPhase.EVOLVE, self._trajectory_of(point))
            self._checkpoint()
        return self._loop()

    def _loop(self) -> str:
        while self.state.budget_remaining > 0:
            if not self.state.frontier:
                logger.info('frontier empty at round %s, asking for recovery', self.state.round)
                self._plan_step(PlannerPhase.RECOVERY)
                self._checkpoint()
                if not self.state.frontier:
                    return ExitStatus.FRONTIER_EXHAUSTED
                continue
            node_id = select_action(self.state)
            node = self.state.nodes[node_id]
            self._emit('ActionSelected', {'node_id': node_id, 'priority': node.priority, 'intent': node.intent})
            self._refine_and_evolve(node_id)
        return ExitStatus.COMPLETED

    def _refine_and_evolve(self, node_id: str, progress: Optional[RefinementProgress] = None) -> None:
        outcome = self.refine(node_id, progress)
        if self.state.budget_remaining > 0:
            self._plan_step(PlannerPhase.EVOLVE, outcome.trajectory)
        self._checkpoint()

    # Local refinement

    def refine(self, node_id: str, progress: Optional[RefinementProgress] = None) -> RefinementOutcome:
        """
        Sample implementations of one open action until `stagnation`
        consecutive attempts fail to strictly improve on the refinement
        best, or the budget runs out. Closes the node.
        """
        node = self.state.node(node_id)
        if node.status != NodeStatus.OPEN:
            raise IllegalTarget(f'cannot refine {node_id}: it is {node.status}')
        progress = progress or RefinementProgress(node_id=node_id)
        limit = self.config.stagnation

        while progress.counter < limit and self.state.budget_remaining > 0:
            if progress.pending_program is None and not self._generate(node, progress):
                continue
            self._evaluate(node, progress)

        exit_reason = 'stagnated' if progress.counter >= limit else 'budget_exhausted'
        best_id = progress.best_program.program_id if progress.best_program else None
        trajectory = Trajectory(
            node_id=node_id,
            intent=node.intent,
            samples=progress.samples,
            best_score=progress.finite_best,
            observation_excerpt=progress.best_excerpt,
            generation_failures=progress.generation_failures,
            exit_reason=exit_reason,
        )
        self._emit('NodeClosed', {
            'node_id': node_id,
            'samples_evaluated': progress.samples,
            'generation_failures': progress.generation_failures,
            'best_program_id': best_id,
            'best_score': progress.finite_best,
            'exit_reason': exit_reason,
            'best_program': ProgramSerializer(progress.best_program).data if progress.best_program else None,
            'best_observation': (
                ObservationSerializer(progress.best_observation).data if progress.best_observation else None
            ),
            'trajectory': asdict(trajectory),
        })
        logger.info('closed %s (%s): best %s after %s samples, %s',
                    node_id, node.intent, format_score(progress.finite_best), progress.samples, exit_reason)
        return RefinementOutcome(
            node_id=node_id,
            samples_evaluated=progress.samples,
            generation_failures=progress.generation_failures,
            best_program_id=best_id,
            best_score=progress.finite_best,
            exit_reason=exit_reason,
            trajectory=trajectory,
        )

    def _generate(self, node, progress: RefinementProgress) -> bool:
        round = self.state.round + 1
        parent = self.state.parent_program(node.node_id) or self.task.initial_program
        attempt = progress.attempt_index
        request = CoderRequest(
            task=self.task,
            intent=node.intent,
            parent_program=parent,
            attempt_index=attempt,
            feedback=progress.feedback if self.config.feedback_on_retry and attempt > 0 else None,
            feedback_failed=progress.feedback_failed,
            sampling_temperature=self.config.coder_temperature,
            node_id=node.node_id,
            program_id=f'p{round:04d}',
            round=round,
            created_from=(
                ProgramOrigin.PLANNER_SEEDED if node.parent_node_id == self.state.root_id
                else ProgramOrigin.REFINEMENT_SAMPLE
            ),
            seed=round_seed(self.config.seed, round, attempt),
        )
        exchanges = []
        try:
            program = self.coder.generate(request, exchanges)
        except GenerationError as exc:
            blobs = self.trace.write_blobs('coder', exchanges)
            event = self._emit('GenerationFailed', {
                'node_id': node.node_id,
                'attempt_index': attempt,
                'error': str(exc),
                'blobs': blobs,
                'backend_calls': {'coder': len(exchanges)},
            })
            logger.warning('generation failed for %s (attempt %s): %s', node.node_id, attempt, exc)
            progress.absorb(event)
            return False
        blobs = self.trace.write_blobs('coder', exchanges)
        event = self._emit('CandidateGenerated', {
            'node_id': node.node_id,
            'attempt_index': attempt,
            'program_id': program.program_id,
            'program': ProgramSerializer(program).data,
            'blobs': blobs,
            'backend_calls': {'coder': len(exchanges)},
        })
        progress.absorb(event)
        return True

    def _evaluate(self, node, progress: RefinementProgress) -> None:
        program = progress.pending_program
        observation = self.evaluator.evaluate(self.task, program)
        breakdown = score(observation, self.task)
        event = self._emit('CandidateEvaluated', {
            'node_id': node.node_id,
            'program_id': program.program_id,
            'observation': ObservationSerializer(observation).data,
            'scores': {'per_workload': list(breakdown.per_workload), 'aggregate': breakdown.aggregate},
            'excerpt': summarize_observation(observation, self.config.observation_excerpt_bytes),
        }, round=self.state.round + 1)
        logger.info('round %s: %s for %s scored %s',
                    event['round'], program.program_id, node.node_id, format_score(breakdown.aggregate))
        progress.absorb(event)

    # Planning

    def _plan_step(self, phase: str, trajectory: Optional[Trajectory] = None,
                   resume: Optional[PlanStep] = None) -> PlanStep:
        """
        Consult the planner, apply its edits one by one, send rejected edits
        back once for correction, and seed a fallback action when init
        produced none.
        """
        step = resume or PlanStep(phase=phase)
        if step.main is None:
            step.main = self._consult(phase, trajectory)
        self._apply_plan(step.main)

        if step.main.rejected:
            if step.correction is None:
                step.correction = self._consult(PlannerPhase.CORRECTION, trajectory, rejected=step.main.rejected)
            self._apply_plan(step.correction)

        if phase == PlannerPhase.INIT and step.inserts == 0 and not step.fallback_done:
            fallback = Insert(parent_node_id=self.state.root_id, intent=FALLBACK_INTENT, priority=FALLBACK_PRIORITY)
            logger.warning('planner proposed no actions; seeding the fallback action')
            self._emit('EditApplied', {
                'plan': 'fallback',
                'index': 0,
                'edit': edit_to_dict(fallback),
                'accepted': True,
                'reason': '',
                'fallback': True,
            })
            step.fallback_done = True
        return step

    def _consult(self, phase: str, trajectory: Optional[Trajectory], rejected=()) -> PlanProgress:
        notes = [f'{canonical_json(r["edit"])} rejected: {r["reason"]}' for r in rejected]
        request = build_request(
            phase, self.task, self.state, trajectory,
            rejected=notes, history_bytes=self.config.history_window_bytes,
        )
        method = {
            PlannerPhase.INIT: self.planner.plan_init,
            PlannerPhase.EVOLVE: self.planner.plan_evolve,
            PlannerPhase.RECOVERY: self.planner.plan_recovery,
            PlannerPhase.CORRECTION: self.planner.plan_correction,
        }[phase]
        response = method(request)
        blobs = self.trace.write_blobs('planner', response.exchanges)
        edits = [edit_to_dict(edit) for edit in response.edits]
        digest = sha256_text('\n'.join([
            request.tree_view, request.history_window,
            trajectory.render() if trajectory else '', '\n'.join(notes),
        ]))
        self._emit('PlannerExchange', {
            'phase': phase,
            'request_digest': digest,
            'edits': edits,
            'commentary': response.commentary,
            'errors': response.errors,
            'blobs': blobs,
            'backend_calls': {'planner': len(response.exchanges)},
        })
        if response.errors and not edits:
            logger.warning('%s planner gave no usable edits: %s', phase, '; '.join(response.errors))
        return PlanProgress(phase=phase, edits=edits)

    def _apply_plan(self, progress: PlanProgress) -> None:
        plan = 'correction' if progress.phase == PlannerPhase.CORRECTION else 'main'
        for index in range(progress.applied, len(progress.edits)):
            data = progress.edits[index]
            try:
                validate_edit(self.state, edit_from_dict(data))
            except EditError as exc:
                accepted, reason = False, str(exc)
                logger.info('rejected %s edit: %s', data['op'], exc)
            else:
                accepted, reason = True, ''
            event = self._emit('EditApplied', {
                'plan': plan,
                'index': index,
                'edit': data,
                'accepted': accepted,
                'reason': reason,
            })
            progress.absorb(event)

    # Plumbing

    def _emit(self, type: str, data: dict, round: Optional[int] = None) -> dict:
        if round is None:
            round = self.state.round if self.state is not None else 0
        event = self.trace.append(type, round, data)
        self.state = apply_event(self.state, event)
        return event

    def _checkpoint(self) -> None:
        self.trace.snapshot(self.state)
        if self.config.check_invariants:
            problems = self.state.check_invariants()
            if problems:
                raise TraceError('state invariants violated: ' + '; '.join(problems))

    def _guarded(self, body) -> RunResult:
        try:
            status = body()
        except InfrastructureError as exc:
            logger.error('evaluator infrastructure failed: %s', exc)
            return self._end(ExitStatus.INFRASTRUCTURE_ERROR, str(exc))
        except BackendUnavailable as exc:
            logger.error('backend unavailable: %s', exc)
            return self._end(ExitStatus.BACKEND_ERROR, str(exc))
        return self._end(status)

    def _end(self, status: str, error: str = '') -> RunResult:
        state = self.state
        best = state.best_program()
        data = {
            'exit_status': status,
            'best_score': finite_or_none(state.best_score),
            'best_program_id': state.best_program_id,
            'rounds_used': state.rounds_used,
            'error': error,
        }
        self._emit('RunEnded', data)
        self.trace.snapshot(state)
        self.trace.write_summary({
            **data,
            'task_id': self.task.task_id,
            'mode': 'tree',
            'budget_total': state.budget_total,
            'budget_remaining': state.budget_remaining,
            'nodes': len(state.nodes) - 1,
            'closed': sum(1 for n in state.nodes.values() if n.status == NodeStatus.CLOSED and not n.is_root),
            'pruned': sum(1 for n in state.nodes.values() if n.status == NodeStatus.PRUNED),
        }, best.files if best else None)
        logger.info('run %s ended: %s, best %s after %s rounds',
                    self.trace.run_dir, status, format_score(state.best_score), state.rounds_used)
        return self._result(status, error)

    def _result(self, status: str, error: str = '') -> RunResult:
        return RunResult(
            best_program=self.state.best_program(),
            best_score=finite_or_none(self.state.best_score),
            rounds_used=self.state.rounds_used,
            exit_status=status,
            error=error,
            state=self.state,
            resumed=self.resuming,
        )

    def _advance_backends(self, events: list, point: ResumePoint) -> None:
        """Skip transcript responses the interrupted run already consumed"""
        recorded = events[0]['data'].get('backends', {}) if events else {}
        for role, component in (('planner', self.planner), ('coder', self.coder)):
            backend = getattr(component, 'backend', component)
            if not hasattr(backend, 'advance'):
                continue
            if recorded.get(role) != component.name:
                logger.info('%s backend switched to %s; starting it fresh', role, component.name)
                continue
            backend.advance(point.backend_calls.get(role, 0))

    @staticmethod
    def _trajectory_of(point: ResumePoint) -> Optional[Trajectory]:
        if not point.closed_trajectory:
            return None
        return Trajectory(**point.closed_trajectory)
