"""
Program-space evolution: the comparator the tree search is measured against.

Each step samples parents from a score-ordered archive, shows the coder the
raw programs with their evaluation results, and evaluates the one program it
writes back. Budget accounting is the engine's: one evaluation, one round.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from django.conf import settings
from django.template.loader import render_to_string

from .coder import extract_files, file_tag, workload_targets
from .engine import RunResult, round_seed, summarize_observation
from .exceptions import (
    BackendUnavailable, CompileFailure, GenerationError, InfrastructureError, MalformedResponse,
)
from .landscape import parse_program_text, render_program_text
from .llm import Exchange
from .models import ExitStatus, Program, ProgramOrigin
from .serializers import ObservationSerializer, ProgramSerializer
from .tasks import score
from .utils import finite_or_none, format_score

logger = logging.getLogger(__name__)


@dataclass
class BaselineConfig:
    budget: int = 120
    archive_capacity: int = 8
    parents_per_step: int = 2
    exploration_floor: float = 0.1
    seed: int = 0
    coder_temperature: float = 0.8
    observation_excerpt_bytes: int = 2048
    max_consecutive_failures: int = 5

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError('budget must be at least 1')
        if self.archive_capacity < 1 or self.parents_per_step < 1:
            raise ValueError('archive_capacity and parents_per_step must be positive')
        if not 0.0 <= self.exploration_floor <= 1.0:
            raise ValueError('exploration_floor must lie in [0, 1]')

    @classmethod
    def from_settings(cls, **overrides) -> 'BaselineConfig':
        defaults = settings.HYPOTREE
        values = {
            'budget': defaults['BUDGET'],
            'archive_capacity': defaults['ARCHIVE_CAPACITY'],
            'parents_per_step': defaults['PARENTS_PER_STEP'],
            'exploration_floor': defaults['EXPLORATION_FLOOR'],
            'seed': defaults['SEED'],
            'coder_temperature': defaults['CODER_TEMPERATURE'],
            'observation_excerpt_bytes': defaults['OBSERVATION_EXCERPT_BYTES'],
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class ArchiveEntry:
    program_id: str
    score: float
    excerpt: str
    program: Program = field(repr=False, default=None)


class Archive:
    """Best-first list of evaluated programs with a fixed capacity"""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError('capacity must be positive')
        self.capacity = capacity
        self.entries: list = []

    def __len__(self):
        return len(self.entries)

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.capacity

    def add(self, entry: ArchiveEntry) -> tuple:
        """
        Insert keeping scores descending (ties keep arrival order).
        Returns (accepted, evicted_program_id).
        """
        if entry.score <= 0 and self.full:
            return False, None
        position = len(self.entries)
        for index, current in enumerate(self.entries):
            if entry.score > current.score:
                position = index
                break
        self.entries.insert(position, entry)
        if len(self.entries) <= self.capacity:
            return True, None
        evicted = self.entries.pop()
        if evicted is entry:
            return False, None
        return True, evicted.program_id

    def sample(self, k: int, rng: np.random.Generator, floor: float) -> list:
        """
        Up to `k` distinct entries, drawn with probability
        (1 - floor) * score / total + floor / n; returned best first.
        """
        n = len(self.entries)
        if n == 0:
            return []
        scores = np.array([max(e.score, 0.0) for e in self.entries], dtype=float)
        total = scores.sum()
        if total > 0:
            weights = (1.0 - floor) * scores / total + floor / n
        else:
            weights = np.full(n, 1.0 / n)
        weights = weights / weights.sum()
        size = min(k, n)
        drawable = np.flatnonzero(weights > 0)
        if len(drawable) >= size:
            chosen = rng.choice(n, size=size, replace=False, p=weights)
        else:
            # with no floor, zero-score entries only fill slots the weighted draw cannot
            zero = np.flatnonzero(weights == 0)
            chosen = np.concatenate([drawable, rng.choice(zero, size=size - len(drawable), replace=False)])
        return [self.entries[i] for i in sorted(chosen)]


@dataclass
class BaselineRequest:
    task: object
    parents: list
    step: int
    round: int
    sampling_temperature: float = 0.8
    seed: Optional[int] = None


def render_baseline_prompt(request: BaselineRequest) -> str:
    task = request.task
    parents = [
        {
            'program_id': entry.program_id,
            'score': format_score(entry.score),
            'excerpt': entry.excerpt,
            'files': [
                {'tag': file_tag(name), 'name': name, 'text': entry.program.files.get(name, '')}
                for name in task.manifest_names
            ],
        }
        for entry in request.parents
    ]
    return render_to_string('search/baseline_prompt.txt', {
        'target': task.target,
        'objective': task.objective_text,
        'instructions': task.instructions,
        'reference_impl': task.reference_impl,
        'parents': parents,
        'file_count': len(task.file_manifest),
        'manifest': [{'tag': file_tag(f.name), 'name': f.name} for f in task.file_manifest],
        'targets': workload_targets(task),
    })


class GreedyMutatorBackend:
    """
    Scripted program-space mutator for synthetic tasks: takes the best
    sampled parent and adds one directive that speeds things up on its own
    (factor < 1) and whose prerequisites already hold, cycling through the
    candidates by step. With no such directive it re-emits the parent.
    """

    name = 'greedy-mutator'

    def __init__(self, landscape):
        self.landscape = landscape

    def complete(self, messages, temperature=None, context=None) -> str:
        if context is None:
            raise MalformedResponse('greedy mutator needs the structured request')
        file_name = context.task.manifest_names[0]
        source = context.parents[0].program if context.parents else context.task.initial_program
        directives = []
        if source is not None:
            try:
                directives = parse_program_text(source.files.get(file_name, ''))
            except CompileFailure:
                directives = []
        candidates = [
            d for d in self.landscape.applicable(directives)
            if self.landscape.factors.get(d, 1.0) < 1.0
        ]
        if candidates:
            directives = directives + [candidates[context.step % len(candidates)]]
        return f'<file name="{file_name}">\n{render_program_text(directives)}\n</file>'


class BaselineEvolution:
    """Archive-based evolution loop sharing the coder, evaluator and trace store"""

    def __init__(self, task, config: BaselineConfig, backend, evaluator, trace, run_info: Optional[dict] = None):
        self.task = task
        self.run_info = run_info or {}
        self.config = config
        self.backend = backend
        self.evaluator = evaluator
        self.trace = trace
        self.archive = Archive(config.archive_capacity)
        self.rounds_used = 0
        self.best_program: Optional[Program] = None
        self.best_score = -math.inf

    @property
    def budget_remaining(self) -> int:
        return self.config.budget - self.rounds_used

    def run(self) -> RunResult:
        self.trace.create()
        try:
            self.trace.append('RunStarted', 0, {
                'mode': 'baseline',
                'task_id': self.task.task_id,
                'objective': self.task.objective_text,
                'budget': self.config.budget,
                'config': asdict(self.config),
                'backends': {
                    'coder': self.backend.name,
                    'evaluator': getattr(self.evaluator, 'kind', type(self.evaluator).__name__),
                },
                **self.run_info,
            })
            try:
                status, error = self._loop(), ''
            except InfrastructureError as exc:
                logger.error('evaluator infrastructure failed: %s', exc)
                status, error = ExitStatus.INFRASTRUCTURE_ERROR, str(exc)
            except BackendUnavailable as exc:
                logger.error('backend unavailable: %s', exc)
                status, error = ExitStatus.BACKEND_ERROR, str(exc)
            return self._end(status, error)
        finally:
            self.trace.release_lock()

    def _loop(self) -> str:
        step, failures = 0, 0
        while self.budget_remaining > 0:
            round = self.rounds_used + 1
            rng = np.random.default_rng([abs(self.config.seed), round])
            parents = self.archive.sample(self.config.parents_per_step, rng, self.config.exploration_floor)
            request = BaselineRequest(
                task=self.task,
                parents=parents,
                step=step,
                round=round,
                sampling_temperature=self.config.coder_temperature,
                seed=round_seed(self.config.seed, round, step),
            )
            step += 1
            program = self._generate(request)
            if program is None:
                failures += 1
                if failures >= self.config.max_consecutive_failures:
                    raise BackendUnavailable(f'{failures} consecutive generation failures')
                continue
            failures = 0
            self._evaluate(program)
        return ExitStatus.COMPLETED

    def _generate(self, request: BaselineRequest) -> Optional[Program]:
        messages = [{'role': 'user', 'content': render_baseline_prompt(request)}]
        program_id = f'p{request.round:04d}'
        parent_ids = [p.program_id for p in request.parents]
        raw, error = '', None
        try:
            raw = self.backend.complete(messages, temperature=request.sampling_temperature, context=request)
            files = extract_files(raw, self.task.manifest_names)
        except (MalformedResponse, GenerationError) as exc:
            error = str(exc)
        exchange = Exchange(self.backend.name, messages, raw, request.sampling_temperature,
                            {'step': request.step, 'ok': error is None})
        blobs = self.trace.write_blobs('coder', [exchange])
        if error is not None:
            logger.warning('baseline generation failed at step %s: %s', request.step, error)
            self.trace.append('GenerationFailed', self.rounds_used, {
                'attempt_index': request.step,
                'error': error,
                'parents': parent_ids,
                'blobs': blobs,
                'backend_calls': {'coder': 1},
            })
            return None
        program = Program(
            program_id=program_id,
            files=files,
            parent_action_id=parent_ids[0] if parent_ids else None,
            round=request.round,
            created_from=ProgramOrigin.BASELINE_MUTATION,
        )
        self.trace.append('CandidateGenerated', self.rounds_used, {
            'attempt_index': request.step,
            'program_id': program_id,
            'program': ProgramSerializer(program).data,
            'parents': parent_ids,
            'blobs': blobs,
            'backend_calls': {'coder': 1},
        })
        return program

    def _evaluate(self, program: Program) -> None:
        observation = self.evaluator.evaluate(self.task, program)
        breakdown = score(observation, self.task)
        self.rounds_used += 1
        excerpt = summarize_observation(observation, self.config.observation_excerpt_bytes)
        self.trace.append('CandidateEvaluated', self.rounds_used, {
            'program_id': program.program_id,
            'observation': ObservationSerializer(observation).data,
            'scores': {'per_workload': list(breakdown.per_workload), 'aggregate': breakdown.aggregate},
            'excerpt': excerpt,
        })
        if breakdown.aggregate > self.best_score:
            self.best_score = breakdown.aggregate
            self.best_program = program
        accepted, evicted = self.archive.add(
            ArchiveEntry(program.program_id, breakdown.aggregate, excerpt, program)
        )
        self.trace.append('ArchiveUpdated', self.rounds_used, {
            'program_id': program.program_id,
            'score': breakdown.aggregate,
            'accepted': accepted,
            'evicted': evicted,
            'size': len(self.archive),
        })
        logger.info('round %s: %s scored %s', self.rounds_used, program.program_id,
                    format_score(breakdown.aggregate))

    def _end(self, status: str, error: str) -> RunResult:
        best_score = finite_or_none(self.best_score)
        data = {
            'exit_status': status,
            'best_score': best_score,
            'best_program_id': self.best_program.program_id if self.best_program else None,
            'rounds_used': self.rounds_used,
            'error': error,
        }
        self.trace.append('RunEnded', self.rounds_used, data)
        self.trace.write_summary({
            **data,
            'task_id': self.task.task_id,
            'mode': 'baseline',
            'budget_total': self.config.budget,
            'budget_remaining': self.budget_remaining,
            'archive': [{'program_id': e.program_id, 'score': e.score} for e in self.archive.entries],
        }, self.best_program.files if self.best_program else None)
        logger.info('baseline run %s ended: %s, best %s after %s rounds',
                    self.trace.run_dir, status, format_score(self.best_score), self.rounds_used)
        return RunResult(
            best_program=self.best_program,
            best_score=best_score,
            rounds_used=self.rounds_used,
            exit_status=status,
            error=error,
        )


def run_baseline(task, config: BaselineConfig, backend, evaluator, trace, run_info: Optional[dict] = None) -> RunResult:
    return BaselineEvolution(task, config, backend, evaluator, trace, run_info).run()
