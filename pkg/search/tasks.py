"""
Tasks, scoring and the Fast_p metric.

A correct program scores 100 * reference latency / latency on each workload,
averaged over the task's workloads; a program that is incorrect anywhere
scores 0 everywhere.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .exceptions import EmptyInput, TaskFormatError
from .models import Observation, Program, ProgramOrigin
from .serializers import TaskSerializer, flatten_errors


@dataclass(frozen=True)
class FileSpec:
    name: str
    description: str = ''


@dataclass(frozen=True)
class Workload:
    workload_id: str
    p_ref_us: float
    parameters: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SubprocessConfig:
    command: tuple
    compile_timeout_s: float = 300.0
    run_timeout_s: float = 600.0
    env_passthrough: tuple = ()
    repetitions: int = 1
    workloads_independent: bool = False
    workspace_policy: str = 'fresh-dir-per-candidate'
    metadata_limit_bytes: Optional[int] = None
    kind = 'subprocess'


@dataclass(frozen=True)
class SyntheticConfig:
    landscape_file: Path
    determinism_seed: int = 0
    kind = 'synthetic'


@dataclass
class Task:
    task_id: str
    objective_text: str
    file_manifest: list
    workloads: list
    evaluator_config: object
    reference_impl: str = ''
    instructions: str = ''
    target: str = 'the target GPU'
    initial_program: Optional[Program] = None
    source_path: Optional[Path] = None
    document: dict = field(default_factory=dict)

    @property
    def workload_ids(self) -> list:
        return [w.workload_id for w in self.workloads]

    @property
    def manifest_names(self) -> list:
        return [f.name for f in self.file_manifest]

    def digest(self) -> str:
        """Objective, instructions and manifest: what planners see of the task"""
        lines = [f'Task: {self.task_id}', f'Objective: {self.objective_text}']
        if self.instructions:
            lines.append(f'Instructions: {self.instructions}')
        lines.append('Files:')
        lines.extend(f'- {f.name}: {f.description}' if f.description else f'- {f.name}'
                     for f in self.file_manifest)
        return '\n'.join(lines)


@dataclass(frozen=True)
class ScoreBreakdown:
    per_workload: tuple
    aggregate: float


def task_from_data(data: dict, base_dir: Optional[Path] = None, source_path: Optional[Path] = None) -> Task:
    """Validate a task document and build the Task"""
    serializer = TaskSerializer(data=data)
    if not serializer.is_valid():
        raise TaskFormatError(f'invalid task: {flatten_errors(serializer.errors)}')
    doc = serializer.validated_data
    base_dir = base_dir or Path.cwd()

    evaluator = doc['evaluator']
    if evaluator['kind'] == 'synthetic':
        landscape = Path(evaluator['landscape_file'])
        if not landscape.is_absolute():
            landscape = base_dir / landscape
        evaluator_config = SyntheticConfig(
            landscape_file=landscape,
            determinism_seed=evaluator['determinism_seed'],
        )
    else:
        command = list(evaluator['command'])
        # ./bench.py style programs live beside the task file
        if command[0].startswith(('./', '../')):
            command[0] = str((base_dir / command[0]).resolve())
        evaluator_config = SubprocessConfig(
            command=tuple(command),
            compile_timeout_s=evaluator['compile_timeout_s'],
            run_timeout_s=evaluator['run_timeout_s'],
            env_passthrough=tuple(evaluator['env_passthrough']),
            repetitions=evaluator['repetitions'],
            workloads_independent=evaluator['workloads_independent'],
            workspace_policy=evaluator['workspace_policy'],
            metadata_limit_bytes=evaluator['metadata_limit_bytes'],
        )

    initial_program = None
    if doc.get('initial_program'):
        initial_program = Program(
            program_id='seed',
            files=dict(doc['initial_program']['files']),
            round=0,
            created_from=ProgramOrigin.PLANNER_SEEDED,
        )

    return Task(
        task_id=doc['task_id'],
        objective_text=doc['objective'],
        reference_impl=doc['reference_impl'],
        instructions=doc['instructions'],
        target=doc['target'],
        file_manifest=[FileSpec(e['name'], e['description']) for e in doc['file_manifest']],
        workloads=[
            Workload(w['workload_id'], w['p_ref_us'], dict(w['parameters']))
            for w in doc['workloads']
        ],
        evaluator_config=evaluator_config,
        initial_program=initial_program,
        source_path=source_path,
        document=data,
    )


def load_task(path) -> Task:
    """Read a task file (JSON); relative paths resolve against its directory"""
    path = Path(path).resolve()
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except FileNotFoundError:
        raise TaskFormatError(f'task file not found: {path}') from None
    except json.JSONDecodeError as exc:
        raise TaskFormatError(f'task file {path} is not valid JSON: {exc}') from None
    return task_from_data(data, base_dir=path.parent, source_path=path)


def score(obs: Observation, task: Task) -> ScoreBreakdown:
    """Per-workload 100 * p_ref / p, zeroed everywhere unless all workloads pass"""
    if len(obs.workload_results) != len(task.workloads):
        raise ValueError(
            f'observation has {len(obs.workload_results)} workload results, '
            f'task declares {len(task.workloads)}'
        )
    if not obs.correct:
        per_workload = tuple(0.0 for _ in task.workloads)
    else:
        per_workload = tuple(
            100.0 * workload.p_ref_us / result.latency_us
            for workload, result in zip(task.workloads, obs.workload_results)
        )
    aggregate = sum(per_workload) / len(per_workload)
    return ScoreBreakdown(per_workload=per_workload, aggregate=aggregate)


def speedups(obs: Optional[Observation], task: Task) -> list:
    """p_ref / p per workload; 0 for failed workloads or an incorrect program"""
    if obs is None or not obs.correct:
        return [0.0 for _ in task.workloads]
    return [w.p_ref_us / r.latency_us for w, r in zip(task.workloads, obs.workload_results)]


def fast_p(per_workload_speedups: Sequence[float], threshold: float) -> float:
    """Fraction of workloads whose speedup reaches `threshold`"""
    if not per_workload_speedups:
        raise EmptyInput('fast_p needs at least one workload')
    hits = sum(1 for s in per_workload_speedups if s >= threshold)
    return hits / len(per_workload_speedups)
