"""
Evaluator backends: E(x) -> Observation.

Every candidate failure (compile error, crash, timeout, wrong answer) is
encoded in the Observation. Only a broken evaluator raises, with
InfrastructureError, so the engine can abort without spending budget.
"""

import json
import logging
import os
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from django.conf import settings

from .exceptions import CompileFailure, InfrastructureError, ManifestMismatch
from .landscape import jitter_factor, landscape_latency, load_landscape, parse_program_text
from .models import Observation, WorkloadResult, WorkloadStatus
from .serializers import EvaluatorReportSerializer, flatten_errors
from .tasks import SubprocessConfig, SyntheticConfig
from .utils import canonical_json, truncate_tail

logger = logging.getLogger(__name__)

LOG_EXCERPT_BYTES = 2048


def check_manifest(task, program) -> None:
    """Program file names must equal the task manifest exactly"""
    expected, actual = set(task.manifest_names), set(program.files)
    if expected != actual:
        missing = sorted(expected - actual)
        extra = sorted(actual - expected)
        raise ManifestMismatch(
            f'program {program.program_id} does not match the manifest'
            f' (missing: {", ".join(missing) or "none"}; extra: {", ".join(extra) or "none"})'
        )


def default_metadata_limit() -> int:
    return settings.HYPOTREE['METADATA_LIMIT_BYTES']


class SyntheticEvaluator:
    """Scores directive programs against a landscape file; pure and reentrant"""

    kind = 'synthetic'

    def __init__(self, landscape, seed: int = 0, metadata_limit_bytes=None):
        self.landscape = landscape
        self.seed = seed
        self.metadata_limit_bytes = metadata_limit_bytes or default_metadata_limit()

    @classmethod
    def from_config(cls, config: SyntheticConfig):
        return cls(load_landscape(config.landscape_file), seed=config.determinism_seed)

    def evaluate(self, task, program) -> Observation:
        check_manifest(task, program)
        text = program.files[task.manifest_names[0]]
        try:
            directives = parse_program_text(text)
        except CompileFailure as exc:
            return Observation.failed(task.workload_ids, WorkloadStatus.COMPILE_ERROR, str(exc))

        conflicts = self.landscape.conflicting(directives)
        results, lines = [], [f'directives: {", ".join(directives) or "(none)"}']
        for workload in task.workloads:
            try:
                latency = landscape_latency(self.landscape, directives, workload)
            except CompileFailure as exc:
                results.append(WorkloadResult(workload.workload_id, WorkloadStatus.COMPILE_ERROR,
                                              log_excerpt=str(exc)))
                lines.append(f'{workload.workload_id}: compile error: {exc}')
                continue
            if conflicts:
                message = 'conflicting directives: ' + '; '.join(', '.join(sorted(c)) for c in conflicts)
                results.append(WorkloadResult(workload.workload_id, WorkloadStatus.WRONG_ANSWER,
                                              log_excerpt=message))
                lines.append(f'{workload.workload_id}: wrong answer ({message})')
                continue
            if self.landscape.jitter > 0:
                latency *= jitter_factor(self.seed, directives, workload.workload_id, self.landscape.jitter)
            results.append(WorkloadResult(workload.workload_id, WorkloadStatus.PASS, latency_us=latency))
            lines.append(f'{workload.workload_id}: {latency:.3f} us')

        return Observation(
            workload_results=results,
            metadata=truncate_tail('\n'.join(lines), self.metadata_limit_bytes),
        )


class SubprocessEvaluator:
    """
    Compile-correctness-benchmark through a user-supplied command.

    Program files are written into a fresh directory, the command runs with
    the workspace and task file paths, and prints one JSON report on stdout.
    """

    kind = 'subprocess'

    def __init__(self, config: SubprocessConfig, task_file=None):
        self.config = config
        self.task_file = Path(task_file) if task_file else None
        self.metadata_limit_bytes = config.metadata_limit_bytes or default_metadata_limit()

    @property
    def timeout_s(self) -> float:
        return self.config.compile_timeout_s + self.config.run_timeout_s

    def build_argv(self, workspace: Path, task_file: Path, workload_id: str = '') -> list:
        values = {
            'workspace': str(workspace),
            'task_file': str(task_file),
            'workload': workload_id,
            'repetitions': str(self.config.repetitions),
        }
        argv = [token.format(**values) for token in self.config.command]
        if not any('{workspace}' in token for token in self.config.command):
            argv.extend([str(workspace), str(task_file)])
        return argv

    def build_env(self) -> dict:
        env = {name: os.environ[name] for name in ('PATH',) + tuple(self.config.env_passthrough)
               if name in os.environ}
        env['HYPOTREE_REPETITIONS'] = str(self.config.repetitions)
        return env

    def evaluate(self, task, program) -> Observation:
        check_manifest(task, program)
        with tempfile.TemporaryDirectory(prefix='hypotree-') as tmp:
            root = Path(tmp)
            workspace = root / 'workspace'
            workspace.mkdir()
            for name, text in program.files.items():
                (workspace / name).write_text(text, encoding='utf-8')
            task_file = self._task_file(task, root)

            if self.config.workloads_independent and len(task.workloads) > 1:
                with ThreadPoolExecutor(max_workers=len(task.workloads)) as pool:
                    outcomes = list(pool.map(
                        lambda w: self._run_child(self.build_argv(workspace, task_file, w.workload_id)),
                        task.workloads,
                    ))
                return self._merge_independent(task, outcomes)

            report, stderr, timed_out = self._run_child(self.build_argv(workspace, task_file))
            if timed_out:
                return Observation.failed(
                    task.workload_ids, WorkloadStatus.TIMEOUT,
                    f'evaluation exceeded {self.timeout_s:g} s',
                    metadata=truncate_tail(stderr, self.metadata_limit_bytes),
                )
            return self._observation(task, report, stderr)

    def _task_file(self, task, root: Path) -> Path:
        if self.task_file is not None:
            return self.task_file
        if task.source_path is not None:
            return task.source_path
        path = root / 'task.json'
        path.write_text(canonical_json(task.document), encoding='utf-8')
        return path

    def _run_child(self, argv: list):
        """Returns (report or None, stderr, timed_out)"""
        logger.debug('evaluator command: %s', ' '.join(argv))
        try:
            completed = subprocess.run(
                argv,
                capture_output=True,
                text=True,
                timeout=self.timeout_s,
                env=self.build_env(),
            )
        except subprocess.TimeoutExpired as exc:
            stderr = exc.stderr.decode('utf-8', 'replace') if isinstance(exc.stderr, bytes) else (exc.stderr or '')
            return None, stderr, True
        except (FileNotFoundError, PermissionError) as exc:
            raise InfrastructureError(f'cannot start evaluator command {argv[0]!r}: {exc}') from exc

        report = parse_report(completed.stdout)
        if report is None:
            raise InfrastructureError(
                f'evaluator exited with status {completed.returncode} without a parsable report: '
                f'{truncate_tail(completed.stderr or completed.stdout, 512)}'
            )
        if completed.returncode != 0:
            logger.info('evaluator exited with status %s but reported results', completed.returncode)
        return report, completed.stderr, False

    def _observation(self, task, report: dict, stderr: str) -> Observation:
        by_id = {w['workload_id']: w for w in report['workloads']}
        results = [self._workload_result(workload.workload_id, by_id.get(workload.workload_id))
                   for workload in task.workloads]
        metadata = '\n'.join(part for part in (report['global_log'], stderr) if part)
        return Observation(results, truncate_tail(metadata, self.metadata_limit_bytes))

    def _merge_independent(self, task, outcomes) -> Observation:
        results, logs = [], []
        for workload, (report, stderr, timed_out) in zip(task.workloads, outcomes):
            if timed_out:
                results.append(WorkloadResult(workload.workload_id, WorkloadStatus.TIMEOUT,
                                              log_excerpt=f'evaluation exceeded {self.timeout_s:g} s'))
                logs.append(f'[{workload.workload_id}] timeout')
                continue
            entry = next((w for w in report['workloads'] if w['workload_id'] == workload.workload_id), None)
            results.append(self._workload_result(workload.workload_id, entry))
            logs.extend(f'[{workload.workload_id}] {part}' for part in (report['global_log'], stderr) if part)
        return Observation(results, truncate_tail('\n'.join(logs), self.metadata_limit_bytes))

    @staticmethod
    def _workload_result(workload_id: str, entry) -> WorkloadResult:
        if entry is None:
            return WorkloadResult(workload_id, WorkloadStatus.RUNTIME_ERROR,
                                  log_excerpt='workload missing from evaluator report')
        excerpt = truncate_tail(entry['log_excerpt'], LOG_EXCERPT_BYTES)
        if entry['status'] != WorkloadStatus.PASS:
            return WorkloadResult(workload_id, entry['status'], log_excerpt=excerpt)
        samples = entry['latencies_us'] or [entry['latency_us']]
        return WorkloadResult(workload_id, WorkloadStatus.PASS,
                              latency_us=float(np.median(samples)), log_excerpt=excerpt)


def parse_report(stdout: str):
    """The child's JSON report: the whole stdout, else its last JSON line"""
    candidates = [stdout.strip()]
    candidates.extend(line.strip() for line in reversed(stdout.splitlines()) if line.strip().startswith('{'))
    for text in candidates:
        if not text:
            continue
        try:
            data = json.loads(text)
        except json.JSONDecodeError:
            continue
        serializer = EvaluatorReportSerializer(data=data)
        if serializer.is_valid():
            return serializer.validated_data
        logger.warning('evaluator report rejected: %s', flatten_errors(serializer.errors))
    return None


def build_evaluator(task, kind: str = 'task'):
    """Evaluator for a task; `kind` may force one backend"""
    config = task.evaluator_config
    if kind not in ('task', config.kind):
        raise InfrastructureError(f'task {task.task_id} declares a {config.kind} evaluator, not {kind}')
    if isinstance(config, SyntheticConfig):
        return SyntheticEvaluator.from_config(config)
    return SubprocessEvaluator(config)
