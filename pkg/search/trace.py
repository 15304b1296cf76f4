"""
Run directory: append-only event log, LLM exchange blobs, snapshots.

    run.log                      one JSON event per line (seq, round, ts, type, data)
    blobs/<seq>-<kind>-<i>.json  raw backend exchanges referenced by events
    snapshots/state-<seq>.json   SearchState after event <seq>, with checksum
    result.summary               final summary (JSON)
    best/                        files of the best program
    run.lock                     pid of the process writing the run

The engine changes its state only by folding the events it appends
(apply_event), so replaying run.log rebuilds the live state exactly.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from django.utils import timezone

from .exceptions import RunLocked, SnapshotChecksumError, SnapshotVersionError, TraceError
from .models import (
    ExitStatus, PlannerPhase, SearchState, apply_edit, record_closure,
)
from .serializers import (
    SearchStateSerializer, SnapshotSerializer, TraceEventSerializer, edit_from_dict,
    flatten_errors, observation_from_data, program_from_data,
)
from .utils import canonical_json, sha256_text

logger = logging.getLogger(__name__)

SNAPSHOT_FORMAT_VERSION = 1
FINISHED_STATUSES = (ExitStatus.COMPLETED, ExitStatus.FRONTIER_EXHAUSTED)


def wall_clock() -> str:
    return timezone.now().isoformat()


def state_to_data(state: SearchState) -> dict:
    return json.loads(canonical_json(SearchStateSerializer(state).data))


def state_from_data(data: dict) -> SearchState:
    serializer = SearchStateSerializer(data=data)
    if not serializer.is_valid():
        raise TraceError(f'invalid state document: {flatten_errors(serializer.errors)}')
    return serializer.save()


def apply_event(state: Optional[SearchState], event: dict) -> Optional[SearchState]:
    """Fold one trace event into the search state"""
    kind, data, round = event['type'], event['data'], event['round']

    if kind == 'RunStarted':
        if data.get('mode', 'tree') != 'tree':
            return state
        return SearchState.create(data['objective'], data['budget'])
    if state is None:
        return None

    if kind == 'ActionSelected':
        state.note(f'selected {data["node_id"]} (V={data["priority"]:g})', round)
    elif kind == 'CandidateEvaluated':
        state.consume_budget()
        if state.round != round:
            raise TraceError(f'event {event["seq"]} claims round {round}, ledger is at {state.round}')
    elif kind == 'NodeClosed':
        program = program_from_data(data['best_program']) if data.get('best_program') else None
        observation = observation_from_data(data['best_observation']) if data.get('best_observation') else None
        record_closure(
            state, data['node_id'],
            best_program=program,
            best_obs=observation,
            best_score=data.get('best_score'),
            samples_evaluated=data['samples_evaluated'],
        )
    elif kind == 'EditApplied':
        if data['accepted']:
            apply_edit(state, edit_from_dict(data['edit']), round)
    elif kind == 'BudgetExtended':
        state.extend_budget(data['amount'])
        state.note(f'budget extended by {data["amount"]}', round)
    return state


def replay(events, state: Optional[SearchState] = None) -> Optional[SearchState]:
    for event in events:
        state = apply_event(state, event)
    return state


@dataclass
class PlanProgress:
    """A planner response being applied edit by edit"""
    phase: str
    edits: list
    applied: int = 0
    rejected: list = field(default_factory=list)
    inserts: int = 0

    def absorb(self, event: dict) -> None:
        data = event['data']
        self.applied += 1
        if data['accepted']:
            if data['edit']['op'] == 'insert':
                self.inserts += 1
        else:
            self.rejected.append({'edit': data['edit'], 'reason': data['reason']})


@dataclass
class PlanStep:
    """One planning step: main response, optional correction, optional fallback"""
    phase: str
    main: Optional[PlanProgress] = None
    correction: Optional[PlanProgress] = None
    fallback_done: bool = False

    @property
    def inserts(self) -> int:
        total = self.main.inserts if self.main else 0
        total += self.correction.inserts if self.correction else 0
        return total + (1 if self.fallback_done else 0)


@dataclass
class ResumePoint:
    """Where an interrupted run picks up, computed from its events"""
    config: dict = field(default_factory=dict)
    task_id: str = ''
    mode: str = 'tree'
    last_seq: int = 0
    refinement: Optional[dict] = None
    refinement_events: list = field(default_factory=list)
    plan: Optional[PlanStep] = None
    closed_trajectory: Optional[dict] = None
    evolve_pending: bool = False
    init_done: bool = False
    ended: Optional[dict] = None
    backend_calls: dict = field(default_factory=dict)

    @property
    def finished(self) -> bool:
        return self.ended is not None and self.ended['exit_status'] in FINISHED_STATUSES


def resume_point(events) -> ResumePoint:
    point = ResumePoint()
    for event in events:
        kind, data = event['type'], event['data']
        point.last_seq = event['seq']
        for role, calls in data.get('backend_calls', {}).items():
            point.backend_calls[role] = point.backend_calls.get(role, 0) + calls
        if kind != 'RunEnded':
            point.ended = None

        if kind == 'RunStarted':
            point.config = data.get('config', {})
            point.task_id = data.get('task_id', '')
            point.mode = data.get('mode', 'tree')
        elif kind == 'ActionSelected':
            point.refinement = data
            point.refinement_events = []
            point.plan = None
            point.evolve_pending = False
        elif kind in ('CandidateGenerated', 'GenerationFailed', 'CandidateEvaluated'):
            if point.refinement is not None:
                point.refinement_events.append(event)
        elif kind == 'NodeClosed':
            point.refinement = None
            point.refinement_events = []
            point.closed_trajectory = data.get('trajectory')
            point.evolve_pending = True
            point.plan = None
        elif kind == 'PlannerExchange':
            progress = PlanProgress(phase=data['phase'], edits=data['edits'])
            if data['phase'] == PlannerPhase.CORRECTION and point.plan is not None:
                point.plan.correction = progress
            else:
                point.plan = PlanStep(phase=data['phase'], main=progress)
                point.evolve_pending = False
                if data['phase'] == PlannerPhase.INIT:
                    point.init_done = True
        elif kind == 'EditApplied':
            if point.plan is None:
                continue
            if data.get('fallback'):
                point.plan.fallback_done = True
            elif point.plan.correction is not None:
                point.plan.correction.absorb(event)
            elif point.plan.main is not None:
                point.plan.main.absorb(event)
        elif kind == 'RunEnded':
            point.ended = data
    return point


class TraceStore:
    """Single-writer store for one run directory"""

    def __init__(self, run_dir, clock: Optional[Callable[[], str]] = None, durable: bool = True):
        self.run_dir = Path(run_dir)
        self.clock = clock or wall_clock
        self.durable = durable
        self.next_seq = 1
        self._locked = False

    # Paths

    @property
    def log_path(self) -> Path:
        return self.run_dir / 'run.log'

    @property
    def lock_path(self) -> Path:
        return self.run_dir / 'run.lock'

    @property
    def snapshot_dir(self) -> Path:
        return self.run_dir / 'snapshots'

    @property
    def blob_dir(self) -> Path:
        return self.run_dir / 'blobs'

    @property
    def summary_path(self) -> Path:
        return self.run_dir / 'result.summary'

    def exists(self) -> bool:
        return self.log_path.exists()

    # Lifecycle

    def create(self) -> 'TraceStore':
        if self.exists() and self.log_path.stat().st_size > 0:
            raise TraceError(f'{self.run_dir} already holds a run; use resume_search')
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.snapshot_dir.mkdir(exist_ok=True)
        self.blob_dir.mkdir(exist_ok=True)
        self.acquire_lock()
        self.log_path.touch()
        self.next_seq = 1
        return self

    def open(self) -> 'TraceStore':
        """Reopen an existing run for appending, dropping a torn final line"""
        if not self.exists():
            raise TraceError(f'{self.run_dir} has no run.log')
        self.acquire_lock()
        raw = self.log_path.read_bytes()
        if raw and not raw.endswith(b'\n'):
            cut = raw.rfind(b'\n') + 1
            logger.warning('dropping a torn final event line in %s', self.log_path)
            with open(self.log_path, 'r+b') as handle:
                handle.truncate(cut)
        events = self.events()
        self.next_seq = events[-1]['seq'] + 1 if events else 1
        self.snapshot_dir.mkdir(exist_ok=True)
        self.blob_dir.mkdir(exist_ok=True)
        return self

    def acquire_lock(self) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            holder = self._lock_holder()
            if holder is not None and holder != os.getpid() and _pid_alive(holder):
                raise RunLocked(f'{self.run_dir} is in use by process {holder}') from None
            logger.warning('taking over stale lock of process %s in %s', holder, self.run_dir)
            self.lock_path.write_text(str(os.getpid()), encoding='utf-8')
        else:
            with os.fdopen(fd, 'w') as handle:
                handle.write(str(os.getpid()))
        self._locked = True

    def release_lock(self) -> None:
        if self._locked:
            try:
                self.lock_path.unlink()
            except FileNotFoundError:
                pass
            self._locked = False

    def _lock_holder(self) -> Optional[int]:
        try:
            return int(self.lock_path.read_text(encoding='utf-8').strip())
        except (FileNotFoundError, ValueError):
            return None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.release_lock()
        return False

    # Events

    def append(self, type: str, round: int, data: dict) -> dict:
        """Durably append one event; returns it"""
        event = {'seq': self.next_seq, 'round': round, 'ts': self.clock(), 'type': type, 'data': data}
        serializer = TraceEventSerializer(data=event)
        if not serializer.is_valid():
            raise TraceError(f'invalid {type} event: {flatten_errors(serializer.errors)}')
        line = canonical_json(event) + '\n'
        try:
            with open(self.log_path, 'a', encoding='utf-8') as handle:
                handle.write(line)
                handle.flush()
                if self.durable:
                    os.fsync(handle.fileno())
        except OSError as exc:
            raise TraceError(f'cannot append to {self.log_path}: {exc}') from exc
        self.next_seq += 1
        return event

    def write_blobs(self, kind: str, exchanges) -> list:
        """Store exchanges for the next event; returns their file names"""
        names = []
        for index, exchange in enumerate(exchanges):
            name = f'{self.next_seq:06d}-{kind}-{index}.json'
            payload = exchange.to_dict() if hasattr(exchange, 'to_dict') else exchange
            (self.blob_dir / name).write_text(canonical_json(payload), encoding='utf-8')
            names.append(name)
        return names

    def read_blob(self, name: str) -> dict:
        return json.loads((self.blob_dir / name).read_text(encoding='utf-8'))

    def events(self) -> list:
        if not self.exists():
            return []
        events = []
        lines = self.log_path.read_text(encoding='utf-8').split('\n')
        for number, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                events.append(json.loads(line))
            except json.JSONDecodeError:
                if number == len(lines):
                    logger.warning('ignoring a torn final event line in %s', self.log_path)
                    break
                raise TraceError(f'{self.log_path}:{number} is not a JSON event') from None
        return events

    # Snapshots

    def snapshot(self, state: SearchState, event_seq: Optional[int] = None) -> Path:
        event_seq = self.next_seq - 1 if event_seq is None else event_seq
        data = state_to_data(state)
        document = {
            'format_version': SNAPSHOT_FORMAT_VERSION,
            'checksum': sha256_text(canonical_json(data)),
            'event_seq': event_seq,
            'state': data,
        }
        path = self.snapshot_dir / f'state-{event_seq:06d}.json'
        tmp = path.with_suffix('.tmp')
        tmp.write_text(canonical_json(document), encoding='utf-8')
        os.replace(tmp, path)
        return path

    def latest_snapshot(self) -> Optional[Path]:
        if not self.snapshot_dir.exists():
            return None
        snapshots = sorted(self.snapshot_dir.glob('state-*.json'))
        return snapshots[-1] if snapshots else None

    @staticmethod
    def load_snapshot(path) -> tuple:
        """(state, event_seq); raises on version or checksum mismatch"""
        path = Path(path)
        try:
            document = json.loads(path.read_text(encoding='utf-8'))
        except json.JSONDecodeError as exc:
            raise SnapshotChecksumError(f'{path} is corrupted: {exc}') from None
        serializer = SnapshotSerializer(data=document)
        if not serializer.is_valid():
            raise SnapshotChecksumError(f'{path} is corrupted: {flatten_errors(serializer.errors)}')
        document = serializer.validated_data
        if document['format_version'] != SNAPSHOT_FORMAT_VERSION:
            raise SnapshotVersionError(
                f'{path} has snapshot format {document["format_version"]}; '
                f'this version reads format {SNAPSHOT_FORMAT_VERSION} only'
            )
        if sha256_text(canonical_json(document['state'])) != document['checksum']:
            raise SnapshotChecksumError(f'{path} failed its checksum')
        return state_from_data(document['state']), document['event_seq']

    def restore(self) -> Optional[SearchState]:
        """Latest snapshot plus the events after it"""
        events = self.events()
        state, after = None, 0
        latest = self.latest_snapshot()
        if latest is not None:
            state, after = self.load_snapshot(latest)
            if events and after > events[-1]['seq']:
                raise TraceError(f'{latest} is ahead of {self.log_path}')
        return replay([e for e in events if e['seq'] > after], state)

    # Results

    def write_summary(self, summary: dict, best_files: Optional[dict] = None) -> None:
        self.summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + '\n', encoding='utf-8')
        if best_files:
            best_dir = self.run_dir / 'best'
            best_dir.mkdir(exist_ok=True)
            for name, text in best_files.items():
                (best_dir / name).write_text(text, encoding='utf-8')

    def read_summary(self) -> Optional[dict]:
        if not self.summary_path.exists():
            return None
        return json.loads(self.summary_path.read_text(encoding='utf-8'))


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True
