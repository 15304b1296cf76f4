"""
Domain types and the search-tree state machine.

Nothing here touches the database: the choice enums reuse Django's
TextChoices, the records are plain dataclasses. SearchState is mutated only
through apply_edit, select_action/record_closure and consume_budget, which
keep the frontier index and the budget ledger consistent.
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Union

from django.db import models

from .exceptions import EmptyFrontier, IllegalTarget, OutOfRange, UnknownNode
from .utils import format_score


ROOT_ID = 'n0000'


class ProgramOrigin(models.TextChoices):
    PLANNER_SEEDED = 'planner-seeded', 'Planner seeded'
    REFINEMENT_SAMPLE = 'refinement-sample', 'Refinement sample'
    BASELINE_MUTATION = 'baseline-mutation', 'Baseline mutation'


class WorkloadStatus(models.TextChoices):
    PASS = 'pass', 'Pass'
    WRONG_ANSWER = 'wrong-answer', 'Wrong answer'
    COMPILE_ERROR = 'compile-error', 'Compile error'
    RUNTIME_ERROR = 'runtime-error', 'Runtime error'
    TIMEOUT = 'timeout', 'Timeout'


class NodeStatus(models.TextChoices):
    OPEN = 'open', 'Open'
    CLOSED = 'closed', 'Closed'
    PRUNED = 'pruned', 'Pruned'


class PlannerPhase(models.TextChoices):
    INIT = 'init', 'Init'
    EVOLVE = 'evolve', 'Evolve'
    RECOVERY = 'recovery', 'Recovery'
    CORRECTION = 'correction', 'Correction'


class ExitStatus(models.TextChoices):
    COMPLETED = 'completed', 'Completed'
    FRONTIER_EXHAUSTED = 'frontier-exhausted', 'Frontier exhausted'
    INFRASTRUCTURE_ERROR = 'infrastructure-error', 'Infrastructure error'
    BACKEND_ERROR = 'backend-error', 'Backend error'


@dataclass
class Program:
    """A candidate implementation: named source files plus lineage"""
    program_id: str
    files: dict
    parent_action_id: Optional[str] = None
    round: int = 0
    created_from: str = ProgramOrigin.REFINEMENT_SAMPLE

    def __post_init__(self):
        if not self.files:
            raise ValueError('a program needs at least one file')


@dataclass
class WorkloadResult:
    """Outcome of one workload; latency is present iff the workload passed"""
    workload_id: str
    status: str
    latency_us: Optional[float] = None
    log_excerpt: str = ''

    def __post_init__(self):
        if self.status == WorkloadStatus.PASS:
            if self.latency_us is None or not self.latency_us > 0:
                raise ValueError(f'workload {self.workload_id}: pass needs a positive latency')
        elif self.latency_us is not None:
            raise ValueError(f'workload {self.workload_id}: latency only allowed on pass')

    @property
    def passed(self) -> bool:
        return self.status == WorkloadStatus.PASS


@dataclass
class Observation:
    """The evaluator tuple: correctness, per-workload results, diagnostics"""
    workload_results: list
    metadata: str = ''

    @property
    def correct(self) -> bool:
        return bool(self.workload_results) and all(r.passed for r in self.workload_results)

    @classmethod
    def failed(cls, workload_ids, status, message, metadata=''):
        """Every workload failing the same way (compile error, timeout...)"""
        return cls(
            workload_results=[
                WorkloadResult(workload_id=w, status=status, log_excerpt=message)
                for w in workload_ids
            ],
            metadata=metadata or message,
        )


@dataclass
class PriorityEntry:
    round: int
    value: float
    rationale: str = ''


@dataclass
class HistoryEntry:
    round: int
    text: str


@dataclass
class ActionNode:
    """
    One hypothesis: an intent applied to the program of its nearest closed
    ancestor. Open nodes form the frontier; closed nodes carry the best
    program their refinement produced; pruned nodes are kept as tombstones.
    """
    node_id: str
    intent: str
    parent_node_id: Optional[str] = None
    status: str = NodeStatus.OPEN
    priority: Optional[float] = None
    priority_history: list = field(default_factory=list)
    attached_program_id: Optional[str] = None
    attached_score: Optional[float] = None
    children: list = field(default_factory=list)
    inserted_round: int = 0
    closed_round: Optional[int] = None
    pruned_round: Optional[int] = None
    samples_evaluated: int = 0

    @property
    def is_root(self) -> bool:
        return self.parent_node_id is None


# Tree edits: the planner's state-transition vocabulary

@dataclass(frozen=True)
class Insert:
    parent_node_id: str
    intent: str
    priority: float
    op = 'insert'

    def describe(self) -> str:
        return f'insert under {self.parent_node_id}: {self.intent} (V={self.priority:g})'


@dataclass(frozen=True)
class Update:
    node_id: str
    new_priority: float
    rationale: str = ''
    op = 'update'

    def describe(self) -> str:
        return f'update {self.node_id} to V={self.new_priority:g}: {self.rationale}'


@dataclass(frozen=True)
class Prune:
    node_id: str
    rationale: str = ''
    op = 'prune'

    def describe(self) -> str:
        return f'prune {self.node_id}: {self.rationale}'


TreeEdit = Union[Insert, Update, Prune]


@dataclass
class SearchState:
    """
    The search tree plus frontier index, round counter and budget ledger.
    `round == budget_total - budget_remaining` holds at all times.
    """
    nodes: dict
    root_id: str
    frontier: set
    round: int
    budget_total: int
    budget_remaining: int
    best_program_id: Optional[str] = None
    # moves only at record_closure; the per-evaluation running max is replayed from CandidateEvaluated
    best_score: float = -math.inf
    next_seq: int = 1
    programs: dict = field(default_factory=dict)
    observations: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, objective: str, budget: int) -> 'SearchState':
        """Fresh state with only the synthetic root (closed, never selectable)"""
        if budget < 1:
            raise ValueError('budget must be at least 1')
        root = ActionNode(
            node_id=ROOT_ID,
            intent=objective,
            status=NodeStatus.CLOSED,
            closed_round=0,
        )
        return cls(
            nodes={ROOT_ID: root},
            root_id=ROOT_ID,
            frontier=set(),
            round=0,
            budget_total=budget,
            budget_remaining=budget,
        )

    def peek_node_id(self) -> str:
        return f'n{self.next_seq:04d}'

    def _allocate_node_id(self) -> str:
        node_id = self.peek_node_id()
        self.next_seq += 1
        return node_id

    def node(self, node_id: str) -> ActionNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(f'unknown node {node_id!r}') from None

    def derived_frontier(self) -> set:
        return {n.node_id for n in self.nodes.values() if n.status == NodeStatus.OPEN}

    def consume_budget(self) -> int:
        """Account for one evaluator invocation; returns the new round number"""
        if self.budget_remaining <= 0:
            raise ValueError('budget exhausted')
        self.budget_remaining -= 1
        self.round += 1
        return self.round

    def extend_budget(self, amount: int) -> None:
        if amount < 1:
            raise ValueError('budget extension must be positive')
        self.budget_total += amount
        self.budget_remaining += amount

    @property
    def rounds_used(self) -> int:
        return self.budget_total - self.budget_remaining

    def ancestors(self, node_id: str) -> list:
        """Node ids from the parent of `node_id` up to the root"""
        chain = []
        current = self.node(node_id).parent_node_id
        while current is not None:
            chain.append(current)
            current = self.nodes[current].parent_node_id
        return chain

    def subtree(self, node_id: str) -> list:
        """`node_id` and all its descendants, depth first in child order"""
        order, stack = [], [node_id]
        while stack:
            current = stack.pop()
            order.append(current)
            stack.extend(reversed(self.nodes[current].children))
        return order

    def parent_program(self, node_id: str) -> Optional[Program]:
        """The x_parent of an action: the program of its nearest ancestor with one"""
        for ancestor in self.ancestors(node_id):
            program_id = self.nodes[ancestor].attached_program_id
            if program_id is not None:
                return self.programs[program_id]
        return None

    def best_program(self) -> Optional[Program]:
        if self.best_program_id is None:
            return None
        return self.programs.get(self.best_program_id)

    def note(self, text: str, round: Optional[int] = None) -> None:
        self.history.append(HistoryEntry(round=self.round if round is None else round, text=text))

    def check_invariants(self) -> list:
        """Return human-readable violations (empty when consistent)"""
        problems = []
        if self.frontier != self.derived_frontier():
            problems.append('frontier index differs from node statuses')
        if self.round != self.rounds_used:
            problems.append('round counter differs from budget ledger')
        for node in self.nodes.values():
            if node.parent_node_id is not None and node.parent_node_id not in self.nodes:
                problems.append(f'{node.node_id}: missing parent')
            if node.status == NodeStatus.OPEN and node.attached_program_id is not None:
                problems.append(f'{node.node_id}: open node with a program')
            if node.priority is not None and not 0.0 <= node.priority <= 1.0:
                problems.append(f'{node.node_id}: priority out of range')
            rounds = [entry.round for entry in node.priority_history]
            if rounds != sorted(rounds):
                problems.append(f'{node.node_id}: priority history not ordered by round')
        seen, stack = set(), [self.root_id]
        while stack:
            current = stack.pop()
            if current in seen:
                problems.append(f'{current}: reachable twice (cycle or shared child)')
                continue
            seen.add(current)
            stack.extend(self.nodes[current].children)
        if seen != set(self.nodes):
            problems.append('nodes unreachable from the root')
        closed_samples = sum(
            n.samples_evaluated for n in self.nodes.values() if n.closed_round is not None
        )
        if closed_samples > self.rounds_used:
            problems.append('closed nodes account for more samples than rounds used')
        return problems


def _check_priority(value) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise OutOfRange(f'priority {value!r} is not a number') from None
    if math.isnan(value) or not 0.0 <= value <= 1.0:
        raise OutOfRange(f'priority {value!r} is outside [0, 1]')
    return value


def validate_edit(state: SearchState, edit: TreeEdit) -> None:
    """
    Raise UnknownNode, IllegalTarget or OutOfRange (checked in that order)
    if `edit` cannot be applied to `state`. Never mutates.
    """
    if isinstance(edit, Insert):
        parent = state.node(edit.parent_node_id)
        if parent.status == NodeStatus.PRUNED:
            raise IllegalTarget(f'cannot insert under pruned node {parent.node_id}')
        if not edit.intent or not edit.intent.strip():
            raise IllegalTarget('insert needs a non-empty intent')
        _check_priority(edit.priority)
    elif isinstance(edit, Update):
        node = state.node(edit.node_id)
        if node.status != NodeStatus.OPEN:
            raise IllegalTarget(f'update needs an open node; {node.node_id} is {node.status}')
        _check_priority(edit.new_priority)
    elif isinstance(edit, Prune):
        node = state.node(edit.node_id)
        if node.is_root:
            raise IllegalTarget('the root cannot be pruned')
        if node.status == NodeStatus.PRUNED:
            raise IllegalTarget(f'{node.node_id} is already pruned')
    else:
        raise TypeError(f'not a tree edit: {edit!r}')


def apply_edit(state: SearchState, edit: TreeEdit, round: int) -> SearchState:
    """
    Apply one Insert/Update/Prune to `state` in place and return it.
    On error (see validate_edit) the state is left untouched.
    """
    validate_edit(state, edit)

    if isinstance(edit, Insert):
        parent = state.nodes[edit.parent_node_id]
        priority = _check_priority(edit.priority)
        node = ActionNode(
            node_id=state._allocate_node_id(),
            intent=edit.intent.strip(),
            parent_node_id=parent.node_id,
            priority=priority,
            priority_history=[PriorityEntry(round=round, value=priority, rationale='inserted')],
            inserted_round=round,
        )
        state.nodes[node.node_id] = node
        parent.children.append(node.node_id)
        state.frontier.add(node.node_id)
        state.note(f'insert {node.node_id} under {parent.node_id}: {node.intent} (V={priority:g})', round)

    elif isinstance(edit, Update):
        node = state.nodes[edit.node_id]
        priority = _check_priority(edit.new_priority)
        node.priority = priority
        node.priority_history.append(PriorityEntry(round=round, value=priority, rationale=edit.rationale))
        state.note(f'update {node.node_id} to V={priority:g}: {edit.rationale}', round)

    else:
        node = state.nodes[edit.node_id]
        for node_id in state.subtree(node.node_id):
            member = state.nodes[node_id]
            if member.status != NodeStatus.PRUNED:
                member.status = NodeStatus.PRUNED
                member.pruned_round = round
                state.frontier.discard(node_id)
        state.note(f'prune {node.node_id} ({node.intent}): {edit.rationale}', round)
    return state


def selection_key(node: ActionNode):
    """Highest priority first, then earliest insertion, then smallest id"""
    return (-node.priority, node.inserted_round, node.node_id)


def select_action(state: SearchState) -> str:
    if not state.frontier:
        raise EmptyFrontier('no open actions remain')
    return min((state.nodes[n] for n in state.frontier), key=selection_key).node_id


def record_closure(
    state: SearchState,
    node_id: str,
    best_program: Optional[Program] = None,
    best_obs: Optional[Observation] = None,
    best_score: Optional[float] = None,
    samples_evaluated: int = 0,
) -> SearchState:
    """Close a selected action, attaching its refinement-best program if any"""
    node = state.node(node_id)
    if node.status != NodeStatus.OPEN:
        raise IllegalTarget(f'cannot close {node_id}: it is {node.status}')
    node.status = NodeStatus.CLOSED
    node.closed_round = state.round
    node.samples_evaluated = samples_evaluated
    state.frontier.discard(node_id)
    if best_program is not None:
        node.attached_program_id = best_program.program_id
        node.attached_score = best_score
        state.programs[best_program.program_id] = best_program
        if best_obs is not None:
            state.observations[best_program.program_id] = best_obs
        if best_score is not None and best_score > state.best_score:
            state.best_score = best_score
            state.best_program_id = best_program.program_id
    state.note(
        f'closed {node_id} ({node.intent}) score {format_score(best_score)} '
        f'after {samples_evaluated} samples'
    )
    return state
