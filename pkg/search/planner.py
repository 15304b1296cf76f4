"""
The world model: reads the search state and the latest refinement, and
answers with tree edits.

Planner talks to a chat backend through the planner_prompt template and a
fenced JSON block; RulePlanner is a deterministic rule table over the
directive vocabulary of synthetic tasks.
"""

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from django.conf import settings
from django.template.loader import render_to_string

from .exceptions import BackendUnavailable, MalformedResponse, ParseError
from .llm import Exchange
from .models import Insert, NodeStatus, PlannerPhase, Prune, SearchState, Update
from .serializers import PlannerRulesSerializer, TreeEditSerializer, flatten_errors
from .utils import byte_length, format_score, truncate_head, truncate_tail

logger = logging.getLogger(__name__)

FALLBACK_INTENT = 'produce a correct baseline implementation of the reference'
FALLBACK_PRIORITY = 0.5

FENCED_BLOCK = re.compile(r'```[\w-]*[ \t]*\n(?P<body>.*?)```', re.DOTALL)

PHASE_INSTRUCTIONS = {
    PlannerPhase.INIT: (
        'The tree holds only the root. Propose the first high-level optimization hypotheses as '
        'Inserts under the root and rate each with a priority.'
    ),
    PlannerPhase.EVOLVE: (
        'Use the latest refinement to revise your beliefs: Insert deeper refinements under nodes '
        'that look promising, Update the priorities of open nodes, and Prune branches the evidence '
        'rules out.'
    ),
    PlannerPhase.RECOVERY: (
        'No open hypotheses remain but budget is left. Insert at least one new hypothesis, '
        'otherwise the run ends.'
    ),
    PlannerPhase.CORRECTION: (
        'Some of your edits could not be applied. Reply with corrected versions of those edits only.'
    ),
}


@dataclass
class Trajectory:
    """What the planner sees of the refinement that just closed a node"""
    node_id: str
    intent: str
    samples: int
    best_score: Optional[float] = None
    observation_excerpt: str = ''
    generation_failures: int = 0
    exit_reason: str = 'stagnated'

    def render(self) -> str:
        lines = [f'action {self.node_id}: {self.intent}',
                 f'samples evaluated: {self.samples} (generation failures: {self.generation_failures}, '
                 f'exit: {self.exit_reason})']
        if self.best_score is None:
            lines.append('no candidate was evaluated')
        else:
            lines.append(f'best score: {format_score(self.best_score)}')
            if self.observation_excerpt:
                lines.append('observation:')
                lines.append(self.observation_excerpt)
        return '\n'.join(lines)


@dataclass
class PlannerRequest:
    phase: str
    task_digest: str
    tree_view: str
    last_trajectory: Optional[Trajectory] = None
    history_window: str = ''
    round: int = 0
    budget_remaining: int = 0
    rejected: list = field(default_factory=list)
    state: Optional[SearchState] = None


@dataclass
class PlannerResponse:
    edits: list = field(default_factory=list)
    commentary: str = ''
    exchanges: list = field(default_factory=list)
    errors: list = field(default_factory=list)


def render_tree_view(state: SearchState) -> str:
    """Every live node depth first, then the pruned tombstones"""
    lines, tombstones = [], []
    for node_id in state.subtree(state.root_id):
        node = state.nodes[node_id]
        if node.status == NodeStatus.PRUNED:
            tombstones.append(f'- {node.node_id} "{node.intent}" (pruned in round {node.pruned_round})')
            continue
        depth = len(state.ancestors(node_id))
        indent = '  ' * depth
        if node.is_root:
            lines.append(f'{node.node_id} [root] {node.intent}')
        elif node.status == NodeStatus.OPEN:
            lines.append(f'{indent}{node.node_id} [open V={node.priority:.2f}] {node.intent}')
        else:
            lines.append(f'{indent}{node.node_id} [closed J={format_score(node.attached_score)}] {node.intent}')
    if tombstones:
        lines.append('Pruned:')
        lines.extend(tombstones)
    return '\n'.join(lines)


def render_history(entries, budget_bytes: int) -> str:
    """Newest entries within `budget_bytes`; older ones collapse into a count"""
    if budget_bytes <= 0:
        return ''
    lines = [f'[r{e.round}] {e.text}' for e in entries]
    kept, used = [], 0
    for line in reversed(lines):
        size = byte_length(line) + 1
        if used + size > budget_bytes:
            break
        kept.append(line)
        used += size
    kept.reverse()

    omitted = len(lines) - len(kept)
    if omitted:
        summary = f'[{omitted} earlier events omitted]'
        while kept and used + byte_length(summary) + 1 > budget_bytes:
            used -= byte_length(kept.pop(0)) + 1
            omitted += 1
            summary = f'[{omitted} earlier events omitted]'
        kept.insert(0, summary)
    return truncate_head('\n'.join(kept), budget_bytes)


def build_request(phase, task, state: SearchState, trajectory: Optional[Trajectory] = None,
                  rejected=(), history_bytes: Optional[int] = None) -> PlannerRequest:
    if history_bytes is None:
        history_bytes = settings.HYPOTREE['HISTORY_WINDOW_BYTES']
    return PlannerRequest(
        phase=phase,
        task_digest=task.digest(),
        tree_view=render_tree_view(state),
        last_trajectory=trajectory,
        history_window=render_history(state.history, history_bytes),
        round=state.round,
        budget_remaining=state.budget_remaining,
        rejected=list(rejected),
        state=state,
    )


def parse_planner_output(raw_text: str) -> PlannerResponse:
    """
    Edits from the last fenced block; all other text is commentary.
    ParseError messages start with NoBlock, InvalidJSON, InvalidEdit or OutOfRange.
    """
    blocks = list(FENCED_BLOCK.finditer(raw_text or ''))
    if not blocks:
        raise ParseError('NoBlock: the reply has no fenced edit block', fragment=truncate_tail(raw_text or '', 400))
    last = blocks[-1]
    body = last.group('body')
    commentary = (raw_text[:last.start()] + raw_text[last.end():]).strip()

    try:
        data = json.loads(body)
    except json.JSONDecodeError as exc:
        raise ParseError(f'InvalidJSON: {exc}', fragment=body) from None
    if isinstance(data, dict):
        data = data.get('edits')
    if not isinstance(data, list):
        raise ParseError('InvalidEdit: expected a list of edits or {"edits": [...]}', fragment=body)

    edits = []
    for item in data:
        if not isinstance(item, dict):
            raise ParseError('InvalidEdit: every edit must be an object', fragment=json.dumps(item))
        serializer = TreeEditSerializer(data=item)
        if not serializer.is_valid():
            message = flatten_errors(serializer.errors)
            tag = 'OutOfRange' if 'OutOfRange' in message else 'InvalidEdit'
            if message.startswith(tag):
                raise ParseError(message, fragment=json.dumps(item, sort_keys=True))
            raise ParseError(f'{tag}: {message}', fragment=json.dumps(item, sort_keys=True))
        edits.append(serializer.save())
    return PlannerResponse(edits=edits, commentary=commentary)


class Planner:
    """LLM world model: render, ask, parse, re-prompt with the parse error"""

    def __init__(self, backend, retries: int = 2):
        self.backend = backend
        self.retries = retries

    @property
    def name(self) -> str:
        return self.backend.name

    def plan_init(self, request: PlannerRequest) -> PlannerResponse:
        return self._ask(request)

    def plan_evolve(self, request: PlannerRequest) -> PlannerResponse:
        return self._ask(request)

    def plan_recovery(self, request: PlannerRequest) -> PlannerResponse:
        return self._ask(request)

    def plan_correction(self, request: PlannerRequest) -> PlannerResponse:
        return self._ask(request)

    def render(self, request: PlannerRequest) -> str:
        return render_to_string('search/planner_prompt.txt', {
            'task_digest': request.task_digest,
            'round': request.round,
            'budget_remaining': request.budget_remaining,
            'tree_view': request.tree_view,
            'trajectory': request.last_trajectory.render() if request.last_trajectory else '',
            'history': request.history_window,
            'rejected': request.rejected,
            'instructions': PHASE_INSTRUCTIONS[request.phase],
        })

    def _ask(self, request: PlannerRequest) -> PlannerResponse:
        messages = [{'role': 'user', 'content': self.render(request)}]
        exchanges, errors = [], []
        for attempt in range(self.retries + 1):
            try:
                raw = self.backend.complete(messages, context=request)
            except MalformedResponse as exc:
                raw, error = '', ParseError(f'InvalidJSON: {exc}')
            else:
                try:
                    response = parse_planner_output(raw)
                except ParseError as exc:
                    error = exc
                else:
                    exchanges.append(Exchange(self.backend.name, messages, raw, meta={'attempt': attempt, 'ok': True}))
                    response.exchanges = exchanges
                    response.errors = errors
                    return response
            exchanges.append(Exchange(self.backend.name, messages, raw,
                                      meta={'attempt': attempt, 'ok': False, 'error': str(error)}))
            errors.append(str(error))
            logger.info('planner reply rejected (%s), attempt %s of %s', error, attempt + 1, self.retries + 1)
            messages = messages + [
                {'role': 'assistant', 'content': raw},
                {'role': 'user', 'content': (
                    f'Your reply could not be used: {error}\n'
                    f'Offending fragment:\n{error.fragment}\n'
                    'Reply again with exactly one ```json block holding the edits.'
                )},
            ]
        return PlannerResponse(edits=[], commentary='', exchanges=exchanges, errors=errors)


def load_rules(path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise BackendUnavailable(f'cannot read planner rules {path}: {exc}') from None
    serializer = PlannerRulesSerializer(data=data)
    if not serializer.is_valid():
        raise BackendUnavailable(f'invalid planner rules {path}: {flatten_errors(serializer.errors)}')
    return serializer.validated_data


class RulePlanner:
    """
    Deterministic planner over intents of the form "add <directive>".

    init: one Insert per directive applicable at the root, at its prior.
    evolve: prune a closure trailing the best by more than the margin;
    otherwise extend it by each applicable directive, at prior + boost when
    it improved on its parent and prior * decay when it did not; a new
    global best damps its open siblings by decay.
    recovery: unused recovery_queue entries, else extensions of the best node.
    """

    name = 'rule-planner'

    def __init__(self, rules: dict):
        self.priors = dict(rules['priors'])
        self.prerequisites = {k: set(v) for k, v in rules.get('prerequisites', {}).items()}
        self.boost = rules.get('boost', 0.1)
        self.decay = rules.get('decay', 0.8)
        self.prune_margin = rules.get('prune_margin', 30.0)
        self.recovery_queue = list(rules.get('recovery_queue', []))

    @classmethod
    def from_file(cls, path):
        return cls(load_rules(path))

    @staticmethod
    def directives_of(state: SearchState, node_id: str) -> list:
        chain = [node_id] + state.ancestors(node_id)
        found = []
        for current in reversed(chain):
            intent = state.nodes[current].intent
            if current != state.root_id and intent.startswith('add '):
                found.append(intent[len('add '):].strip())
        return found

    def applicable(self, applied) -> list:
        applied = set(applied)
        return [d for d in self.priors if d not in applied and self.prerequisites.get(d, set()) <= applied]

    def _known_sets(self, state: SearchState) -> set:
        return {frozenset(self.directives_of(state, n)) for n in state.nodes if n != state.root_id}

    def _extensions(self, state: SearchState, node_id: str, priority_of) -> list:
        applied = self.directives_of(state, node_id)
        known = self._known_sets(state)
        return [
            Insert(node_id, f'add {d}', round(priority_of(d), 4))
            for d in self.applicable(applied)
            if frozenset(applied + [d]) not in known
        ]

    def plan_init(self, request: PlannerRequest) -> PlannerResponse:
        state = request.state
        edits = self._extensions(state, state.root_id, lambda d: self.priors[d])
        return PlannerResponse(edits=edits, commentary=f'{len(edits)} root hypotheses from the rule table')

    def plan_evolve(self, request: PlannerRequest) -> PlannerResponse:
        state, trajectory = request.state, request.last_trajectory
        node = state.nodes.get(trajectory.node_id) if trajectory else None
        if node is None or node.attached_score is None:
            return PlannerResponse(commentary='nothing was evaluated')

        score = node.attached_score
        if state.best_score - score > self.prune_margin:
            return PlannerResponse(
                edits=[Prune(node.node_id, f'trails the best by {state.best_score - score:.2f}')],
                commentary='pruned a weak branch',
            )

        parent_score = None
        for ancestor in state.ancestors(node.node_id):
            if state.nodes[ancestor].attached_score is not None:
                parent_score = state.nodes[ancestor].attached_score
                break
        improved = parent_score is None or score > parent_score
        if improved:
            edits = self._extensions(state, node.node_id, lambda d: min(1.0, self.priors[d] + self.boost))
        else:
            edits = self._extensions(state, node.node_id, lambda d: self.priors[d] * self.decay)

        if state.best_program_id is not None and state.best_program_id == node.attached_program_id:
            parent = state.nodes[node.parent_node_id]
            for sibling_id in parent.children:
                sibling = state.nodes[sibling_id]
                if sibling_id != node.node_id and sibling.status == NodeStatus.OPEN:
                    edits.append(Update(sibling_id, round(sibling.priority * self.decay, 4),
                                        f'sibling {node.node_id} set a new best'))
        return PlannerResponse(edits=edits, commentary='improved' if improved else 'no improvement over parent')

    def plan_recovery(self, request: PlannerRequest) -> PlannerResponse:
        state = request.state
        best_node = next(
            (n.node_id for n in state.nodes.values()
             if state.best_program_id is not None and n.attached_program_id == state.best_program_id
             and n.status != NodeStatus.PRUNED),
            state.root_id,
        )
        edits = []
        for entry in self.recovery_queue:
            parent_id = {'root': state.root_id, 'best': best_node}.get(entry['parent'], entry['parent'])
            parent = state.nodes.get(parent_id)
            if parent is None or parent.status == NodeStatus.PRUNED:
                continue
            if any(state.nodes[c].intent == entry['intent'] for c in parent.children):
                continue
            edits.append(Insert(parent_id, entry['intent'], entry['priority']))
        if not edits:
            edits = self._extensions(state, best_node, lambda d: self.priors[d])
        return PlannerResponse(edits=edits, commentary=f'recovery proposes {len(edits)} inserts')

    def plan_correction(self, request: PlannerRequest) -> PlannerResponse:
        return PlannerResponse(commentary='rule planner does not revise rejected edits')
