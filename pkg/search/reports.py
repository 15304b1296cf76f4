"""
Read-only views over finished or running traces: best-so-far curves,
Fast_p tables and search-tree exports.
"""

import csv
import io
import json

import numpy as np

from .exceptions import EmptyInput, TraceError
from .models import NodeStatus
from .tasks import fast_p
from .trace import apply_event
from .utils import finite_or_none, format_score

STATUS_COLORS = {
    NodeStatus.OPEN: 'lightblue',
    NodeStatus.CLOSED: 'palegreen',
    NodeStatus.PRUNED: 'lightpink',
}


def evaluated_events(events) -> list:
    return [e for e in events if e['type'] == 'CandidateEvaluated']


def best_so_far_curve(events) -> list:
    """(round, best aggregate score up to and including that round)"""
    evaluated = evaluated_events(events)
    if not evaluated:
        raise EmptyInput('trace has no evaluated candidates')
    curve, best = [], -np.inf
    for event in evaluated:
        best = max(best, event['data']['scores']['aggregate'])
        curve.append((event['round'], float(best)))
    return curve


def curve_band(curves) -> list:
    """
    Per-round (round, min, mean, max) over several best-so-far curves.
    A shorter curve holds its final value for the remaining rounds.
    """
    if not curves:
        raise EmptyInput('no curves to combine')
    length = max(len(c) for c in curves)
    matrix = np.array([[c[min(i, len(c) - 1)][1] for i in range(length)] for c in curves], dtype=float)
    return [
        (i + 1, float(matrix[:, i].min()), float(matrix[:, i].mean()), float(matrix[:, i].max()))
        for i in range(length)
    ]


def best_evaluation(events) -> dict:
    """The first CandidateEvaluated event holding the run's top score"""
    evaluated = evaluated_events(events)
    if not evaluated:
        raise EmptyInput('trace has no evaluated candidates')
    best = evaluated[0]
    for event in evaluated[1:]:
        if event['data']['scores']['aggregate'] > best['data']['scores']['aggregate']:
            best = event
    return best


def best_speedups(events) -> dict:
    """Per-workload p_ref / p of the best program (score / 100; 0 when incorrect)"""
    best = best_evaluation(events)
    workload_ids = [r['workload_id'] for r in best['data']['observation']['workload_results']]
    per_workload = best['data']['scores']['per_workload']
    return {w: s / 100.0 for w, s in zip(workload_ids, per_workload)}


def fast_p_table(runs, thresholds) -> list:
    """
    One row per run, in the order given: best program, aggregate score,
    per-workload speedups and fast_p at each threshold.

    `runs` is a sequence of (label, events).
    """
    thresholds = sorted(float(t) for t in thresholds)
    rows = []
    for label, events in runs:
        best = best_evaluation(events)
        speedups = best_speedups(events)
        rows.append({
            'run': label,
            'program_id': best['data']['program_id'],
            'best_score': best['data']['scores']['aggregate'],
            'speedups': speedups,
            'fast_p': {t: fast_p(list(speedups.values()), t) for t in thresholds},
        })
    return rows


# CSV

def curves_csv(curves: dict) -> str:
    """Side-by-side best-so-far curves plus their min/mean/max band"""
    labels = list(curves)
    band = curve_band([curves[label] for label in labels])
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(['round'] + labels + ['min', 'mean', 'max'])
    for index, (round, low, mean, high) in enumerate(band):
        values = []
        for label in labels:
            curve = curves[label]
            values.append(f'{curve[index][1]:.6f}' if index < len(curve) else '')
        writer.writerow([round] + values + [f'{low:.6f}', f'{mean:.6f}', f'{high:.6f}'])
    return buffer.getvalue()


def fast_p_csv(rows: list) -> str:
    if not rows:
        raise EmptyInput('no runs to tabulate')
    thresholds = list(rows[0]['fast_p'])
    workloads = list(rows[0]['speedups'])
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(
        ['run', 'program_id', 'best_score']
        + [f'fast_{t:g}' for t in thresholds]
        + [f'speedup_{w}' for w in workloads]
    )
    for row in rows:
        writer.writerow(
            [row['run'], row['program_id'], f'{row["best_score"]:.6f}']
            + [f'{row["fast_p"][t]:.4f}' for t in thresholds]
            + [f'{row["speedups"].get(w, 0.0):.6f}' for w in workloads]
        )
    return buffer.getvalue()


# Tree export

def _edit_label(round: int, data: dict) -> str:
    op = data['op']
    if op == 'insert':
        return f'r{round} insert V={data["priority"]:.2f}'
    if op == 'update':
        return f'r{round} update V={data["priority"]:.2f}'
    return f'r{round} prune'


def replay_tree(events):
    """Final state plus, per node, the accepted edits that touched it"""
    state, annotations = None, {}
    for event in events:
        if event['type'] == 'RunStarted' and event['data'].get('mode', 'tree') != 'tree':
            raise TraceError('baseline runs have no search tree')
        if event['type'] == 'EditApplied' and event['data']['accepted'] and state is not None:
            data = event['data']['edit']
            target = state.peek_node_id() if data['op'] == 'insert' else data['node']
            annotations.setdefault(target, []).append(_edit_label(event['round'], data))
        state = apply_event(state, event)
    if state is None:
        raise TraceError('trace has no RunStarted event')
    return state, annotations


def _node_record(state, node, annotations) -> dict:
    return {
        'node_id': node.node_id,
        'parent': node.parent_node_id,
        'intent': node.intent,
        'status': str(node.status),
        'priority': node.priority,
        'score': finite_or_none(node.attached_score),
        'program_id': node.attached_program_id,
        'samples_evaluated': node.samples_evaluated,
        'inserted_round': node.inserted_round,
        'closed_round': node.closed_round,
        'pruned_round': node.pruned_round,
        'edits': annotations.get(node.node_id, []),
    }


def export_tree_structured(events) -> dict:
    state, annotations = replay_tree(events)
    return {
        'root_id': state.root_id,
        'round': state.round,
        'best_program_id': state.best_program_id,
        'best_score': finite_or_none(state.best_score),
        'nodes': [_node_record(state, state.nodes[n], annotations) for n in state.subtree(state.root_id)],
    }


def _quote(text: str) -> str:
    return text.replace('\\', '\\\\').replace('"', '\\"')


def export_tree_dot(events) -> str:
    state, annotations = replay_tree(events)
    lines = [
        'digraph search_tree {',
        '\tnode [shape=box, style=filled, fontname="Helvetica", fontsize=10];',
    ]
    for node_id in state.subtree(state.root_id):
        node = state.nodes[node_id]
        if node.is_root:
            label = f'{node_id}: root'
            attrs = 'fillcolor="lightgray"'
        else:
            label = f'{node_id}: {_quote(node.intent)}'
            if node.status == NodeStatus.CLOSED:
                label += f'\\nJ={format_score(node.attached_score)}'
            elif node.status == NodeStatus.OPEN:
                label += f'\\nV={node.priority:.2f}'
            edits = annotations.get(node_id, [])
            if edits:
                label += '\\n' + '; '.join(edits)
            attrs = f'fillcolor="{STATUS_COLORS[node.status]}"'
            if node.status == NodeStatus.PRUNED:
                attrs += ', style="filled,dashed"'
        lines.append(f'\t"{node_id}" [label="{label}", {attrs}];')
    for node_id in state.subtree(state.root_id):
        for child in state.nodes[node_id].children:
            lines.append(f'\t"{node_id}" -> "{child}";')
    lines.append('}')
    return '\n'.join(lines) + '\n'


def export_tree(events, format: str = 'graph-dot') -> str:
    if format == 'graph-dot':
        return export_tree_dot(events)
    if format == 'structured':
        return json.dumps(export_tree_structured(events), indent=2, sort_keys=True) + '\n'
    raise ValueError(f'unknown tree format {format!r}')
