"""
Synthetic optimization landscapes: a deterministic stand-in for compiling and
benchmarking kernels.

A program is a set of directives. Its latency on a workload is the
workload's base latency times the factor of every applied directive times
the factor of every interaction whose directives are all applied.
Directives with unmet prerequisites do not compile; conflicting sets compile
but give wrong answers. Because a directive may be harmful alone and only
pay off together with another (its interaction), the best path can pass
through a worse intermediate program.
"""

import hashlib
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import CompileFailure, LandscapeFormatError
from .serializers import LandscapeSerializer, flatten_errors
from .utils import canonical_json

logger = logging.getLogger(__name__)

PROGRAM_HEADER = 'directives:'
MAX_ENUMERABLE = 12

DIRECTIVE_VOCABULARY = [
    'tile_a', 'tile_b', 'layout_swizzle', 'vectorize', 'unroll', 'async_copy',
    'double_buffer', 'split_k', 'warp_specialize', 'register_cache',
    'prefetch', 'fuse_epilogue',
]


@dataclass(frozen=True)
class Interaction:
    directives: frozenset
    factor: float


@dataclass
class LandscapeSpec:
    directives: list
    base_us: dict
    factors: dict
    prerequisites: dict = field(default_factory=dict)
    interactions: list = field(default_factory=list)
    conflicts: list = field(default_factory=list)
    jitter: float = 0.0

    def applicable(self, applied) -> list:
        """Directives not yet applied whose prerequisites are all in `applied`"""
        applied = set(applied)
        return [
            d for d in self.directives
            if d not in applied and set(self.prerequisites.get(d, ())) <= applied
        ]

    def is_valid(self, directives) -> bool:
        directives = set(directives)
        return all(set(self.prerequisites.get(d, ())) <= directives for d in directives)

    def conflicting(self, directives) -> list:
        directives = set(directives)
        return [c for c in self.conflicts if c <= directives]


def landscape_from_data(data: dict) -> LandscapeSpec:
    serializer = LandscapeSerializer(data=data)
    if not serializer.is_valid():
        raise LandscapeFormatError(f'invalid landscape: {flatten_errors(serializer.errors)}')
    doc = serializer.validated_data
    return LandscapeSpec(
        directives=list(doc['directives']),
        base_us=dict(doc['base_us']),
        factors=dict(doc['factors']),
        prerequisites={k: list(v) for k, v in doc['prerequisites'].items()},
        interactions=[Interaction(frozenset(i['directives']), i['factor']) for i in doc['interactions']],
        conflicts=[frozenset(c) for c in doc['conflicts']],
        jitter=doc['jitter'],
    )


def load_landscape(path) -> LandscapeSpec:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except FileNotFoundError:
        raise LandscapeFormatError(f'landscape file not found: {path}') from None
    except json.JSONDecodeError as exc:
        raise LandscapeFormatError(f'landscape file {path} is not valid JSON: {exc}') from None
    return landscape_from_data(data)


def parse_program_text(text: str) -> list:
    """
    Directive tokens of a synthetic program, in written order.
    Expected form: 'directives: <token>' then one token per line.
    """
    stripped = text.strip()
    if not stripped.startswith(PROGRAM_HEADER):
        raise CompileFailure(f'syntax error: program must start with {PROGRAM_HEADER!r}')
    tokens = []
    for token in stripped[len(PROGRAM_HEADER):].split():
        if token not in tokens:
            tokens.append(token)
    return tokens


def render_program_text(directives) -> str:
    return f'{PROGRAM_HEADER} ' + '\n'.join(directives) if directives else PROGRAM_HEADER


def landscape_latency(landscape: LandscapeSpec, directives, workload) -> float:
    """
    Latency in microseconds of a directive set on one workload.
    Raises CompileFailure for unknown tokens and unmet prerequisites.
    """
    applied = set(directives)
    for token in sorted(applied):
        if token not in landscape.factors and token not in landscape.directives:
            raise CompileFailure(f'unknown directive {token!r}')
    for token in sorted(applied):
        missing = [p for p in landscape.prerequisites.get(token, ()) if p not in applied]
        if missing:
            raise CompileFailure(f'directive {token!r} requires {", ".join(missing)}')
    try:
        latency = float(landscape.base_us[workload.workload_id])
    except KeyError:
        raise CompileFailure(f'landscape has no base latency for workload {workload.workload_id!r}') from None
    for token in sorted(applied):
        latency *= landscape.factors.get(token, 1.0)
    for interaction in landscape.interactions:
        if interaction.directives <= applied:
            latency *= interaction.factor
    return latency


def jitter_factor(seed: int, directives, workload_id: str, amplitude: float) -> float:
    """Deterministic multiplicative noise in [1 - amplitude, 1 + amplitude]"""
    if amplitude <= 0:
        return 1.0
    key = f'{seed}|{workload_id}|' + ','.join(sorted(directives))
    entropy = int(hashlib.sha256(key.encode('utf-8')).hexdigest()[:16], 16)
    rng = np.random.default_rng(entropy)
    return 1.0 + amplitude * float(rng.uniform(-1.0, 1.0))


def valid_subsets(landscape: LandscapeSpec):
    """Every directive subset that compiles, smallest first"""
    for size in range(len(landscape.directives) + 1):
        for subset in itertools.combinations(landscape.directives, size):
            if landscape.is_valid(subset):
                yield subset


def enumerate_optimum(landscape: LandscapeSpec, workloads) -> dict:
    """
    Exhaustive oracle: the correct directive set with the best mean score.
    Ties go to the smaller set, then the earlier one in vocabulary order.
    """
    if len(landscape.directives) > MAX_ENUMERABLE:
        raise ValueError(f'enumeration limited to {MAX_ENUMERABLE} directives')
    best = None
    for subset in valid_subsets(landscape):
        if landscape.conflicting(subset):
            continue
        latencies = {w.workload_id: landscape_latency(landscape, subset, w) for w in workloads}
        scores = [100.0 * w.p_ref_us / latencies[w.workload_id] for w in workloads]
        aggregate = sum(scores) / len(scores)
        if best is None or aggregate > best['score']:
            best = {'directives': list(subset), 'latency_us': latencies, 'score': aggregate}
    return best


def generate_landscape(n_directives: int, seed: int, n_workloads: int = 2) -> dict:
    """
    Random-but-seeded landscape document with prerequisite chains and at
    least one non-monotonic two-step path (an enabler that is harmful alone,
    and a payoff directive that requires it).
    """
    if not 2 <= n_directives <= MAX_ENUMERABLE:
        raise ValueError(f'n_directives must be between 2 and {MAX_ENUMERABLE}')
    rng = np.random.default_rng(seed)
    names = [DIRECTIVE_VOCABULARY[i] for i in sorted(rng.permutation(len(DIRECTIVE_VOCABULARY))[:n_directives])]
    enabler, payoff = [str(x) for x in rng.choice(names, size=2, replace=False)]

    factors, prerequisites = {}, {}
    for name in names:
        factors[name] = round(float(rng.uniform(0.8, 1.2)), 3)
    factors[enabler] = round(float(rng.uniform(1.02, 1.15)), 3)
    factors[payoff] = 1.0
    prerequisites[payoff] = [enabler]

    # Prerequisite chains among the remaining directives
    others = [n for n in names if n not in (enabler, payoff)]
    for index, name in enumerate(others[1:], start=1):
        if rng.uniform() < 0.3:
            prerequisites[name] = [others[int(rng.integers(0, index))]]

    interactions = [{'directives': sorted([enabler, payoff]), 'factor': round(float(rng.uniform(0.4, 0.7)), 3)}]
    if len(others) >= 2:
        for _ in range(min(2, len(others) // 2)):
            pair = sorted(str(x) for x in rng.choice(others, size=2, replace=False))
            if any(i['directives'] == pair for i in interactions):
                continue
            interactions.append({'directives': pair, 'factor': round(float(rng.uniform(0.85, 1.15)), 3)})

    base_us = {
        f'w{i}': round(float(rng.uniform(200.0, 2000.0)), 1) for i in range(n_workloads)
    }
    document = {
        'format_version': 1,
        'directives': names,
        'base_us': base_us,
        'factors': factors,
        'prerequisites': dict(sorted(prerequisites.items())),
        'interactions': interactions,
        'conflicts': [],
    }
    logger.debug('generated landscape seed=%s enabler=%s payoff=%s', seed, enabler, payoff)
    return document


def dump_document(document: dict) -> str:
    """Pretty, key-sorted JSON used for generated landscape and sidecar files"""
    return json.dumps(json.loads(canonical_json(document)), indent=2, sort_keys=True) + '\n'
