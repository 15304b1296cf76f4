"""
Serializers for every structured document the framework reads or writes:
task files, landscape files, planner edit blocks, subprocess evaluator
reports, run configuration, trace events and state snapshots.

Rendering a domain object is `SomeSerializer(obj).data`; loading one is
`SomeSerializer(data=doc)`, `is_valid()`, then `.save()`.
"""

import math

from rest_framework import serializers

from .models import (
    ActionNode, HistoryEntry, Insert, NodeStatus, Observation, PriorityEntry,
    Program, ProgramOrigin, Prune, SearchState, Update, WorkloadResult,
    WorkloadStatus,
)


def text_field(**kwargs):
    """CharField that keeps text byte-for-byte (blank allowed, no trimming)"""
    kwargs.setdefault('allow_blank', True)
    return serializers.CharField(trim_whitespace=False, **kwargs)


def flatten_errors(errors, prefix='') -> str:
    """Turn nested serializer errors into one readable line"""
    parts = []
    if isinstance(errors, dict):
        for key, value in errors.items():
            label = key if key != 'non_field_errors' else ''
            path = f'{prefix}.{label}' if prefix and label else (label or prefix)
            parts.append(flatten_errors(value, path))
    elif isinstance(errors, list):
        for index, value in enumerate(errors):
            if isinstance(value, (dict, list)):
                parts.append(flatten_errors(value, f'{prefix}[{index}]'))
            else:
                parts.append(f'{prefix}: {value}' if prefix else str(value))
    else:
        parts.append(f'{prefix}: {errors}' if prefix else str(errors))
    return '; '.join(p for p in parts if p)


class SortedSetField(serializers.ListField):
    """A set rendered as a sorted list, so identical sets give identical JSON"""

    def to_representation(self, data):
        return [self.child.to_representation(item) for item in sorted(data)]

    def to_internal_value(self, data):
        return set(super().to_internal_value(data))


class ScoreField(serializers.FloatField):
    """Scores may be -inf in memory; documents carry null instead"""

    def __init__(self, **kwargs):
        kwargs.setdefault('allow_null', True)
        kwargs.setdefault('required', False)
        super().__init__(**kwargs)

    def to_representation(self, value):
        if value is None or not math.isfinite(value):
            return None
        return float(value)


# Task and landscape documents

class FileEntrySerializer(serializers.Serializer):
    name = serializers.CharField()
    description = text_field(required=False, default='')


class WorkloadSerializer(serializers.Serializer):
    workload_id = serializers.CharField()
    parameters = serializers.JSONField(required=False, default=dict)
    p_ref_us = serializers.FloatField()

    def validate_p_ref_us(self, value):
        if not value > 0:
            raise serializers.ValidationError('p_ref_us must be positive')
        return value

    def validate_parameters(self, value):
        if not isinstance(value, dict):
            raise serializers.ValidationError('parameters must be an object')
        for key, item in value.items():
            if isinstance(item, (dict, list)):
                raise serializers.ValidationError(f'parameter {key!r} must be a scalar or string')
        return value


class EvaluatorConfigSerializer(serializers.Serializer):
    kind = serializers.ChoiceField(choices=['synthetic', 'subprocess'])
    # synthetic
    landscape_file = serializers.CharField(required=False)
    determinism_seed = serializers.IntegerField(required=False, default=0)
    # subprocess
    command = serializers.ListField(child=serializers.CharField(), required=False)
    workspace_policy = serializers.ChoiceField(
        choices=['fresh-dir-per-candidate'], required=False, default='fresh-dir-per-candidate')
    compile_timeout_s = serializers.FloatField(required=False, default=300.0)
    run_timeout_s = serializers.FloatField(required=False, default=600.0)
    env_passthrough = serializers.ListField(child=serializers.CharField(), required=False, default=list)
    repetitions = serializers.IntegerField(required=False, default=1, min_value=1)
    workloads_independent = serializers.BooleanField(required=False, default=False)
    metadata_limit_bytes = serializers.IntegerField(required=False, default=None, allow_null=True, min_value=1)

    def validate(self, attrs):
        if attrs['kind'] == 'synthetic' and not attrs.get('landscape_file'):
            raise serializers.ValidationError('synthetic evaluator needs landscape_file')
        if attrs['kind'] == 'subprocess':
            if not attrs.get('command'):
                raise serializers.ValidationError('subprocess evaluator needs a command')
            if attrs['compile_timeout_s'] <= 0 or attrs['run_timeout_s'] <= 0:
                raise serializers.ValidationError('timeouts must be positive')
        return attrs


class InitialProgramSerializer(serializers.Serializer):
    files = serializers.DictField(child=text_field())


class TaskSerializer(serializers.Serializer):
    task_id = serializers.CharField()
    objective = text_field()
    reference_impl = text_field(required=False, default='')
    instructions = text_field(required=False, default='')
    target = serializers.CharField(required=False, default='the target GPU')
    file_manifest = FileEntrySerializer(many=True)
    workloads = WorkloadSerializer(many=True)
    evaluator = EvaluatorConfigSerializer()
    initial_program = InitialProgramSerializer(required=False, allow_null=True, default=None)

    def validate_file_manifest(self, value):
        if not value:
            raise serializers.ValidationError('file_manifest must not be empty')
        names = [entry['name'] for entry in value]
        if len(names) != len(set(names)):
            raise serializers.ValidationError('file names must be unique')
        return value

    def validate_workloads(self, value):
        if not value:
            raise serializers.ValidationError('at least one workload is required')
        ids = [w['workload_id'] for w in value]
        if len(ids) != len(set(ids)):
            raise serializers.ValidationError('workload ids must be unique')
        return value

    def validate(self, attrs):
        initial = attrs.get('initial_program')
        if initial:
            expected = {entry['name'] for entry in attrs['file_manifest']}
            if set(initial['files']) != expected:
                raise serializers.ValidationError('initial_program files must match file_manifest')
        return attrs


class InteractionSerializer(serializers.Serializer):
    directives = serializers.ListField(child=serializers.CharField(), min_length=2)
    factor = serializers.FloatField()


class LandscapeSerializer(serializers.Serializer):
    format_version = serializers.IntegerField()
    directives = serializers.ListField(child=serializers.CharField(), min_length=1)
    base_us = serializers.DictField(child=serializers.FloatField())
    factors = serializers.DictField(child=serializers.FloatField())
    prerequisites = serializers.DictField(
        child=serializers.ListField(child=serializers.CharField()), required=False, default=dict)
    interactions = InteractionSerializer(many=True, required=False, default=list)
    conflicts = serializers.ListField(
        child=serializers.ListField(child=serializers.CharField(), min_length=2), required=False, default=list)
    jitter = serializers.FloatField(required=False, default=0.0, min_value=0.0, max_value=0.5)

    def validate_format_version(self, value):
        if value != 1:
            raise serializers.ValidationError(f'unsupported landscape format_version {value}')
        return value

    def validate(self, attrs):
        vocabulary = set(attrs['directives'])
        if len(vocabulary) != len(attrs['directives']):
            raise serializers.ValidationError('directives must be unique')
        if any(not v > 0 for v in attrs['base_us'].values()) or not attrs['base_us']:
            raise serializers.ValidationError('base_us needs positive values')
        if set(attrs['factors']) - vocabulary:
            raise serializers.ValidationError('factors name unknown directives')
        if any(not v > 0 for v in attrs['factors'].values()):
            raise serializers.ValidationError('factors must be positive')
        for directive, required in attrs['prerequisites'].items():
            if directive not in vocabulary or set(required) - vocabulary:
                raise serializers.ValidationError(f'prerequisites of {directive!r} name unknown directives')
        for interaction in attrs['interactions']:
            if set(interaction['directives']) - vocabulary:
                raise serializers.ValidationError('interaction names unknown directives')
            if not interaction['factor'] > 0:
                raise serializers.ValidationError('interaction factors must be positive')
        for conflict in attrs['conflicts']:
            if set(conflict) - vocabulary:
                raise serializers.ValidationError('conflict names unknown directives')
        return attrs


# Planner edits

class TreeEditSerializer(serializers.Serializer):
    op = serializers.ChoiceField(choices=['insert', 'update', 'prune'])
    parent = serializers.CharField(required=False)
    node = serializers.CharField(required=False)
    intent = text_field(required=False)
    priority = serializers.FloatField(required=False)
    rationale = text_field(required=False, default='')

    def validate(self, attrs):
        op = attrs['op']
        required = {'insert': ('parent', 'intent', 'priority'),
                    'update': ('node', 'priority'),
                    'prune': ('node',)}[op]
        missing = [name for name in required if attrs.get(name) is None]
        if missing:
            raise serializers.ValidationError(f'{op} is missing {", ".join(missing)}')
        if op == 'insert' and not attrs['intent'].strip():
            raise serializers.ValidationError('insert needs a non-empty intent')
        if 'priority' in required and not 0.0 <= attrs['priority'] <= 1.0:
            raise serializers.ValidationError(
                f'OutOfRange: priority {attrs["priority"]} is outside [0, 1]', code='out_of_range')
        return attrs

    def create(self, validated_data):
        op = validated_data['op']
        if op == 'insert':
            return Insert(validated_data['parent'], validated_data['intent'].strip(), validated_data['priority'])
        if op == 'update':
            return Update(validated_data['node'], validated_data['priority'], validated_data['rationale'])
        return Prune(validated_data['node'], validated_data['rationale'])


class RecoveryEntrySerializer(serializers.Serializer):
    parent = serializers.CharField(default='best')
    intent = serializers.CharField()
    priority = serializers.FloatField(min_value=0.0, max_value=1.0)


class PlannerRulesSerializer(serializers.Serializer):
    """Rule table driving the deterministic planner"""
    priors = serializers.DictField(child=serializers.FloatField(min_value=0.0, max_value=1.0))
    prerequisites = serializers.DictField(
        child=serializers.ListField(child=serializers.CharField()), required=False, default=dict)
    boost = serializers.FloatField(min_value=0.0, max_value=1.0, required=False, default=0.1)
    decay = serializers.FloatField(min_value=0.0, max_value=1.0, required=False, default=0.8)
    prune_margin = serializers.FloatField(min_value=0.0, required=False, default=30.0)
    recovery_queue = RecoveryEntrySerializer(many=True, required=False, default=list)

    def validate_priors(self, value):
        if not value:
            raise serializers.ValidationError('at least one directive prior is required')
        return value


def edit_to_dict(edit) -> dict:
    if isinstance(edit, Insert):
        return {'op': 'insert', 'parent': edit.parent_node_id, 'intent': edit.intent, 'priority': edit.priority}
    if isinstance(edit, Update):
        return {'op': 'update', 'node': edit.node_id, 'priority': edit.new_priority, 'rationale': edit.rationale}
    return {'op': 'prune', 'node': edit.node_id, 'rationale': edit.rationale}


def edit_from_dict(data: dict):
    serializer = TreeEditSerializer(data=data)
    serializer.is_valid(raise_exception=True)
    return serializer.save()


# Subprocess evaluator report

class WorkloadReportSerializer(serializers.Serializer):
    workload_id = serializers.CharField()
    status = serializers.ChoiceField(choices=WorkloadStatus.values)
    latency_us = serializers.FloatField(required=False, allow_null=True, default=None)
    latencies_us = serializers.ListField(child=serializers.FloatField(), required=False, default=list)
    log_excerpt = text_field(required=False, default='')

    def validate(self, attrs):
        if attrs['status'] == WorkloadStatus.PASS:
            samples = attrs['latencies_us'] or ([attrs['latency_us']] if attrs['latency_us'] is not None else [])
            if not samples or any(not s > 0 for s in samples):
                raise serializers.ValidationError('a passing workload needs positive latencies')
        return attrs


class EvaluatorReportSerializer(serializers.Serializer):
    workloads = WorkloadReportSerializer(many=True)
    global_log = text_field(required=False, default='')


# Domain records (trace payloads and snapshots)

class ProgramSerializer(serializers.Serializer):
    program_id = serializers.CharField()
    files = serializers.DictField(child=text_field())
    parent_action_id = serializers.CharField(required=False, allow_null=True, default=None)
    round = serializers.IntegerField(min_value=0)
    created_from = serializers.ChoiceField(choices=ProgramOrigin.values)

    def create(self, validated_data):
        return Program(**validated_data)


class WorkloadResultSerializer(serializers.Serializer):
    workload_id = serializers.CharField()
    status = serializers.ChoiceField(choices=WorkloadStatus.values)
    latency_us = serializers.FloatField(required=False, allow_null=True, default=None)
    log_excerpt = text_field(required=False, default='')


class ObservationSerializer(serializers.Serializer):
    correct = serializers.BooleanField(read_only=True)
    workload_results = WorkloadResultSerializer(many=True)
    metadata = text_field(required=False, default='')

    def create(self, validated_data):
        return observation_from_data(validated_data)


def observation_from_data(data) -> Observation:
    return Observation(
        workload_results=[WorkloadResult(**dict(r)) for r in data['workload_results']],
        metadata=data.get('metadata', ''),
    )


def program_from_data(data) -> Program:
    return Program(**dict(data))


class PriorityEntrySerializer(serializers.Serializer):
    round = serializers.IntegerField()
    value = serializers.FloatField()
    rationale = text_field(required=False, default='')


class HistoryEntrySerializer(serializers.Serializer):
    round = serializers.IntegerField()
    text = text_field()


class ActionNodeSerializer(serializers.Serializer):
    node_id = serializers.CharField()
    intent = text_field()
    parent_node_id = serializers.CharField(allow_null=True)
    status = serializers.ChoiceField(choices=NodeStatus.values)
    priority = serializers.FloatField(allow_null=True)
    priority_history = PriorityEntrySerializer(many=True)
    attached_program_id = serializers.CharField(allow_null=True)
    attached_score = serializers.FloatField(allow_null=True)
    children = serializers.ListField(child=serializers.CharField(), allow_empty=True)
    inserted_round = serializers.IntegerField()
    closed_round = serializers.IntegerField(allow_null=True)
    pruned_round = serializers.IntegerField(allow_null=True)
    samples_evaluated = serializers.IntegerField(min_value=0)


def node_from_data(data) -> ActionNode:
    data = dict(data)
    data['priority_history'] = [PriorityEntry(**dict(e)) for e in data['priority_history']]
    data['children'] = list(data['children'])
    return ActionNode(**data)


class SearchStateSerializer(serializers.Serializer):
    nodes = serializers.DictField(child=ActionNodeSerializer())
    root_id = serializers.CharField()
    frontier = SortedSetField(child=serializers.CharField(), allow_empty=True)
    round = serializers.IntegerField(min_value=0)
    budget_total = serializers.IntegerField(min_value=1)
    budget_remaining = serializers.IntegerField(min_value=0)
    best_program_id = serializers.CharField(allow_null=True)
    best_score = ScoreField()
    next_seq = serializers.IntegerField(min_value=1)
    programs = serializers.DictField(child=ProgramSerializer())
    observations = serializers.DictField(child=ObservationSerializer())
    history = HistoryEntrySerializer(many=True)

    def create(self, validated_data):
        best_score = validated_data.get('best_score')
        return SearchState(
            nodes={k: node_from_data(v) for k, v in validated_data['nodes'].items()},
            root_id=validated_data['root_id'],
            frontier=set(validated_data['frontier']),
            round=validated_data['round'],
            budget_total=validated_data['budget_total'],
            budget_remaining=validated_data['budget_remaining'],
            best_program_id=validated_data['best_program_id'],
            best_score=-math.inf if best_score is None else best_score,
            next_seq=validated_data['next_seq'],
            programs={k: program_from_data(v) for k, v in validated_data['programs'].items()},
            observations={k: observation_from_data(v) for k, v in validated_data['observations'].items()},
            history=[HistoryEntry(**dict(e)) for e in validated_data['history']],
        )


# Trace documents

EVENT_TYPES = [
    'RunStarted', 'ActionSelected', 'CandidateGenerated', 'GenerationFailed',
    'CandidateEvaluated', 'NodeClosed', 'EditApplied', 'PlannerExchange',
    'BudgetExtended', 'ArchiveUpdated', 'RunEnded',
]


class TraceEventSerializer(serializers.Serializer):
    seq = serializers.IntegerField(min_value=1)
    round = serializers.IntegerField(min_value=0)
    ts = serializers.CharField()
    type = serializers.ChoiceField(choices=EVENT_TYPES)
    data = serializers.JSONField()

    def validate_data(self, value):
        if not isinstance(value, dict):
            raise serializers.ValidationError('event data must be an object')
        return value


class SnapshotSerializer(serializers.Serializer):
    format_version = serializers.IntegerField()
    checksum = serializers.CharField()
    event_seq = serializers.IntegerField(min_value=0)
    state = serializers.JSONField()


# Run options (config files for the management commands)

class SearchOptionsSerializer(serializers.Serializer):
    budget = serializers.IntegerField(min_value=1, required=False)
    stagnation = serializers.IntegerField(min_value=1, required=False)
    planner_retries = serializers.IntegerField(min_value=0, required=False)
    feedback_on_retry = serializers.BooleanField(required=False)
    seed = serializers.IntegerField(required=False)
    coder_temperature = serializers.FloatField(min_value=0.0, required=False)
    planner = serializers.ChoiceField(choices=['rules', 'llm', 'transcript'], required=False)
    planner_file = serializers.CharField(required=False, allow_null=True)
    planner_model = serializers.CharField(required=False, allow_null=True)
    coder = serializers.ChoiceField(choices=['scripted', 'llm', 'transcript', 'greedy'], required=False)
    coder_file = serializers.CharField(required=False, allow_null=True)
    coder_model = serializers.CharField(required=False, allow_null=True)
    evaluator = serializers.ChoiceField(choices=['task', 'synthetic', 'subprocess'], required=False)
    archive_capacity = serializers.IntegerField(min_value=1, required=False)
    parents_per_step = serializers.IntegerField(min_value=1, required=False)
    exploration_floor = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)
    out = serializers.CharField(required=False, allow_null=True)
    extra_budget = serializers.IntegerField(min_value=0, required=False)
    fastp = serializers.ListField(child=serializers.FloatField(min_value=0.0), allow_empty=False, required=False)
    out_dir = serializers.CharField(required=False, allow_null=True)
