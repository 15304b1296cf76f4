"""
Command options and the planner/coder/evaluator objects they select.

Option precedence: HYPOTREE settings < --config JSON file < command-line flags.
"""

import json
import logging
from pathlib import Path

from django.conf import settings

from .baseline import GreedyMutatorBackend
from .coder import Coder, ScriptedCoderBackend
from .evaluators import SyntheticEvaluator, build_evaluator
from .exceptions import BackendUnavailable, OptionsError
from .llm import ChatBackend, TranscriptBackend
from .planner import Planner, RulePlanner
from .serializers import SearchOptionsSerializer, flatten_errors

logger = logging.getLogger(__name__)

RULES_FILE_NAME = 'planner_rules.json'


def default_options() -> dict:
    defaults = settings.HYPOTREE
    return {
        'budget': defaults['BUDGET'],
        'stagnation': defaults['STAGNATION'],
        'planner_retries': defaults['PLANNER_RETRIES'],
        'feedback_on_retry': defaults['FEEDBACK_ON_RETRY'],
        'seed': defaults['SEED'],
        'coder_temperature': defaults['CODER_TEMPERATURE'],
        'archive_capacity': defaults['ARCHIVE_CAPACITY'],
        'parents_per_step': defaults['PARENTS_PER_STEP'],
        'exploration_floor': defaults['EXPLORATION_FLOOR'],
        'planner': 'rules',
        'planner_file': None,
        'planner_model': None,
        'coder': 'scripted',
        'coder_file': None,
        'coder_model': None,
        'evaluator': 'task',
        'out': None,
        'extra_budget': 0,
        'fastp': list(defaults['FASTP_THRESHOLDS']),
        'out_dir': None,
    }


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except FileNotFoundError:
        raise OptionsError(f'config file not found: {path}') from None
    except json.JSONDecodeError as exc:
        raise OptionsError(f'config file {path} is not valid JSON: {exc}') from None
    if not isinstance(data, dict):
        raise OptionsError(f'config file {path} must hold a JSON object')
    unknown = sorted(set(data) - set(SearchOptionsSerializer().fields))
    if unknown:
        raise OptionsError(f'config file {path} has unknown keys: {", ".join(unknown)}')
    return _validated(data, f'config file {path}')


def resolve_options(flags: dict, config_path=None, base: dict = None) -> dict:
    """
    Merge option layers. `flags` holds only the flags given on the command
    line (None values are ignored).
    """
    options = dict(base if base is not None else default_options())
    if config_path:
        options.update(load_config_file(config_path))
    given = {k: v for k, v in flags.items() if v is not None and k in options}
    options.update(_validated(given, 'command-line flags'))
    return options


def _validated(data: dict, source: str) -> dict:
    serializer = SearchOptionsSerializer(data=data)
    if not serializer.is_valid():
        raise OptionsError(f'invalid {source}: {flatten_errors(serializer.errors)}')
    return {k: v for k, v in serializer.validated_data.items() if k in data}


def _rules_path(options: dict, task):
    if options.get('planner_file'):
        return Path(options['planner_file'])
    if task is not None and task.source_path is not None:
        candidate = Path(task.source_path).parent / RULES_FILE_NAME
        if candidate.exists():
            return candidate
    raise OptionsError(f'--planner rules needs --planner-file (or a {RULES_FILE_NAME} beside the task file)')


def _need_file(options: dict, key: str, kind: str) -> Path:
    if not options.get(key):
        raise OptionsError(f'--{key.split("_")[0]} {kind} needs --{key.replace("_", "-")}')
    return Path(options[key])


def build_planner(options: dict, task=None):
    kind = options['planner']
    if kind == 'rules':
        return RulePlanner.from_file(_rules_path(options, task))
    if kind == 'transcript':
        backend = TranscriptBackend.from_file(_need_file(options, 'planner_file', kind))
    else:
        backend = ChatBackend.from_settings(settings.HYPOTREE['PLANNER_LLM'], options.get('planner_model'))
    return Planner(backend, retries=options['planner_retries'])


def build_coder_backend(options: dict, task=None, evaluator=None):
    """The raw completion backend behind a Coder (or the baseline loop)"""
    kind = options['coder']
    if kind == 'scripted':
        return ScriptedCoderBackend()
    if kind == 'greedy':
        if not isinstance(evaluator, SyntheticEvaluator):
            raise BackendUnavailable('the greedy mutator needs a synthetic evaluator')
        return GreedyMutatorBackend(evaluator.landscape)
    if kind == 'transcript':
        return TranscriptBackend.from_file(_need_file(options, 'coder_file', kind))
    return ChatBackend.from_settings(settings.HYPOTREE['CODER_LLM'], options.get('coder_model'))


def build_coder(options: dict, task=None, evaluator=None) -> Coder:
    return Coder(build_coder_backend(options, task, evaluator))


def build_components(options: dict, task) -> tuple:
    """(planner, coder, evaluator) for a tree-search run"""
    evaluator = build_evaluator(task, options['evaluator'])
    planner = build_planner(options, task)
    coder = build_coder(options, task, evaluator)
    logger.info('backends: planner %s, coder %s, evaluator %s', planner.name, coder.name, evaluator.kind)
    return planner, coder, evaluator
