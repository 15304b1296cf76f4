"""
The implementation policy: turn a selected action (parent program + intent)
into a candidate program bundle.

Backend output carries one tagged block per manifest file, e.g.
<cuda_file name="kernel.cu"> ... </cuda_file>; a bare <kernel.cu> ... </kernel.cu>
block is accepted as well.
"""

import logging
import re
from dataclasses import dataclass
from pathlib import PurePosixPath
from typing import Optional

from django.template.loader import render_to_string

from .exceptions import CompileFailure, GenerationError, MalformedResponse
from .landscape import parse_program_text, render_program_text
from .llm import Exchange
from .models import Program, ProgramOrigin

logger = logging.getLogger(__name__)

FILE_TAGS = {
    '.h': 'header_file', '.hpp': 'header_file', '.cuh': 'header_file',
    '.cu': 'cuda_file',
    '.cpp': 'cpp_file', '.cc': 'cpp_file', '.cxx': 'cpp_file',
    '.py': 'python_file',
}

NAMED_BLOCK = re.compile(r'<(?P<tag>[A-Za-z_][\w-]*)\s+name="(?P<name>[^"]+)"\s*>(?P<body>.*?)</(?P=tag)>', re.DOTALL)
FENCE = re.compile(r'^```[\w+-]*\n(?P<code>.*?)\n?```$', re.DOTALL)


def file_tag(name: str) -> str:
    return FILE_TAGS.get(PurePosixPath(name).suffix.lower(), 'file')


@dataclass
class CoderRequest:
    task: object
    intent: str
    parent_program: Optional[Program] = None
    attempt_index: int = 0
    feedback: Optional[str] = None
    feedback_failed: bool = True
    sampling_temperature: float = 0.8
    node_id: Optional[str] = None
    program_id: str = 'candidate'
    round: int = 0
    created_from: str = ProgramOrigin.REFINEMENT_SAMPLE
    seed: Optional[int] = None

    def __post_init__(self):
        if self.attempt_index < 0:
            raise ValueError('attempt_index must be >= 0')

    @property
    def task_digest(self) -> str:
        return self.task.digest()


def workload_targets(task) -> list:
    lines = []
    for workload in task.workloads:
        params = ', '.join(f'{k}={v}' for k, v in sorted(workload.parameters.items()))
        label = f'{workload.workload_id} ({params})' if params else workload.workload_id
        lines.append(f'{label}: reference {workload.p_ref_us:g} us')
    return lines


def render_prompt(request: CoderRequest) -> str:
    """Pure template instantiation; identical requests give identical bytes"""
    task = request.task
    parent_files = []
    if request.parent_program is not None:
        parent_files = [
            {'tag': file_tag(name), 'name': name, 'text': request.parent_program.files.get(name, '')}
            for name in task.manifest_names
        ]
    context = {
        'target': task.target,
        'objective': task.objective_text,
        'instructions': task.instructions,
        'reference_impl': task.reference_impl,
        'parent_files': parent_files,
        'intent': request.intent,
        'feedback': request.feedback or '',
        'feedback_header': 'Previous attempt failed with:' if request.feedback_failed else 'Previous attempt result:',
        'file_count': len(task.file_manifest),
        'manifest': [{'tag': file_tag(f.name), 'name': f.name} for f in task.file_manifest],
        'targets': workload_targets(task),
    }
    return render_to_string('search/coder_prompt.txt', context)


def _clean_body(body: str) -> str:
    body = body.strip('\n')
    fenced = FENCE.match(body.strip())
    if fenced:
        return fenced.group('code')
    return body


def extract_files(raw: str, manifest_names) -> dict:
    """
    Files from tagged blocks; the last block for a name wins.
    Raises GenerationError when a manifest file is missing or an extra one appears.
    """
    files = {}
    for match in NAMED_BLOCK.finditer(raw):
        files[match.group('name')] = _clean_body(match.group('body'))
    for name in manifest_names:
        if name in files:
            continue
        bare = re.findall(rf'<{re.escape(name)}>(.*?)</{re.escape(name)}>', raw, re.DOTALL)
        if bare:
            files[name] = _clean_body(bare[-1])

    missing = [n for n in manifest_names if n not in files]
    extra = sorted(set(files) - set(manifest_names))
    if missing or extra:
        parts = []
        if missing:
            parts.append(f'missing {", ".join(missing)}')
        if extra:
            parts.append(f'unexpected {", ".join(extra)}')
        raise GenerationError('output does not match the file manifest: ' + '; '.join(parts))
    return {name: files[name] for name in manifest_names}


class Coder:
    """Prompts a backend for a bundle; one re-prompt on a manifest mismatch"""

    def __init__(self, backend, reprompts: int = 1):
        self.backend = backend
        self.reprompts = reprompts

    @property
    def name(self) -> str:
        return self.backend.name

    def generate(self, request: CoderRequest, exchanges: Optional[list] = None) -> Program:
        exchanges = exchanges if exchanges is not None else []
        manifest = request.task.manifest_names
        messages = [{'role': 'user', 'content': render_prompt(request)}]
        error = None
        for attempt in range(self.reprompts + 1):
            try:
                raw = self.backend.complete(messages, temperature=request.sampling_temperature, context=request)
            except MalformedResponse as exc:
                error = GenerationError(str(exc))
                raw = ''
            else:
                try:
                    files = extract_files(raw, manifest)
                except GenerationError as exc:
                    error = exc
                else:
                    exchanges.append(Exchange(self.backend.name, messages, raw, request.sampling_temperature,
                                              {'attempt': attempt, 'ok': True}))
                    return Program(
                        program_id=request.program_id,
                        files=files,
                        parent_action_id=request.node_id,
                        round=request.round,
                        created_from=request.created_from,
                    )
            exchanges.append(Exchange(self.backend.name, messages, raw, request.sampling_temperature,
                                      {'attempt': attempt, 'ok': False, 'error': str(error)}))
            logger.info('coder output rejected (%s), attempt %s', error, attempt)
            messages = messages + [
                {'role': 'assistant', 'content': raw},
                {'role': 'user', 'content': f'{error}. Emit exactly these files, one tagged block each: '
                                            f'{", ".join(manifest)}.'},
            ]
        raise error


class ScriptedCoderBackend:
    """
    Deterministic coder for synthetic tasks. Intent "add <directive>" appends
    the directive to the parent's list; any other intent re-emits the parent.
    """

    name = 'scripted-coder'

    def complete(self, messages, temperature=None, context=None) -> str:
        if context is None:
            raise MalformedResponse('scripted coder needs the structured request')
        file_name = context.task.manifest_names[0]
        directives = []
        if context.parent_program is not None:
            try:
                directives = parse_program_text(context.parent_program.files.get(file_name, ''))
            except CompileFailure:
                directives = []
        intent = context.intent.strip()
        if intent.startswith('add '):
            directive = intent[len('add '):].strip()
            if directive and directive not in directives:
                directives.append(directive)
        return f'<file name="{file_name}">\n{render_program_text(directives)}\n</file>'
