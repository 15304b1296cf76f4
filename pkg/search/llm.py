"""
Chat-completion backends shared by the planner and the coder.

A backend is anything with `complete(messages, temperature=None, context=None)`
and a `name`. ChatBackend talks to an OpenAI-compatible endpoint;
TranscriptBackend replays recorded responses for offline runs and tests.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import openai

from .exceptions import BackendUnavailable, MalformedResponse
from .utils import redact

logger = logging.getLogger(__name__)


@dataclass
class Exchange:
    """One request/response pair, as stored in a trace blob"""
    backend: str
    messages: list
    response: str
    temperature: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            'backend': self.backend,
            'messages': self.messages,
            'response': self.response,
            'temperature': self.temperature,
            'meta': self.meta,
        }


class ChatBackend:
    """OpenAI-compatible chat completions with timeout, retries and key redaction"""

    def __init__(
        self,
        model: str,
        base_url: Optional[str] = None,
        temperature: float = 0.0,
        max_tokens: Optional[int] = None,
        timeout_s: float = 120.0,
        retries: int = 2,
        api_key_env: str = 'OPENAI_API_KEY',
    ):
        self.model = model
        self.base_url = base_url
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.timeout_s = timeout_s
        self.retries = retries
        self.api_key_env = api_key_env
        self._client = None

    @classmethod
    def from_settings(cls, block: dict, model: Optional[str] = None):
        return cls(
            model=model or block['MODEL'],
            base_url=block.get('BASE_URL') or None,
            temperature=block['TEMPERATURE'],
            max_tokens=block.get('MAX_TOKENS'),
            timeout_s=block['TIMEOUT_S'],
            retries=block['RETRIES'],
            api_key_env=block['API_KEY_ENV'],
        )

    @property
    def name(self) -> str:
        return f'llm:{self.model}'

    @property
    def api_key(self) -> Optional[str]:
        return os.environ.get(self.api_key_env)

    @property
    def client(self) -> openai.OpenAI:
        if self._client is None:
            if not self.api_key:
                raise BackendUnavailable(f'credential variable {self.api_key_env} is not set')
            kwargs = {'api_key': self.api_key, 'timeout': self.timeout_s, 'max_retries': self.retries}
            if self.base_url:
                kwargs['base_url'] = self.base_url
            self._client = openai.OpenAI(**kwargs)
        return self._client

    def complete(self, messages: list, temperature: Optional[float] = None, context=None) -> str:
        kwargs = {
            'model': self.model,
            'messages': messages,
            'temperature': self.temperature if temperature is None else temperature,
        }
        if self.max_tokens:
            kwargs['max_tokens'] = self.max_tokens
        seed = getattr(context, 'seed', None)
        if seed is not None:
            kwargs['seed'] = seed
        try:
            response = self.client.chat.completions.create(**kwargs)
        except (openai.APITimeoutError, openai.APIConnectionError) as exc:
            raise BackendUnavailable(redact(f'{self.name} unreachable after {self.retries} retries: {exc}',
                                            self.api_key)) from None
        except openai.APIStatusError as exc:
            raise BackendUnavailable(redact(f'{self.name} returned HTTP {exc.status_code}: {exc.message}',
                                            self.api_key)) from None

        choices = getattr(response, 'choices', None)
        if not choices:
            raise MalformedResponse(f'{self.name} returned no choices')
        content = getattr(choices[0].message, 'content', None)
        if content is None:
            raise MalformedResponse(f'{self.name} returned an empty message')
        return redact(content, self.api_key)


class TranscriptBackend:
    """
    Replays responses from a JSON file: a list of strings, or
    {"responses": [...]}. Running past the end is BackendUnavailable.
    """

    def __init__(self, responses: list, label: str = 'transcript'):
        self.responses = list(responses)
        self.label = label
        self.cursor = 0

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except (FileNotFoundError, json.JSONDecodeError) as exc:
            raise BackendUnavailable(f'cannot read transcript {path}: {exc}') from None
        if isinstance(data, dict):
            data = data.get('responses', [])
        if not isinstance(data, list) or not all(isinstance(item, str) for item in data):
            raise BackendUnavailable(f'transcript {path} must be a list of response strings')
        return cls(data, label=f'transcript:{path.name}')

    @property
    def name(self) -> str:
        return self.label

    def advance(self, calls: int) -> None:
        """Skip responses already consumed before a resume"""
        self.cursor = min(len(self.responses), self.cursor + calls)

    def complete(self, messages: list, temperature: Optional[float] = None, context=None) -> str:
        if self.cursor >= len(self.responses):
            raise BackendUnavailable(f'{self.label} exhausted after {len(self.responses)} responses')
        response = self.responses[self.cursor]
        self.cursor += 1
        return response
