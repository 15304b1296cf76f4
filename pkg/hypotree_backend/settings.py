"""
Django settings for hypotree_backend project.

The project has no HTTP surface and no database: Django provides settings,
management commands, templates, logging configuration and the test runner.

For more information on this file, see
https://docs.djangoproject.com/en/6.0/topics/settings/
"""

import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.getenv('SECRET_KEY', 'hypotree-local-only-key')

DEBUG = os.getenv('DEBUG', 'False') == 'True'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    # Third-party apps
    'rest_framework',
    # Local apps
    'search',
]

TEMPLATES = [
    {
        'BACKEND': 'django.template.backends.django.DjangoTemplates',
        'DIRS': [],
        'APP_DIRS': True,
        'OPTIONS': {
            # Prompts are plain text, never HTML.
            'autoescape': False,
        },
    },
]

# No database: runs persist to run directories on disk.
DATABASES = {}

USE_TZ = True
TIME_ZONE = 'UTC'

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


def _env_float(name, default):
    value = os.getenv(name)
    return float(value) if value else default


def _env_int(name, default):
    value = os.getenv(name)
    return int(value) if value else default


def _llm_settings(prefix):
    return {
        'BASE_URL': os.getenv(f'{prefix}_BASE_URL', os.getenv('OPENAI_BASE_URL', '')),
        'MODEL': os.getenv(f'{prefix}_MODEL', 'gpt-4o'),
        'TEMPERATURE': _env_float(f'{prefix}_TEMPERATURE', 0.8),
        'MAX_TOKENS': _env_int(f'{prefix}_MAX_TOKENS', 8192),
        'TIMEOUT_S': _env_float(f'{prefix}_TIMEOUT_S', 300.0),
        'RETRIES': _env_int(f'{prefix}_RETRIES', 3),
        'API_KEY_ENV': os.getenv(f'{prefix}_API_KEY_ENV', 'OPENAI_API_KEY'),
    }


# Search defaults. Command-line flags override a --config file, which
# overrides these values.
HYPOTREE = {
    'BUDGET': _env_int('HYPOTREE_BUDGET', 120),
    'STAGNATION': _env_int('HYPOTREE_STAGNATION', 7),
    'PLANNER_RETRIES': _env_int('HYPOTREE_PLANNER_RETRIES', 2),
    'FEEDBACK_ON_RETRY': os.getenv('HYPOTREE_FEEDBACK_ON_RETRY', 'True') == 'True',
    'SEED': _env_int('HYPOTREE_SEED', 0),
    'CODER_TEMPERATURE': _env_float('HYPOTREE_CODER_TEMPERATURE', 0.8),
    'METADATA_LIMIT_BYTES': _env_int('HYPOTREE_METADATA_LIMIT_BYTES', 16 * 1024),
    'OBSERVATION_EXCERPT_BYTES': _env_int('HYPOTREE_OBSERVATION_EXCERPT_BYTES', 2048),
    'HISTORY_WINDOW_BYTES': _env_int('HYPOTREE_HISTORY_WINDOW_BYTES', 4096),
    'ARCHIVE_CAPACITY': _env_int('HYPOTREE_ARCHIVE_CAPACITY', 8),
    'PARENTS_PER_STEP': _env_int('HYPOTREE_PARENTS_PER_STEP', 2),
    'EXPLORATION_FLOOR': _env_float('HYPOTREE_EXPLORATION_FLOOR', 0.1),
    'FASTP_THRESHOLDS': [0.5, 0.8, 1.0, 1.2],
    'RUNS_DIR': os.getenv('HYPOTREE_RUNS_DIR', str(BASE_DIR / 'runs')),
    'PLANNER_LLM': _llm_settings('HYPOTREE_PLANNER'),
    'CODER_LLM': _llm_settings('HYPOTREE_CODER'),
}

# Logging
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'search': {
            'handlers': ['console'],
            'level': os.getenv('HYPOTREE_LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
    },
}

# Django REST Framework (serializers only; no views are routed)
REST_FRAMEWORK = {
    'UNAUTHENTICATED_USER': None,
}
