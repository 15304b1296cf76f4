import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'hypotree_backend.settings')
django.setup()
