"""
WSGI entry point for the voicelab dashboard.

gunicorn serves ``application`` (see docker-compose.yml); training itself
runs in the Celery worker, never in the web process.
"""

import os

from django.core.wsgi import get_wsgi_application

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'voicelab.settings')

application = get_wsgi_application()
