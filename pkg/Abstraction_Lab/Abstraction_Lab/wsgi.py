"""
WSGI config for Abstraction_Lab project.

Serves the admin, where experiment runs and bound reports can be browsed.
"""

import os

from django.core.wsgi import get_wsgi_application

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'Abstraction_Lab.settings')

application = get_wsgi_application()
