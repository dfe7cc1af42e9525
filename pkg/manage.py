#!/usr/bin/env python
"""Command-line entry point for the guidewire adaptation pipeline."""
import os
import sys


def main():
    """Run a pipeline stage or any Django administrative task."""
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'guidewire_platform.settings')
    try:
        from pipeline.cli import cli
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Are you sure it's installed and "
            "available on your PYTHONPATH environment variable? Did you "
            "forget to activate a virtual environment?"
        ) from exc
    sys.exit(cli(sys.argv[1:]))


if __name__ == '__main__':
    main()
