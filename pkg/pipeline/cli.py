import os
import sys

from django.core.management import execute_from_command_line


def cli(argv=None) -> int:
    """
    Run one pipeline subcommand (``argv`` without the program name) and
    return its exit status: 0 on success, 1 on a stage error, 2 on a usage
    error.
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'guidewire_platform.settings')
    try:
        execute_from_command_line(['manage.py', *argv])
    except SystemExit as exc:
        if exc.code is None:
            return 0
        return exc.code if isinstance(exc.code, int) else 1
    return 0
