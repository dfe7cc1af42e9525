from pathlib import Path
from decouple import config

BASE_DIR = Path(__file__).resolve().parent.parent

# SECURITY
SECRET_KEY = config("SECRET_KEY", default="unsafe-secret-key")
DEBUG = config("DEBUG", default=False, cast=bool)

ALLOWED_HOSTS = []

# APPLICATIONS
INSTALLED_APPS = [
    'django.contrib.contenttypes',

    'simulation',
    'segmentation',
    'pseudolabels',
    'training',
    'evaluation',
    'pipeline',
]

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': config("GUIDEWIRE_DB_PATH", default=str(BASE_DIR / 'db.sqlite3')),
    }
}

LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = True
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# PIPELINE
GUIDEWIRE_TORCH_THREADS = config("GUIDEWIRE_TORCH_THREADS", default=1, cast=int)
GUIDEWIRE_WORKERS = config("GUIDEWIRE_WORKERS", default=1, cast=int)
GUIDEWIRE_RUN_BENCH = config("GUIDEWIRE_RUN_BENCH", default=False, cast=bool)

# LOGGING
GUIDEWIRE_LOG_LEVEL = config("GUIDEWIRE_LOG_LEVEL", default="INFO")

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        app: {
            'handlers': ['console'],
            'level': GUIDEWIRE_LOG_LEVEL,
            'propagate': False,
        }
        for app in ('simulation', 'segmentation', 'pseudolabels', 'training', 'evaluation', 'pipeline')
    },
}
