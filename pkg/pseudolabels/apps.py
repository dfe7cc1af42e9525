from django.apps import AppConfig


class PseudolabelsConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'pseudolabels'
