import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

BASE_DIR = Path(__file__).resolve().parent.parent

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.getenv("SECRET_KEY", "vit-quant-local-only")
DEBUG = os.getenv("DEBUG", "False").lower() in ("1", "true", "yes")

ALLOWED_HOSTS = []
# Application definition
INSTALLED_APPS = [
    "django.contrib.auth",
    "django.contrib.contenttypes",
    "rest_framework",
    "vit_quant.apps.VitQuantConfig",
]

# Batch commands only: no database-backed models
DATABASES = {}

USE_I18N = False
USE_TZ = True
TIME_ZONE = "UTC"

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

# Pipeline defaults, overridable per run by --config and flags
VIT_QUANT = {
    "SEED": int(os.getenv("VIT_QUANT_SEED", 0)),
    "BASE_BITS": int(os.getenv("VIT_QUANT_BASE_BITS", 4)),
    "MODE": os.getenv("VIT_QUANT_MODE", "greedy"),
    "N_SIGMA": float(os.getenv("VIT_QUANT_N_SIGMA", 2.0)),
    "PERCENTILE": float(os.getenv("VIT_QUANT_PERCENTILE", 99.99)),
    "CALIB_SIZE": int(os.getenv("VIT_QUANT_CALIB_SIZE", 32)),
    "IMPORTANCE_SAMPLES": int(os.getenv("VIT_QUANT_IMPORTANCE_SAMPLES", 256)),
    "RUN_DIR": os.getenv("VIT_QUANT_RUN_DIR", str(BASE_DIR / "runs" / "default")),
}
VIT_QUANT_LOG_LEVEL = os.getenv("VIT_QUANT_LOG_LEVEL", "INFO").upper()

# Celery: in-memory broker with eager execution unless a worker is configured
CELERY_BROKER_URL = os.getenv("CELERY_BROKER_URL", "memory://")
CELERY_RESULT_BACKEND = os.getenv("CELERY_RESULT_BACKEND", "cache+memory://")
CELERY_TASK_ALWAYS_EAGER = os.getenv("CELERY_TASK_ALWAYS_EAGER", "True").lower() in ("1", "true", "yes")
CELERY_TASK_EAGER_PROPAGATES = True

# serialization
CELERY_ACCEPT_CONTENT = ["json"]
CELERY_TASK_SERIALIZER = "json"
CELERY_RESULT_SERIALIZER = "json"

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "plain": {
            "format": "{asctime} {levelname} {name}: {message}",
            "style": "{",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "plain",
        },
    },
    "root": {
        "handlers": ["console"],
        "level": "INFO",
    },
    "loggers": {
        "vit_quant": {
            "handlers": ["console"],
            "level": VIT_QUANT_LOG_LEVEL,
            "propagate": False,
        },
    },
}
