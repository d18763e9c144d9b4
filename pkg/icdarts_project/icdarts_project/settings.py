"""
Django settings for icdarts_project.

The project hosts the architecture-search engine (app ``nas``); there is no web
surface, only management commands and the run registry database.
"""
import environ
from pathlib import Path

# =============================================================================
# ENVIRONMENT SETUP
# =============================================================================

BASE_DIR = Path(__file__).resolve().parent.parent

env = environ.Env(
    DJANGO_SECRET_KEY=(str, "unsafe-secret-key-change-me"),
    ICDARTS_DEBUG=(bool, False),
    ICDARTS_LOG_LEVEL=(str, "INFO"),
    TZ=(str, "UTC"),
    # Engine
    ICDARTS_DATA_ROOT=(str, ""),
    ICDARTS_RUNS_DIR=(str, ""),
    ICDARTS_NUM_THREADS=(int, 0),
    ICDARTS_LATENCY_DEVICE=(str, "cpu"),
)

# Read .env file from repository root (parent of icdarts_project)
ENV_FILE = BASE_DIR.parent / ".env"
if ENV_FILE.exists():
    environ.Env.read_env(ENV_FILE)

# Also check for .env in icdarts_project directory
ENV_FILE_ALT = BASE_DIR / ".env"
if ENV_FILE_ALT.exists():
    environ.Env.read_env(ENV_FILE_ALT)

# =============================================================================
# CORE SETTINGS
# =============================================================================

SECRET_KEY = env("DJANGO_SECRET_KEY")
DEBUG = env("ICDARTS_DEBUG")
ALLOWED_HOSTS: list[str] = []

INSTALLED_APPS = [
    "django.contrib.contenttypes",
    "nas",
]

# =============================================================================
# DATABASE (run registry)
# =============================================================================

DATABASES = {
    "default": env.db_url(
        "DATABASE_URL",
        default=f"sqlite:///{BASE_DIR / 'db.sqlite3'}"
    )
}

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

# =============================================================================
# INTERNATIONALIZATION
# =============================================================================

LANGUAGE_CODE = "en-us"
TIME_ZONE = env("TZ")
USE_I18N = False
USE_TZ = True

# =============================================================================
# LOGGING
# =============================================================================

_LOG_LEVEL = "DEBUG" if DEBUG else env("ICDARTS_LOG_LEVEL").upper()

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "verbose": {
            "format": "{levelname} {asctime} {module} {process:d} {message}",
            "style": "{",
        },
        "simple": {
            "format": "{levelname} {message}",
            "style": "{",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "verbose" if DEBUG else "simple",
        },
    },
    "root": {
        "handlers": ["console"],
        "level": "WARNING",
    },
    "loggers": {
        "django": {
            "handlers": ["console"],
            "level": "INFO",
            "propagate": False,
        },
        "nas": {
            "handlers": ["console"],
            "level": _LOG_LEVEL,
            "propagate": False,
        },
    },
}

# =============================================================================
# ARCHITECTURE SEARCH SETTINGS
# =============================================================================

NAS_DATA_ROOT = Path(env("ICDARTS_DATA_ROOT") or (BASE_DIR.parent / "data"))
NAS_RUNS_DIR = Path(env("ICDARTS_RUNS_DIR") or (BASE_DIR.parent / "runs"))
NAS_NUM_THREADS = env("ICDARTS_NUM_THREADS")
NAS_LATENCY_DEVICE = env("ICDARTS_LATENCY_DEVICE")
