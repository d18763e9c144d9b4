import logging

from django.apps import AppConfig
from django.conf import settings

logger = logging.getLogger(__name__)


class NasConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "nas"
    verbose_name = "Architecture search"

    def ready(self) -> None:
        threads = getattr(settings, "NAS_NUM_THREADS", 0)
        if threads:
            import torch

            torch.set_num_threads(threads)
            logger.debug("torch intra-op threads set to %d", threads)
