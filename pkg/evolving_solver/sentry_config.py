"""
Sentry configuration and initialization
Must be initialized BEFORE long-running jobs start so worker failures are captured
"""

import logging
import os

import sentry_sdk
from sentry_sdk.integrations.logging import LoggingIntegration

from .settings import settings

log = logging.getLogger(__name__)


def init_sentry() -> None:
    """
    Initialize Sentry if DSN is provided.

    Errors logged at ERROR level by the harness (failed tasks in a batch,
    divergent replays) become Sentry events; INFO lines are kept as breadcrumbs.
    """
    if not settings.sentry_dsn:
        log.debug("Sentry DSN not provided, skipping Sentry initialization")
        return

    sentry_sdk.init(
        dsn=settings.sentry_dsn,
        send_default_pii=settings.sentry_send_default_pii,
        enable_logs=settings.sentry_enable_logs,
        traces_sample_rate=settings.sentry_traces_sample_rate,
        integrations=[
            LoggingIntegration(level=logging.INFO, event_level=logging.ERROR),
        ],
        # Set environment based on common env vars
        environment=os.getenv("ENVIRONMENT", "local"),
    )
    log.info(
        "Sentry initialized with logging integration. "
        f"Tracing: {settings.sentry_traces_sample_rate * 100}%, "
        f"Logs: {'enabled' if settings.sentry_enable_logs else 'disabled'}"
    )
