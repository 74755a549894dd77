"""Optional logfire tracing.

Without a token nothing is configured and runs only log locally. With one,
records from the ``ibcr`` loggers (checkpoint phases, drain rounds, restarts)
are forwarded to logfire and the report database's SQL is traced.
"""

import logging

import logfire


logger = logging.getLogger(__name__)

SERVICE_NAME = "ibcr"


def setup_instrumentation(token: str | None) -> bool:
    """Configure logfire when a token is given; return whether it was."""
    if not token:
        logger.info("No logfire token provided, run traces stay local.")
        return False
    logfire.configure(token=token, service_name=SERVICE_NAME)
    root = logging.getLogger(SERVICE_NAME)
    if not any(isinstance(h, logfire.LogfireLoggingHandler) for h in root.handlers):
        root.addHandler(logfire.LogfireLoggingHandler())
    # report persistence is the only outbound I/O
    logfire.instrument_sqlalchemy()
    return True
