"""
Main entry point of the cross-view synthesis tool
"""
import logging
import os
import sys
from pathlib import Path

from dotenv import load_dotenv


load_dotenv()

from app.core.config_service import ConfigService  # noqa: E402

THREAD_VARIABLES = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def export_thread_caps() -> int:
    """Export XVFG_THREADS to the BLAS / OpenMP variables; must run before numpy is first imported"""
    threads = ConfigService.get_settings().runtime.threads
    for var in THREAD_VARIABLES:
        os.environ[var] = str(threads)
    return threads


export_thread_caps()

from app.cli import run  # noqa: E402


def configure_logging() -> None:
    """Root logger from LOG_LEVEL / LOG_FORMAT / LOG_FILE_PATH; diagnostics go to stderr"""
    settings = ConfigService.get_settings().logging
    handlers = [logging.StreamHandler(sys.stderr)]
    if settings.file_path:
        Path(settings.file_path).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(settings.file_path))
    logging.basicConfig(
        level=getattr(logging, settings.level.upper(), logging.INFO),
        format=settings.format,
        handlers=handlers,
        force=True,
    )


def main() -> int:
    configure_logging()
    return run(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
