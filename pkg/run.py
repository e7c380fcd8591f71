"""
Entry point for the benchmark harness.

    python run.py --config config/example_run.yaml ingest
"""

import logging

from app.cli import main
from config.settings import Config

if __name__ == '__main__':
    logging.basicConfig(
        level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    main()
