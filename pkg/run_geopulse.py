#!/usr/bin/env python3

"""
Run geopulse from a checkout without installing the package.
"""

import sys
from pathlib import Path

from dotenv import load_dotenv

# Environment from .env (GEOPULSE_SEED, GEOPULSE_LOG_LEVEL)
load_dotenv()

# Repository root on the path so the src package imports
sys.path.insert(0, str(Path(__file__).parent))

from src.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
