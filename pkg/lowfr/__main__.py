"""Entry point for ``python -m lowfr``."""

import sys

from .cli import main

sys.exit(main())
