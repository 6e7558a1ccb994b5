"""Allow ``python3 -m vqvcplus``."""

import sys

from .cli import main

sys.exit(main())
