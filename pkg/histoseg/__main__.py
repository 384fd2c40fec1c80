"""``python -m histoseg``."""

import sys

from histoseg.cli import main

sys.exit(main())
