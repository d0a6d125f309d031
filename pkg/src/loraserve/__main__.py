"""Allow ``python -m loraserve``."""
import sys

from .cli import main

sys.exit(main())
