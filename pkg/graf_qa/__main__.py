"""Allow ``python -m graf_qa``."""

import sys

from graf_qa.cli import main

if __name__ == "__main__":
    sys.exit(main())
