#!/usr/bin/env python3
"""
flotapinn entry point

Wrapper script so the CLI runs from a source checkout without installing.
"""

import sys

from flotapinn.cli import main

if __name__ == "__main__":
    sys.exit(main())
