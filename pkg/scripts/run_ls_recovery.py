#!/usr/bin/env python3
"""Run the ls_recovery study; forwards every flag to 'scorefilt experiment'."""

import sys

from scorefilt.cli import main

if __name__ == "__main__":
    sys.exit(main(["experiment", "ls_recovery"] + sys.argv[1:]))
