#!/usr/bin/env python3
"""Run the koopman_grid study; forwards every flag to 'scorefilt experiment'."""

import sys

from scorefilt.cli import main

if __name__ == "__main__":
    sys.exit(main(["experiment", "koopman_grid"] + sys.argv[1:]))
