#!/usr/bin/env python3
"""Run the poisson_links study; forwards every flag to 'scorefilt experiment'."""

import sys

from scorefilt.cli import main

if __name__ == "__main__":
    sys.exit(main(["experiment", "poisson_links"] + sys.argv[1:]))
