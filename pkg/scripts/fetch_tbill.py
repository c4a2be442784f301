#!/usr/bin/env python3
"""Download the quarterly 6-month minus 3-month Treasury-bill spread.

Pulls the FRED-QD quarterly research file (pinned 2021-04 vintage by
default), extracts the TB6M3M column for 1959Q1 through 2021Q1 (249
observations), and writes a two-column CSV ``date,TB6M3M`` with the raw
spread values.  The replication commands ingest it with ``data_scale=10``.

A SHA-256 pin sits next to the output file: pass ``--record`` on the first
successful fetch to write ``<out>.sha256``; later fetches verify against it
and fail on drift.  The dataset itself is not vendored with the repository.
"""

import argparse
import csv
import hashlib
import io
import os
import sys
import urllib.request
from datetime import datetime

DEFAULT_URL = "https://files.stlouisfed.org/files/htdocs/fred-md/quarterly/2021-04.csv"
COLUMN = "TB6M3M"
START = datetime(1959, 3, 1)
END = datetime(2021, 3, 1)
EXPECTED_ROWS = 249


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--url", default=DEFAULT_URL,
                        help="source CSV (default: pinned FRED-QD vintage)")
    parser.add_argument("--out", default=None,
                        help="output CSV path (default: $SCOREFILT_DATA_DIR/"
                             "tb6m3m.csv or ./data/tb6m3m.csv)")
    parser.add_argument("--record", action="store_true",
                        help="write <out>.sha256 alongside the output")
    parser.add_argument("--from-file", default=None, metavar="PATH",
                        help="read the source CSV from a local file instead "
                             "of downloading")
    return parser.parse_args(argv)


def default_out():
    base = os.environ.get("SCOREFILT_DATA_DIR") or os.path.join(os.curdir, "data")
    return os.path.join(base, "tb6m3m.csv")


def read_source(args):
    if args.from_file:
        with open(args.from_file, "rb") as fh:
            return fh.read()
    print(f"downloading {args.url}", file=sys.stderr)
    with urllib.request.urlopen(args.url, timeout=60) as response:
        return response.read()


def parse_date(cell):
    cell = cell.strip()
    for fmt in ("%m/%d/%Y", "%Y-%m-%d"):
        try:
            return datetime.strptime(cell, fmt)
        except ValueError:
            continue
    return None


def extract(raw):
    reader = csv.reader(io.StringIO(raw.decode("utf-8-sig")))
    header = next(reader, None)
    if header is None or COLUMN not in header:
        sys.exit(f"error: column {COLUMN!r} not found in source header")
    idx = header.index(COLUMN)
    rows = []
    for row in reader:
        if not row:
            continue
        date = parse_date(row[0])
        if date is None or not (START <= date <= END):
            continue  # metadata rows (factors/transform) or out-of-sample
        cell = row[idx].strip() if idx < len(row) else ""
        if not cell:
            sys.exit(f"error: blank {COLUMN} cell at {row[0]}")
        rows.append((date.strftime("%Y-%m-%d"), float(cell)))
    return rows


def main(argv=None):
    args = parse_args(argv)
    out_path = args.out or default_out()
    rows = extract(read_source(args))
    if len(rows) != EXPECTED_ROWS:
        print(f"warning: expected {EXPECTED_ROWS} quarterly rows, got "
              f"{len(rows)} (source vintage drift?)", file=sys.stderr)
    os.makedirs(os.path.dirname(out_path) or os.curdir, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["date", COLUMN])
    writer.writerows((date, format(value, ".17g")) for date, value in rows)
    payload = buf.getvalue().encode()
    digest = hashlib.sha256(payload).hexdigest()
    pin_path = out_path + ".sha256"
    if os.path.exists(pin_path):
        pinned = open(pin_path).read().split()[0]
        if pinned != digest:
            sys.exit(f"error: checksum mismatch: pinned {pinned}, got {digest}")
        print("checksum verified", file=sys.stderr)
    with open(out_path, "wb") as fh:
        fh.write(payload)
    if args.record:
        with open(pin_path, "w") as fh:
            fh.write(f"{digest}  {os.path.basename(out_path)}\n")
    print(f"wrote {len(rows)} rows to {out_path}")
    print(f"sha256 {digest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
