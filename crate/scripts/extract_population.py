#!/usr/bin/env python3
"""Turn a labelled dataset into a one-column 0/1 population file.

Works on local copies of public datasets, e.g. the UCI "Audit Data"
(`--label Risk`) or the FraudDetection firm-year file
(`--label misstate --where fyear=2014`). Nothing is downloaded.

    python3 scripts/extract_population.py audit_risk.csv --label Risk -o audit.csv
    seqaudit replay --config configs/audit_risk.toml --data audit.csv
"""

import argparse
import csv
import sys


def parse_where(items):
    filters = []
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            sys.exit(f"--where: expected COLUMN=VALUE, got {item!r}")
        filters.append((key, value))
    return filters


def truthy(raw, line):
    value = raw.strip()
    try:
        number = float(value)
    except ValueError:
        sys.exit(f"line {line}: label {raw!r} is not numeric")
    if number not in (0.0, 1.0):
        sys.exit(f"line {line}: label {raw!r} is not 0 or 1")
    return int(number)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("source", help="input CSV with a header row")
    ap.add_argument("--label", required=True, help="0/1 deviation column")
    ap.add_argument("--where", action="append", default=[], metavar="COLUMN=VALUE",
                    help="keep rows whose COLUMN equals VALUE (numeric compare when possible)")
    ap.add_argument("-o", "--output", default="-", help="output path (default stdout)")
    args = ap.parse_args()
    filters = parse_where(args.where)

    def matches(row):
        for key, want in filters:
            got = row.get(key)
            if got is None:
                sys.exit(f"--where: no column {key!r}")
            try:
                if float(got) != float(want):
                    return False
            except ValueError:
                if got.strip() != want:
                    return False
        return True

    with open(args.source, newline="") as f:
        reader = csv.DictReader(f)
        if args.label not in (reader.fieldnames or []):
            sys.exit(f"--label: no column {args.label!r}")
        labels = [truthy(row[args.label], i + 2) for i, row in enumerate(reader) if matches(row)]

    if not labels:
        sys.exit("empty population")
    out = sys.stdout if args.output == "-" else open(args.output, "w", newline="")
    out.write("x\n")
    out.writelines(f"{x}\n" for x in labels)
    if out is not sys.stdout:
        out.close()
    m = sum(labels)
    print(f"n={len(labels)} m={m} p0={m / len(labels):.5f}", file=sys.stderr)


if __name__ == "__main__":
    main()
