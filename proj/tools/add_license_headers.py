#!/usr/bin/env python3
"""Prepend LICENSE_HEADER.txt to C++ sources that lack it."""
import pathlib
import sys

ROOT = pathlib.Path(__file__).resolve().parent.parent
DIRS = ("include", "src", "tests", "tools")
SUFFIXES = {".cpp", ".hpp", ".h", ".cc"}


def main() -> int:
    header = (ROOT / "LICENSE_HEADER.txt").read_text().rstrip("\n") + "\n"
    first = header.splitlines()[0]
    changed = 0
    for d in DIRS:
        for path in sorted((ROOT / d).rglob("*")):
            if path.suffix not in SUFFIXES or "vendor" in path.parts:
                continue
            text = path.read_text()
            if text.startswith(first):
                continue
            path.write_text(header + text)
            changed += 1
    print(f"added header to {changed} file(s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
