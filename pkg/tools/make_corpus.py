"""Regenerate src/bdevstack/data/english_corpus.txt.gz.

The corpus is plain English prose gathered from freely redistributable texts
found on a stock Linux + CPython install: the common license texts, the Perl
pod documentation and CPython standard-library docstrings. The committed file
is the reference; rerunning this on another machine gives a similar, not
identical, corpus.
"""

import ast
import glob
import gzip
import os
import sys
import sysconfig

OUT = os.path.join(os.path.dirname(__file__), "..", "src", "bdevstack", "data",
                   "english_corpus.txt.gz")


def docstrings(libdir):
    for path in sorted(glob.glob(os.path.join(libdir, "*.py"))):
        try:
            with open(path, encoding="utf-8") as f:
                tree = ast.parse(f.read())
        except (SyntaxError, UnicodeDecodeError):
            continue
        for node in ast.walk(tree):
            if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
                doc = ast.get_docstring(node)
                if doc and len(doc) > 200:
                    yield doc


def main():
    parts = []
    for path in sorted(glob.glob("/usr/share/common-licenses/*")):
        with open(path, "rb") as f:
            parts.append(f.read())
    for path in sorted(glob.glob("/usr/share/perl/*/pod/*.pod")):
        with open(path, "rb") as f:
            parts.append(f.read())
    parts.append("\n\n".join(docstrings(sysconfig.get_paths()["stdlib"])).encode())
    text = b"\n\n".join(parts)
    with gzip.GzipFile(OUT, "wb", mtime=0) as f:
        f.write(text)
    print(f"wrote {len(text)} bytes to {OUT}", file=sys.stderr)


if __name__ == "__main__":
    main()
