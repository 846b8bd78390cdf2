"""Shared text formats and atomic file writes.

Matrix block::

    dm <rows> <cols>
    <row 0 values>
    ...

Values are printed with 17 significant digits, which round-trips every
float64 exactly.
"""

import hashlib
import os
import tempfile
from contextlib import contextmanager

import numpy as np

from .errors import ParseError


def fmt_float(x):
    return "%.17g" % float(x)


def format_matrix(M):
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    rows, cols = M.shape
    lines = [f"dm {rows} {cols}"]
    for r in range(rows):
        lines.append(" ".join(fmt_float(v) for v in M[r]))
    return "\n".join(lines) + "\n"


class LineReader:
    """Line cursor that remembers line numbers for error messages."""

    def __init__(self, text, path=None):
        self.lines = text.split("\n")
        if self.lines and self.lines[-1] == "":
            self.lines.pop()
        self.pos = 0
        self.path = path

    @property
    def lineno(self):
        return self.pos  # 1-based number of the line last returned

    def at_end(self):
        return self.pos >= len(self.lines)

    def peek(self):
        if self.at_end():
            return None
        return self.lines[self.pos]

    def next(self, what="line"):
        if self.at_end():
            raise ParseError(f"unexpected end of file, expected {what}", self.path, self.pos + 1)
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def error(self, message):
        return ParseError(message, self.path, self.pos)


def read_matrix(reader):
    header = reader.next("matrix header").split()
    if len(header) != 3 or header[0] != "dm":
        raise reader.error(f"expected 'dm <rows> <cols>', got {' '.join(header)!r}")
    try:
        rows, cols = int(header[1]), int(header[2])
    except ValueError:
        raise reader.error("matrix dimensions must be integers") from None
    if rows < 0 or cols < 0:
        raise reader.error("matrix dimensions must be non-negative")
    M = np.empty((rows, cols), dtype=np.float64)
    for r in range(rows):
        parts = reader.next(f"matrix row {r}").split()
        if len(parts) != cols:
            raise reader.error(f"expected {cols} values, got {len(parts)}")
        try:
            M[r] = [float(p) for p in parts]
        except ValueError:
            raise reader.error("non-numeric matrix value") from None
        if not np.all(np.isfinite(M[r])):
            raise reader.error("non-finite matrix value")
    return M


def parse_matrix(text):
    reader = LineReader(text)
    M = read_matrix(reader)
    if not reader.at_end():
        raise reader.error("trailing content after matrix")
    return M


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` via a temp file in the same directory + rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_text(path):
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def sha256_text(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@contextmanager
def staged_dir(out_dir):
    """Yield a staging directory whose files are moved into ``out_dir`` on success.

    On any exception the staging directory is removed and ``out_dir`` is left
    as it was.
    """
    out_dir = os.path.abspath(os.fspath(out_dir))
    parent = os.path.dirname(out_dir)
    os.makedirs(parent, exist_ok=True)
    stage = tempfile.mkdtemp(prefix=".stage-", dir=parent)
    created = False
    try:
        yield stage
        if not os.path.isdir(out_dir):
            os.makedirs(out_dir)
            created = True
        for name in sorted(os.listdir(stage)):
            os.replace(os.path.join(stage, name), os.path.join(out_dir, name))
    except BaseException:
        if created and not os.listdir(out_dir):
            os.rmdir(out_dir)
        raise
    finally:
        for name in os.listdir(stage):
            os.unlink(os.path.join(stage, name))
        os.rmdir(stage)
