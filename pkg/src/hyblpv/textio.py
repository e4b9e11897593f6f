"""Line-oriented structured text used for certificates, controllers and SDP dumps.

Layout::

    <kind> <version>
    # comment
    key value ...
    begin <section> [args ...]
      ...
    end <section>
    matrix <name> <rows> <cols>
    <row 1: cols numbers>
    ...

Tokens are whitespace separated with shell-style quoting.  Floats are
written with ``repr`` so files round-trip bit for bit.
"""
from __future__ import annotations

import shlex
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np


class FormatError(ValueError):
    """Malformed structured text; ``line`` is 1-based."""

    def __init__(self, line: int, msg: str, source: str | None = None):
        where = f"{source}:{line}" if source else f"line {line}"
        super().__init__(f"{where}: {msg}")
        self.line = line
        self.msg = msg


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return shlex.quote(str(x))


class Writer:
    def __init__(self, kind: str, version: int):
        self.lines = [f"{kind} {version}"]
        self._stack: list[str] = []

    def _put(self, text: str) -> None:
        self.lines.append("  " * len(self._stack) + text)

    def comment(self, text: str) -> None:
        self._put(f"# {text}")

    def field(self, key: str, *values) -> None:
        self._put(" ".join([key, *(fmt(v) for v in values)]))

    def begin(self, name: str, *args) -> None:
        self._put(" ".join(["begin", name, *(fmt(a) for a in args)]))
        self._stack.append(name)

    def end(self) -> None:
        name = self._stack.pop()
        self._put(f"end {name}")

    def matrix(self, name: str, M) -> None:
        M = np.atleast_2d(np.asarray(M, float))
        if M.ndim != 2:
            raise ValueError(f"{name}: only 2-D arrays can be written")
        self._put(f"matrix {name} {M.shape[0]} {M.shape[1]}")
        for row in M:
            self._put(" ".join(repr(float(v)) for v in row) if row.size else "")

    def text(self) -> str:
        if self._stack:
            raise ValueError(f"unclosed section {self._stack[-1]!r}")
        return "\n".join(self.lines) + "\n"


@dataclass
class Entry:
    key: str
    args: list[str]
    line: int


@dataclass
class Node:
    name: str
    args: list[str]
    line: int
    entries: list[Entry] = field(default_factory=list)
    matrices: dict[str, tuple[np.ndarray, int]] = field(default_factory=dict)
    children: list["Node"] = field(default_factory=list)
    source: str | None = None

    def error(self, line: int, msg: str) -> FormatError:
        return FormatError(line, msg, self.source)

    # fields ----------------------------------------------------------------
    def entries_named(self, key: str) -> list[Entry]:
        return [e for e in self.entries if e.key == key]

    def entry(self, key: str, count: int | None = None, optional: bool = False) -> Entry | None:
        found = self.entries_named(key)
        if not found:
            if optional:
                return None
            raise self.error(self.line, f"section {self.name!r} lacks {key!r}")
        if len(found) > 1:
            raise self.error(found[1].line, f"duplicate {key!r}")
        e = found[0]
        if count is not None and len(e.args) != count:
            raise self.error(e.line, f"{key!r} expects {count} value(s), got {len(e.args)}")
        return e

    def floats(self, key: str, count: int | None = None, optional: bool = False) -> list[float] | None:
        e = self.entry(key, count, optional)
        return None if e is None else to_floats(e, self)

    def float(self, key: str, optional: bool = False) -> float | None:
        v = self.floats(key, 1, optional)
        return None if v is None else v[0]

    def int(self, key: str, optional: bool = False) -> int | None:
        e = self.entry(key, 1, optional)
        return None if e is None else to_int(e.args[0], e.line, self)

    def str(self, key: str, optional: bool = False) -> str | None:
        e = self.entry(key, 1, optional)
        return None if e is None else e.args[0]

    # matrices & sections ---------------------------------------------------
    def matrix(self, name: str, shape: tuple[int, int] | None = None, optional: bool = False):
        if name not in self.matrices:
            if optional:
                return None
            raise self.error(self.line, f"section {self.name!r} lacks matrix {name!r}")
        M, line = self.matrices[name]
        if shape is not None and M.shape != tuple(shape):
            raise self.error(line, f"matrix {name!r} has shape {M.shape}, expected {tuple(shape)}")
        return M

    def sections(self, name: str) -> list["Node"]:
        return [c for c in self.children if c.name == name]

    def section(self, name: str, optional: bool = False) -> "Node | None":
        found = self.sections(name)
        if not found:
            if optional:
                return None
            raise self.error(self.line, f"section {self.name!r} lacks section {name!r}")
        if len(found) > 1:
            raise self.error(found[1].line, f"duplicate section {name!r}")
        return found[0]


def to_int(tok: str, line: int, node: Node | None = None) -> int:
    try:
        return int(tok)
    except ValueError:
        raise FormatError(line, f"expected an integer, got {tok!r}", node.source if node else None) from None


def to_floats(e: Entry, node: Node | None = None) -> list[float]:
    try:
        vals = [float(t) for t in e.args]
    except ValueError:
        raise FormatError(e.line, f"{e.key!r}: non-numeric value", node.source if node else None) from None
    return vals


def parse(text: str, kind: str, versions: Iterable[int] = (1,), source: str | None = None) -> Node:
    """Parse into a tree; the root node carries the header version in ``args``."""
    lines = text.splitlines()

    def err(line, msg):
        return FormatError(line, msg, source)

    k = 0
    while k < len(lines) and not lines[k].strip():
        k += 1
    if k == len(lines):
        raise err(1, "empty file")
    head = lines[k].split()
    if len(head) != 2 or head[0] != kind:
        raise err(k + 1, f"expected header '{kind} <version>'")
    version = to_int(head[1], k + 1)
    if version not in tuple(versions):
        raise err(k + 1, f"unsupported {kind} version {version}")
    root = Node(kind, [str(version)], k + 1, source=source)
    stack = [root]
    k += 1
    while k < len(lines):
        raw = lines[k].strip()
        lineno = k + 1
        k += 1
        if not raw or raw.startswith("#"):
            continue
        try:
            toks = shlex.split(raw)
        except ValueError as exc:
            raise err(lineno, f"bad quoting ({exc})") from None
        key, args = toks[0], toks[1:]
        node = stack[-1]
        if key == "begin":
            if not args:
                raise err(lineno, "'begin' needs a section name")
            child = Node(args[0], args[1:], lineno, source=source)
            node.children.append(child)
            stack.append(child)
        elif key == "end":
            if len(stack) == 1:
                raise err(lineno, "'end' without 'begin'")
            if args[:1] != [node.name] or len(args) != 1:
                raise err(lineno, f"expected 'end {node.name}'")
            stack.pop()
        elif key == "matrix":
            if len(args) != 3:
                raise err(lineno, "'matrix' expects a name, rows and cols")
            name, r, c = args[0], to_int(args[1], lineno), to_int(args[2], lineno)
            if r < 0 or c < 0:
                raise err(lineno, "negative matrix size")
            if name in node.matrices:
                raise err(lineno, f"duplicate matrix {name!r}")
            M = np.empty((r, c))
            for i in range(r):
                if k >= len(lines):
                    raise err(k, f"matrix {name!r} ends after {i} of {r} rows")
                row = lines[k].split()
                k += 1
                if len(row) != c:
                    raise err(k, f"matrix {name!r} row {i + 1} has {len(row)} values, expected {c}")
                try:
                    M[i] = [float(t) for t in row]
                except ValueError:
                    raise err(k, f"matrix {name!r} row {i + 1} is not numeric") from None
            if not np.all(np.isfinite(M)):
                raise err(lineno, f"matrix {name!r} has non-finite entries")
            node.matrices[name] = (M, lineno)
        else:
            node.entries.append(Entry(key, args, lineno))
    if len(stack) > 1:
        raise err(len(lines), f"section {stack[-1].name!r} opened on line {stack[-1].line} is not closed")
    return root
