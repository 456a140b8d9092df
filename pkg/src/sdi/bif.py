"""Parser for the discrete-variable subset of the Bayesian Interchange Format.

Supports the grammar used by the Bayesian network repository files: a
`network` block, `variable` blocks declaring `type discrete [k] { labels };`,
and `probability` blocks with either conditional `(label, ...) p, ...;` rows
or an unconditional `table p, ...;` row.  Comments in `//` and `/* */` form
are stripped.  Identifiers are case-sensitive.  Every diagnostic carries the
line number it was raised from.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .graphs import adjacency_from_edges, is_dag
from .scm import CptMechanism, GroundTruthScm

ROW_SUM_TOLERANCE = 1e-4


class BifError(ValueError):
    """Parse or validation failure with a 1-based source line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class BifVariable:
    name: str
    labels: tuple[str, ...]
    line: int

    @property
    def cardinality(self) -> int:
        return len(self.labels)


@dataclass
class BifNetwork:
    """A parsed network: declaration-ordered variables, parents, and tables.

    `tables[name]` has shape (prod of parent cardinalities, own cardinality)
    with rows in row-major order of the parents' label indices (parents in
    their declared order).  Rows are renormalized after the row-sum audit.
    """

    name: str
    variables: list[BifVariable]
    parents: dict[str, list[str]] = field(default_factory=dict)
    tables: dict[str, np.ndarray] = field(default_factory=dict)

    def index_of(self, name: str) -> int:
        for i, v in enumerate(self.variables):
            if v.name == name:
                return i
        raise KeyError(name)

    def variable(self, name: str) -> BifVariable:
        return self.variables[self.index_of(name)]

    def adjacency(self) -> np.ndarray:
        m = len(self.variables)
        pairs = []
        for child, ps in self.parents.items():
            ci = self.index_of(child)
            pairs += [(self.index_of(p), ci) for p in ps]
        return adjacency_from_edges(m, pairs)

    def edge_count(self) -> int:
        return sum(len(p) for p in self.parents.values())

    def max_in_degree(self) -> int:
        return max((len(p) for p in self.parents.values()), default=0)


@dataclass
class _Token:
    text: str
    line: int


_COMMENT_BLOCK = re.compile(r"/\*.*?\*/", re.DOTALL)
_TOKEN = re.compile(r"[A-Za-z0-9_.+\-]+|[(){}\[\]|,;]")


def _strip_comments(text: str) -> str:
    def blank_keep_newlines(match: re.Match) -> str:
        return "".join("\n" if ch == "\n" else " " for ch in match.group(0))

    text = _COMMENT_BLOCK.sub(blank_keep_newlines, text)
    return re.sub(r"//[^\n]*", "", text)


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    for lineno, line in enumerate(_strip_comments(text).splitlines(), start=1):
        pos = 0
        for match in _TOKEN.finditer(line):
            between = line[pos:match.start()]
            if between.strip():
                raise BifError(f"unknown token {between.strip()!r}", lineno)
            tokens.append(_Token(match.group(0), lineno))
            pos = match.end()
        if line[pos:].strip():
            raise BifError(f"unknown token {line[pos:].strip()!r}", lineno)
    return tokens


class _Parser:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> _Token | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self, what: str = "token") -> _Token:
        tok = self.peek()
        if tok is None:
            last = self.tokens[-1].line if self.tokens else 1
            raise BifError(f"unexpected end of file, expected {what}", last)
        self.pos += 1
        return tok

    def expect(self, text: str) -> _Token:
        tok = self.next(repr(text))
        if tok.text != text:
            raise BifError(f"expected {text!r}, got {tok.text!r}", tok.line)
        return tok

    def number(self) -> float:
        tok = self.next("number")
        try:
            return float(tok.text)
        except ValueError:
            raise BifError(f"expected a number, got {tok.text!r}", tok.line) from None

    def skip_block(self) -> None:
        """Consume a { ... } block with nesting (used for network properties)."""
        self.expect("{")
        depth = 1
        while depth:
            tok = self.next("'}'")
            if tok.text == "{":
                depth += 1
            elif tok.text == "}":
                depth -= 1


def parse_bif(text: str) -> BifNetwork:
    """Parse BIF text into a validated BifNetwork.

    Raises BifError with a line number for unknown tokens, duplicate
    variables, non-discrete variables, missing or duplicate CPT rows, and
    row sums off by more than 1e-4.
    """
    parser = _Parser(_tokenize(text))
    tok = parser.peek()
    if tok is None:
        raise BifError("empty input", 1)
    parser.expect("network")
    name = parser.next("network name").text
    parser.skip_block()

    net = BifNetwork(name=name, variables=[])
    seen_blocks: set[str] = set()
    while parser.peek() is not None:
        tok = parser.next("'variable' or 'probability'")
        if tok.text == "variable":
            _parse_variable(parser, net)
        elif tok.text == "probability":
            _parse_probability(parser, net, seen_blocks)
        else:
            raise BifError(f"expected 'variable' or 'probability', got {tok.text!r}",
                           tok.line)

    for v in net.variables:
        if v.name not in net.tables:
            raise BifError(f"variable {v.name!r} has no probability block", v.line)
    return net


def _parse_variable(parser: _Parser, net: BifNetwork) -> None:
    name_tok = parser.next("variable name")
    if any(v.name == name_tok.text for v in net.variables):
        raise BifError(f"duplicate variable {name_tok.text!r}", name_tok.line)
    parser.expect("{")
    parser.expect("type")
    kind = parser.next("variable type")
    if kind.text != "discrete":
        raise BifError(f"only discrete variables are supported, got {kind.text!r}",
                       kind.line)
    parser.expect("[")
    count = int(parser.number())
    parser.expect("]")
    parser.expect("{")
    labels: list[str] = []
    while True:
        tok = parser.next("category label")
        if tok.text == "}":
            break
        if tok.text == ",":
            continue
        labels.append(tok.text)
    parser.expect(";")
    parser.expect("}")
    if len(labels) != count:
        raise BifError(
            f"variable {name_tok.text!r} declares {count} categories but lists "
            f"{len(labels)} labels", name_tok.line)
    net.variables.append(BifVariable(name_tok.text, tuple(labels), name_tok.line))


def _parse_probability(parser: _Parser, net: BifNetwork,
                       seen_blocks: set[str]) -> None:
    open_tok = parser.expect("(")
    child_tok = parser.next("variable name")
    try:
        child = net.variable(child_tok.text)
    except KeyError:
        raise BifError(f"unknown variable {child_tok.text!r}", child_tok.line) from None
    if child.name in seen_blocks:
        raise BifError(f"duplicate probability block for {child.name!r}",
                       child_tok.line)
    seen_blocks.add(child.name)

    parent_names: list[str] = []
    tok = parser.next("'|' or ')'")
    if tok.text == "|":
        while True:
            ptok = parser.next("parent name")
            if ptok.text == ",":
                continue
            if ptok.text == ")":
                break
            try:
                net.variable(ptok.text)
            except KeyError:
                raise BifError(f"unknown parent {ptok.text!r}", ptok.line) from None
            if ptok.text in parent_names:
                raise BifError(f"repeated parent {ptok.text!r}", ptok.line)
            parent_names.append(ptok.text)
    elif tok.text != ")":
        raise BifError(f"expected '|' or ')', got {tok.text!r}", tok.line)
    if not parent_names and tok.text == "|":
        raise BifError("empty parent list", tok.line)

    parents = [net.variable(p) for p in parent_names]
    cards = [p.cardinality for p in parents]
    n_rows = int(np.prod(cards)) if cards else 1
    table = np.full((n_rows, child.cardinality), np.nan)

    parser.expect("{")
    while True:
        tok = parser.next("probability row or '}'")
        if tok.text == "}":
            break
        if tok.text == "table":
            if parent_names:
                raise BifError("'table' row in a conditional block", tok.line)
            row = _parse_row(parser, child, tok.line)
            if not np.isnan(table[0]).any():
                raise BifError(f"duplicate row for {child.name!r}", tok.line)
            table[0] = row
        elif tok.text == "(":
            if not parent_names:
                raise BifError("conditional row in an unconditional block", tok.line)
            combo: list[str] = []
            while True:
                ltok = parser.next("parent label")
                if ltok.text == ")":
                    break
                if ltok.text == ",":
                    continue
                combo.append(ltok.text)
            if len(combo) != len(parents):
                raise BifError(
                    f"row lists {len(combo)} parent labels, expected {len(parents)}",
                    tok.line)
            idx = 0
            for parent, label in zip(parents, combo):
                if label not in parent.labels:
                    raise BifError(
                        f"{label!r} is not a category of {parent.name!r}", tok.line)
                idx = idx * parent.cardinality + parent.labels.index(label)
            if not np.isnan(table[idx]).any():
                raise BifError(
                    f"duplicate row ({', '.join(combo)}) for {child.name!r}", tok.line)
            table[idx] = _parse_row(parser, child, tok.line)
        else:
            raise BifError(f"expected '(' or 'table', got {tok.text!r}", tok.line)

    missing = np.flatnonzero(np.isnan(table).any(axis=1))
    if missing.size:
        combo_labels = _row_labels(int(missing[0]), parents)
        raise BifError(
            f"missing CPT row ({combo_labels}) for {child.name!r}", open_tok.line)

    sums = table.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOLERANCE)
    if bad.size:
        raise BifError(
            f"row ({_row_labels(int(bad[0]), parents)}) of {child.name!r} sums to "
            f"{sums[bad[0]]:.6f}", open_tok.line)
    table /= sums[:, None]

    net.parents[child.name] = parent_names
    net.tables[child.name] = table


def _parse_row(parser: _Parser, child: BifVariable, line: int) -> np.ndarray:
    values: list[float] = []
    while True:
        tok = parser.peek()
        if tok is None:
            raise BifError("unterminated probability row", line)
        if tok.text == ";":
            parser.next()
            break
        if tok.text == ",":
            parser.next()
            continue
        values.append(parser.number())
    if len(values) != child.cardinality:
        raise BifError(
            f"row has {len(values)} entries, {child.name!r} has "
            f"{child.cardinality} categories", line)
    return np.asarray(values)


def _row_labels(row_index: int, parents: list[BifVariable]) -> str:
    if not parents:
        return "table"
    labels = []
    for parent in reversed(parents):
        labels.append(parent.labels[row_index % parent.cardinality])
        row_index //= parent.cardinality
    return ", ".join(reversed(labels))


def serialize_bif(net: BifNetwork) -> str:
    """Canonical BIF text; parse(serialize(parse(x))) == parse(x)."""
    out = [f"network {net.name} {{", "}"]
    for v in net.variables:
        out.append(f"variable {v.name} {{")
        out.append(f"  type discrete [ {v.cardinality} ] {{ {', '.join(v.labels)} }};")
        out.append("}")
    for v in net.variables:
        parent_names = net.parents[v.name]
        table = net.tables[v.name]
        if parent_names:
            out.append(f"probability ( {v.name} | {', '.join(parent_names)} ) {{")
            parents = [net.variable(p) for p in parent_names]
            for row_index in range(table.shape[0]):
                labels = _row_labels(row_index, parents)
                probs = ", ".join(format(x, ".10g") for x in table[row_index])
                out.append(f"  ({labels}) {probs};")
        else:
            out.append(f"probability ( {v.name} ) {{")
            probs = ", ".join(format(x, ".10g") for x in table[0])
            out.append(f"  table {probs};")
        out.append("}")
    return "\n".join(out) + "\n"


def networks_equal(a: BifNetwork, b: BifNetwork) -> bool:
    if a.name != b.name or len(a.variables) != len(b.variables):
        return False
    for va, vb in zip(a.variables, b.variables):
        if (va.name, va.labels) != (vb.name, vb.labels):
            return False
    if a.parents != b.parents:
        return False
    return all(np.allclose(a.tables[v.name], b.tables[v.name], atol=1e-12)
               for v in a.variables)


def scm_from_bif(net: BifNetwork, temperature: float = 1.0,
                 sample_cap: int = 1024) -> GroundTruthScm:
    """CPT-backed black box over the network's declaration-ordered variables."""
    adjacency = net.adjacency()
    if not is_dag(adjacency):
        raise ValueError(f"network {net.name!r} induces a cyclic graph")
    n_categories = np.array([v.cardinality for v in net.variables])
    mechanisms = []
    for i, v in enumerate(net.variables):
        parent_idx = tuple(net.index_of(p) for p in net.parents[v.name])
        cards = tuple(net.variable(p).cardinality for p in net.parents[v.name])
        table = net.tables[v.name].reshape(cards + (v.cardinality,))
        mechanisms.append(CptMechanism(parent_idx, table))
    return GroundTruthScm(adjacency, mechanisms, n_categories,
                          temperature=temperature, sample_cap=sample_cap,
                          variable_names=[v.name for v in net.variables])
