"""Query language over a KnowledgeGraph.

A deliberately closed subset of Cypher: MATCH / OPTIONAL MATCH path patterns,
WHERE (=, IN, CONTAINS, AND/OR/NOT, any(...)), WITH projection with implicit
grouping, COLLECT/COUNT aggregates, RETURN ... AS, ORDER BY, LIMIT, and
UNION ALL. Anything outside the subset is a parse error by design: the
grammar is verifiable end to end instead of best-effort compatible.

Node labels test the NodeId namespace; `x.name` evaluates to the canonical
"namespace:local_id" string. Null never satisfies a comparison and COLLECT
skips nulls, so optional matches read as empty collections rather than
tri-valued logic.
"""

from __future__ import annotations

import functools
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Union

from .kg import Edge, KnowledgeGraph, NodeId

__all__ = [
    "CypherError",
    "Diagnostics",
    "Position",
    "QueryAst",
    "ResultTable",
    "execute",
    "parse",
    "pretty_print",
    "run_query",
    "validate",
]


# ---------------------------------------------------------------------------
# Diagnostics

@dataclass(frozen=True)
class Position:
    offset: int  # byte offset into the UTF-8 encoding of the query
    line: int    # 1-based
    column: int  # 1-based

    def __str__(self) -> str:
        return f"line {self.line}, column {self.column} (offset {self.offset})"


@dataclass(frozen=True)
class Diagnostics:
    kind: str  # lex | parse | bind | type
    position: Position
    message: str
    suggestion: Optional[str] = None

    def __str__(self) -> str:
        text = f"{self.kind} error at {self.position}: {self.message}"
        if self.suggestion:
            text += f" ({self.suggestion})"
        return text


class CypherError(Exception):
    """Raised by parse/execute; validate returns the Diagnostics instead."""

    def __init__(self, diagnostics: Diagnostics):
        super().__init__(str(diagnostics))
        self.diagnostics = diagnostics


def _position_at(text: str, index: int) -> Position:
    prefix = text[:index]
    offset = len(prefix.encode("utf-8"))
    line = prefix.count("\n") + 1
    column = index - (prefix.rfind("\n") + 1) + 1
    return Position(offset, line, column)


# ---------------------------------------------------------------------------
# AST

_POS = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Expr:
    pass


@dataclass(frozen=True)
class Literal(Expr):
    value: Union[str, int, float, bool, None]
    pos: Optional[Position] = _POS


@dataclass(frozen=True)
class ListLiteral(Expr):
    items: tuple[Expr, ...]
    pos: Optional[Position] = _POS


@dataclass(frozen=True)
class Var(Expr):
    name: str
    pos: Optional[Position] = _POS


@dataclass(frozen=True)
class Prop(Expr):
    var: str
    key: str
    pos: Optional[Position] = _POS


@dataclass(frozen=True)
class Cmp(Expr):
    op: str  # "=", "IN", "CONTAINS"
    left: Expr
    right: Expr
    pos: Optional[Position] = _POS


@dataclass(frozen=True)
class BoolOp(Expr):
    op: str  # "AND", "OR"
    args: tuple[Expr, ...]
    pos: Optional[Position] = _POS


@dataclass(frozen=True)
class Not(Expr):
    arg: Expr
    pos: Optional[Position] = _POS


@dataclass(frozen=True)
class AnyPred(Expr):
    var: str
    source: Expr
    pred: Expr
    pos: Optional[Position] = _POS


@dataclass(frozen=True)
class Agg(Expr):
    fn: str  # "COLLECT", "COUNT"
    distinct: bool
    arg: Expr
    pos: Optional[Position] = _POS


@dataclass(frozen=True)
class NodeAtom:
    var: Optional[str]
    label: Optional[str]
    pos: Optional[Position] = _POS


@dataclass(frozen=True)
class RelAtom:
    var: Optional[str]
    types: tuple[str, ...]  # empty = any relation
    direction: str  # "out", "in", "both"
    pos: Optional[Position] = _POS


@dataclass(frozen=True)
class PathPattern:
    nodes: tuple[NodeAtom, ...]
    rels: tuple[RelAtom, ...]  # len(nodes) == len(rels) + 1


@dataclass(frozen=True)
class MatchClause:
    pattern: PathPattern
    where: Optional[Expr]
    optional: bool
    pos: Optional[Position] = _POS


@dataclass(frozen=True)
class ProjItem:
    expr: Expr
    alias: Optional[str]
    pos: Optional[Position] = _POS


@dataclass(frozen=True)
class WithClause:
    distinct: bool
    items: tuple[ProjItem, ...]
    pos: Optional[Position] = _POS


@dataclass(frozen=True)
class OrderKey:
    expr: Expr
    descending: bool


@dataclass(frozen=True)
class ReturnClause:
    distinct: bool
    items: tuple[ProjItem, ...]
    order_by: tuple[OrderKey, ...]
    limit: Optional[int]
    pos: Optional[Position] = _POS


@dataclass(frozen=True)
class QueryBranch:
    clauses: tuple[Union[MatchClause, WithClause], ...]
    returns: ReturnClause


@dataclass(frozen=True)
class QueryAst:
    branches: tuple[QueryBranch, ...]  # joined by UNION ALL


# ---------------------------------------------------------------------------
# Lexer

_KEYWORDS = {
    "MATCH", "OPTIONAL", "WHERE", "WITH", "RETURN", "AS", "ORDER", "BY",
    "ASC", "DESC", "LIMIT", "UNION", "ALL", "AND", "OR", "NOT", "IN",
    "CONTAINS", "ANY", "DISTINCT", "COLLECT", "COUNT", "TRUE", "FALSE",
    "NULL",
}

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_NUMBER_RE = re.compile(r"\d+(\.\d+)?")


@dataclass(frozen=True)
class _Token:
    kind: str  # IDENT BACKTICK STRING INT REAL or punctuation kind or EOF
    text: str
    index: int  # character index into the source

    def keyword(self) -> Optional[str]:
        if self.kind == "IDENT":
            upper = self.text.upper()
            if upper in _KEYWORDS:
                return upper
        return None


_PUNCT = [
    ("<-", "ARROW_L"),
    ("->", "ARROW_R"),
    ("(", "LPAREN"),
    (")", "RPAREN"),
    ("[", "LBRACKET"),
    ("]", "RBRACKET"),
    (",", "COMMA"),
    (".", "DOT"),
    ("=", "EQ"),
    ("|", "PIPE"),
    (":", "COLON"),
    (";", "SEMI"),
    ("-", "DASH"),
]


def _lex(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch in " \t\r\n":
            i += 1
            continue
        if text.startswith("//", i):
            end = text.find("\n", i)
            i = n if end < 0 else end + 1
            continue
        if ch == "`":
            end = text.find("`", i + 1)
            if end < 0:
                raise CypherError(Diagnostics(
                    "lex", _position_at(text, i), "unterminated backtick identifier"))
            tokens.append(_Token("BACKTICK", text[i + 1:end], i))
            i = end + 1
            continue
        if ch == "'":
            end = text.find("'", i + 1)
            if end < 0:
                raise CypherError(Diagnostics(
                    "lex", _position_at(text, i), "unterminated string literal"))
            tokens.append(_Token("STRING", text[i + 1:end], i))
            i = end + 1
            continue
        m = _NUMBER_RE.match(text, i)
        if m:
            tokens.append(_Token("REAL" if "." in m.group() else "INT", m.group(), i))
            i = m.end()
            continue
        m = _IDENT_RE.match(text, i)
        if m:
            tokens.append(_Token("IDENT", m.group(), i))
            i = m.end()
            continue
        for lit, kind in _PUNCT:
            if text.startswith(lit, i):
                tokens.append(_Token(kind, lit, i))
                i += len(lit)
                break
        else:
            raise CypherError(Diagnostics(
                "lex", _position_at(text, i), f"unexpected character {ch!r}"))
    tokens.append(_Token("EOF", "", n))
    return tokens


# ---------------------------------------------------------------------------
# Parser (recursive descent)

class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _lex(text)
        self.i = 0

    # -- token plumbing

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def at_keyword(self, *words: str) -> bool:
        return self.peek().keyword() in words

    def take_keyword(self, *words: str) -> bool:
        if self.at_keyword(*words):
            self.advance()
            return True
        return False

    def expect_keyword(self, word: str) -> _Token:
        if not self.at_keyword(word):
            self.fail(f"expected {word}")
        return self.advance()

    def expect(self, kind: str, what: str) -> _Token:
        if self.peek().kind != kind:
            self.fail(f"expected {what}")
        return self.advance()

    def fail(self, message: str, suggestion: Optional[str] = None):
        tok = self.peek()
        shown = tok.text if tok.kind != "EOF" else "end of input"
        raise CypherError(Diagnostics(
            "parse", _position_at(self.text, tok.index),
            f"{message}, found {shown!r}", suggestion))

    def pos(self) -> Position:
        return _position_at(self.text, self.peek().index)

    # -- grammar

    def parse_query(self) -> QueryAst:
        branches = [self.parse_branch()]
        while self.take_keyword("UNION"):
            self.expect_keyword("ALL")
            branches.append(self.parse_branch())
        if self.peek().kind == "SEMI":
            self.advance()
        if self.peek().kind != "EOF":
            self.fail("expected end of query")
        return QueryAst(tuple(branches))

    def parse_branch(self) -> QueryBranch:
        clauses: list[Union[MatchClause, WithClause]] = []
        while True:
            if self.at_keyword("MATCH"):
                clauses.append(self.parse_match(optional=False))
            elif self.at_keyword("OPTIONAL"):
                pos = self.pos()
                self.advance()
                clauses.append(self.parse_match(optional=True, pos=pos))
            elif self.at_keyword("WITH"):
                clauses.append(self.parse_with())
            elif self.at_keyword("RETURN"):
                return QueryBranch(tuple(clauses), self.parse_return())
            else:
                self.fail("expected MATCH, OPTIONAL MATCH, WITH or RETURN")

    def parse_match(self, optional: bool, pos: Optional[Position] = None) -> MatchClause:
        pos = pos or self.pos()
        self.expect_keyword("MATCH")
        pattern = self.parse_pattern()
        where = None
        if self.take_keyword("WHERE"):
            where = self.parse_expr()
        return MatchClause(pattern, where, optional, pos)

    def parse_pattern(self) -> PathPattern:
        nodes = [self.parse_node_atom()]
        rels: list[RelAtom] = []
        while self.peek().kind in ("DASH", "ARROW_L"):
            rels.append(self.parse_rel_atom())
            nodes.append(self.parse_node_atom())
        return PathPattern(tuple(nodes), tuple(rels))

    def parse_node_atom(self) -> NodeAtom:
        pos = self.pos()
        self.expect("LPAREN", "'('")
        var = None
        if self.peek().kind == "IDENT" and not self.peek().keyword():
            var = self.advance().text
        label = None
        if self.peek().kind == "COLON":
            self.advance()
            label = self.parse_name("node label")
        self.expect("RPAREN", "')'")
        return NodeAtom(var, label, pos)

    def parse_rel_atom(self) -> RelAtom:
        pos = self.pos()
        if self.peek().kind == "ARROW_L":
            self.advance()
            var, types = self.parse_rel_body()
            self.expect("DASH", "'-'")
            return RelAtom(var, types, "in", pos)
        self.expect("DASH", "'-'")
        var, types = self.parse_rel_body()
        if self.peek().kind == "ARROW_R":
            self.advance()
            return RelAtom(var, types, "out", pos)
        self.expect("DASH", "'-' or '->'")
        return RelAtom(var, types, "both", pos)

    def parse_rel_body(self) -> tuple[Optional[str], tuple[str, ...]]:
        self.expect("LBRACKET", "'['")
        var = None
        if self.peek().kind == "IDENT" and not self.peek().keyword():
            var = self.advance().text
        types: list[str] = []
        if self.peek().kind == "COLON":
            self.advance()
            types.append(self.parse_name("relationship type"))
            while self.peek().kind == "PIPE":
                self.advance()
                types.append(self.parse_name("relationship type"))
        if var is None and not types:
            self.fail("expected relationship variable or ':type'")
        self.expect("RBRACKET", "']'")
        return var, tuple(types)

    def parse_name(self, what: str) -> str:
        tok = self.peek()
        if tok.kind == "BACKTICK":
            return self.advance().text
        if tok.kind == "IDENT" and not tok.keyword():
            return self.advance().text
        self.fail(f"expected {what}")

    def parse_with(self) -> WithClause:
        pos = self.pos()
        self.expect_keyword("WITH")
        distinct = self.take_keyword("DISTINCT")
        items = self.parse_items()
        return WithClause(distinct, items, pos)

    def parse_return(self) -> ReturnClause:
        pos = self.pos()
        self.expect_keyword("RETURN")
        distinct = self.take_keyword("DISTINCT")
        items = self.parse_items()
        order_by: list[OrderKey] = []
        if self.take_keyword("ORDER"):
            self.expect_keyword("BY")
            while True:
                expr = self.parse_expr()
                descending = False
                if self.take_keyword("DESC"):
                    descending = True
                else:
                    self.take_keyword("ASC")
                order_by.append(OrderKey(expr, descending))
                if self.peek().kind != "COMMA":
                    break
                self.advance()
        limit = None
        if self.take_keyword("LIMIT"):
            tok = self.expect("INT", "integer LIMIT value")
            limit = int(tok.text)
        return ReturnClause(distinct, items, tuple(order_by), limit, pos)

    def parse_items(self) -> tuple[ProjItem, ...]:
        items = [self.parse_item()]
        while self.peek().kind == "COMMA":
            self.advance()
            items.append(self.parse_item())
        return tuple(items)

    def parse_item(self) -> ProjItem:
        pos = self.pos()
        expr = self.parse_expr()
        alias = None
        if self.take_keyword("AS"):
            alias = self.parse_name("alias")
        return ProjItem(expr, alias, pos)

    # precedence: OR < AND < NOT < comparison < primary
    def parse_expr(self) -> Expr:
        pos = self.pos()
        args = [self.parse_and()]
        while self.take_keyword("OR"):
            args.append(self.parse_and())
        return args[0] if len(args) == 1 else BoolOp("OR", tuple(args), pos)

    def parse_and(self) -> Expr:
        pos = self.pos()
        args = [self.parse_not()]
        while self.take_keyword("AND"):
            args.append(self.parse_not())
        return args[0] if len(args) == 1 else BoolOp("AND", tuple(args), pos)

    def parse_not(self) -> Expr:
        pos = self.pos()
        if self.take_keyword("NOT"):
            return Not(self.parse_not(), pos)
        return self.parse_comparison()

    def parse_comparison(self) -> Expr:
        left = self.parse_primary()
        tok = self.peek()
        op = None
        if tok.kind == "EQ":
            op = "="
        elif tok.keyword() in ("IN", "CONTAINS"):
            op = tok.keyword()
        if op is None:
            return left
        pos = self.pos()
        self.advance()
        right = self.parse_primary()
        return Cmp(op, left, right, pos)

    def parse_primary(self) -> Expr:
        tok = self.peek()
        pos = self.pos()
        if tok.kind == "LPAREN":
            self.advance()
            inner = self.parse_expr()
            self.expect("RPAREN", "')'")
            return inner
        if tok.kind == "LBRACKET":
            self.advance()
            items: list[Expr] = []
            if self.peek().kind != "RBRACKET":
                items.append(self.parse_expr())
                while self.peek().kind == "COMMA":
                    self.advance()
                    items.append(self.parse_expr())
            self.expect("RBRACKET", "']'")
            return ListLiteral(tuple(items), pos)
        if tok.kind == "STRING":
            return Literal(self.advance().text, pos)
        if tok.kind == "INT":
            return Literal(int(self.advance().text), pos)
        if tok.kind == "REAL":
            return Literal(float(self.advance().text), pos)
        kw = tok.keyword()
        if kw == "TRUE":
            self.advance()
            return Literal(True, pos)
        if kw == "FALSE":
            self.advance()
            return Literal(False, pos)
        if kw == "NULL":
            self.advance()
            return Literal(None, pos)
        if kw == "ANY":
            self.advance()
            self.expect("LPAREN", "'('")
            var = self.parse_name("iteration variable")
            self.expect_keyword("IN")
            source = self.parse_expr()
            self.expect_keyword("WHERE")
            pred = self.parse_expr()
            self.expect("RPAREN", "')'")
            return AnyPred(var, source, pred, pos)
        if kw in ("COLLECT", "COUNT"):
            self.advance()
            self.expect("LPAREN", "'('")
            distinct = self.take_keyword("DISTINCT")
            arg = self.parse_expr()
            self.expect("RPAREN", "')'")
            return Agg(kw, distinct, arg, pos)
        if tok.kind == "IDENT" and kw is None:
            name = self.advance().text
            if self.peek().kind == "DOT":
                self.advance()
                key = self.parse_name("property name")
                return Prop(name, key, pos)
            return Var(name, pos)
        self.fail("expected an expression")


def parse(query_text: str) -> QueryAst:
    """Parse the query text, raising CypherError with Diagnostics on failure."""
    return _Parser(query_text).parse_query()


# ---------------------------------------------------------------------------
# Pretty printer: parse(pretty_print(ast)) reproduces the ast

_PLAIN_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


def _print_name(name: str) -> str:
    if _PLAIN_NAME_RE.match(name) and name.upper() not in _KEYWORDS:
        return name
    return f"`{name}`"


def _print_expr(expr: Expr) -> str:
    if isinstance(expr, Literal):
        if expr.value is None:
            return "NULL"
        if expr.value is True:
            return "TRUE"
        if expr.value is False:
            return "FALSE"
        if isinstance(expr.value, str):
            return f"'{expr.value}'"
        return repr(expr.value)
    if isinstance(expr, ListLiteral):
        return "[" + ", ".join(_print_expr(x) for x in expr.items) + "]"
    if isinstance(expr, Var):
        return _print_name(expr.name)
    if isinstance(expr, Prop):
        return f"{_print_name(expr.var)}.{_print_name(expr.key)}"
    if isinstance(expr, Cmp):
        sep = " = " if expr.op == "=" else f" {expr.op} "
        return _print_expr(expr.left) + sep + _print_expr(expr.right)
    if isinstance(expr, BoolOp):
        parts = []
        for arg in expr.args:
            text = _print_expr(arg)
            if isinstance(arg, BoolOp):
                text = f"({text})"
            parts.append(text)
        return f" {expr.op} ".join(parts)
    if isinstance(expr, Not):
        inner = _print_expr(expr.arg)
        if isinstance(expr.arg, BoolOp):
            inner = f"({inner})"
        return f"NOT {inner}"
    if isinstance(expr, AnyPred):
        return (f"ANY({_print_name(expr.var)} IN {_print_expr(expr.source)}"
                f" WHERE {_print_expr(expr.pred)})")
    if isinstance(expr, Agg):
        prefix = "DISTINCT " if expr.distinct else ""
        return f"{expr.fn}({prefix}{_print_expr(expr.arg)})"
    raise TypeError(f"unprintable expression {expr!r}")


def _print_items(items: Iterable[ProjItem]) -> str:
    rendered = []
    for item in items:
        text = _print_expr(item.expr)
        if item.alias is not None:
            text += f" AS {_print_name(item.alias)}"
        rendered.append(text)
    return ", ".join(rendered)


def _print_pattern(pattern: PathPattern) -> str:
    def node(atom: NodeAtom) -> str:
        inner = atom.var or ""
        if atom.label is not None:
            inner += f":{_print_name(atom.label)}"
        return f"({inner})"

    out = [node(pattern.nodes[0])]
    for rel, nxt in zip(pattern.rels, pattern.nodes[1:]):
        body = rel.var or ""
        if rel.types:
            body += ":" + "|".join(_print_name(t) for t in rel.types)
        bracket = f"[{body}]"
        if rel.direction == "out":
            out.append(f"-{bracket}->")
        elif rel.direction == "in":
            out.append(f"<-{bracket}-")
        else:
            out.append(f"-{bracket}-")
        out.append(node(nxt))
    return "".join(out)


def pretty_print(ast: QueryAst) -> str:
    branches = []
    for branch in ast.branches:
        lines = []
        for clause in branch.clauses:
            if isinstance(clause, MatchClause):
                kw = "OPTIONAL MATCH" if clause.optional else "MATCH"
                line = f"{kw} {_print_pattern(clause.pattern)}"
                if clause.where is not None:
                    line += f" WHERE {_print_expr(clause.where)}"
            else:
                line = "WITH "
                if clause.distinct:
                    line += "DISTINCT "
                line += _print_items(clause.items)
            lines.append(line)
        ret = branch.returns
        line = "RETURN "
        if ret.distinct:
            line += "DISTINCT "
        line += _print_items(ret.items)
        if ret.order_by:
            keys = ", ".join(
                _print_expr(k.expr) + (" DESC" if k.descending else "")
                for k in ret.order_by)
            line += f" ORDER BY {keys}"
        if ret.limit is not None:
            line += f" LIMIT {ret.limit}"
        lines.append(line)
        branches.append("\n".join(lines))
    return "\nUNION ALL\n".join(branches)


# ---------------------------------------------------------------------------
# Validation

def _item_name(item: ProjItem) -> str:
    return item.alias if item.alias is not None else _print_expr(item.expr)


def _walk(expr: Expr) -> Iterator[Expr]:
    yield expr
    if isinstance(expr, ListLiteral):
        for sub in expr.items:
            yield from _walk(sub)
    elif isinstance(expr, Cmp):
        yield from _walk(expr.left)
        yield from _walk(expr.right)
    elif isinstance(expr, BoolOp):
        for sub in expr.args:
            yield from _walk(sub)
    elif isinstance(expr, Not):
        yield from _walk(expr.arg)
    elif isinstance(expr, AnyPred):
        yield from _walk(expr.source)
        yield from _walk(expr.pred)
    elif isinstance(expr, Agg):
        yield from _walk(expr.arg)


class _ValidationError(Exception):
    def __init__(self, diagnostics: Diagnostics):
        self.diagnostics = diagnostics


def _check_expr(expr: Expr, scope: set[str], allow_agg: bool, text: str) -> None:
    def bind_fail(node, name):
        raise _ValidationError(Diagnostics(
            "bind", node.pos or _position_at(text, 0),
            f"variable {name!r} is not bound",
            "bind it in a preceding MATCH or WITH"))

    if isinstance(expr, Var):
        if expr.name not in scope:
            bind_fail(expr, expr.name)
    elif isinstance(expr, Prop):
        if expr.var not in scope:
            bind_fail(expr, expr.var)
        if expr.key != "name":
            raise _ValidationError(Diagnostics(
                "type", expr.pos or _position_at(text, 0),
                f"unknown property {expr.key!r}",
                "only .name is available"))
    elif isinstance(expr, (Literal,)):
        pass
    elif isinstance(expr, ListLiteral):
        for sub in expr.items:
            _check_expr(sub, scope, False, text)
    elif isinstance(expr, Cmp):
        _check_expr(expr.left, scope, False, text)
        _check_expr(expr.right, scope, False, text)
    elif isinstance(expr, BoolOp):
        for sub in expr.args:
            _check_expr(sub, scope, False, text)
    elif isinstance(expr, Not):
        _check_expr(expr.arg, scope, False, text)
    elif isinstance(expr, AnyPred):
        _check_expr(expr.source, scope, False, text)
        _check_expr(expr.pred, scope | {expr.var}, False, text)
    elif isinstance(expr, Agg):
        if not allow_agg:
            raise _ValidationError(Diagnostics(
                "type", expr.pos or _position_at(text, 0),
                "aggregation is only allowed as a whole projection item",
                "move the aggregate to WITH/RETURN or unnest it"))
        for sub in _walk(expr.arg):
            if isinstance(sub, Agg):
                raise _ValidationError(Diagnostics(
                    "type", sub.pos or _position_at(text, 0),
                    "nested aggregation"))
        _check_expr(expr.arg, scope, False, text)


def _check_items(items: tuple[ProjItem, ...], scope: set[str], text: str) -> set[str]:
    for item in items:
        if isinstance(item.expr, Agg):
            _check_expr(item.expr, scope, True, text)
        else:
            # bare expressions become grouping keys; hidden aggregates inside
            # them would silently change the grouping, so reject them
            for sub in _walk(item.expr):
                if isinstance(sub, Agg):
                    raise _ValidationError(Diagnostics(
                        "type", sub.pos or _position_at(text, 0),
                        "aggregation mixed into a non-grouped expression",
                        "write the aggregate as its own projection item"))
            _check_expr(item.expr, scope, False, text)
    return {_item_name(item) for item in items}


def _check_branch(branch: QueryBranch, text: str) -> list[str]:
    scope: set[str] = set()
    for clause in branch.clauses:
        if isinstance(clause, MatchClause):
            for atom in clause.pattern.nodes:
                if atom.var is not None:
                    scope.add(atom.var)
            for rel in clause.pattern.rels:
                if rel.var is not None:
                    scope.add(rel.var)
            if clause.where is not None:
                _check_expr(clause.where, scope, False, text)
        else:
            scope = _check_items(clause.items, scope, text)
    ret = branch.returns
    columns = [_item_name(item) for item in ret.items]
    _check_items(ret.items, scope, text)
    for key in ret.order_by:
        for sub in _walk(key.expr):
            if isinstance(sub, Agg):
                raise _ValidationError(Diagnostics(
                    "type", sub.pos or _position_at(text, 0),
                    "aggregation in ORDER BY",
                    "alias the aggregate in RETURN and sort by the alias"))
        _check_expr(key.expr, set(columns), False, text)
    return columns


def validate(query_text: str) -> Optional[Diagnostics]:
    """Parse and bind-check without executing. None means the query is ok."""
    try:
        ast = parse(query_text)
    except CypherError as exc:
        return exc.diagnostics
    try:
        first_columns = None
        for branch in ast.branches:
            columns = _check_branch(branch, query_text)
            if first_columns is None:
                first_columns = columns
            elif columns != first_columns:
                return Diagnostics(
                    "type", branch.returns.pos or _position_at(query_text, 0),
                    f"UNION ALL column names differ: {first_columns} vs {columns}",
                    "rename with AS so all branches agree")
    except _ValidationError as exc:
        return exc.diagnostics
    return None


# ---------------------------------------------------------------------------
# Execution

@dataclass
class ResultTable:
    columns: list[str]
    rows: list[tuple]
    type_mismatch_warnings: int = 0

    def to_tsv(self) -> str:
        lines = ["\t".join(self.columns)]
        for row in self.rows:
            lines.append("\t".join(_render_value(v) for v in row))
        return "\n".join(lines) + "\n"


def _render_value(value, nested: bool = False) -> str:
    if value is None:
        return "null"
    if value is True:
        return "true"
    if value is False:
        return "false"
    if isinstance(value, str):
        return f"'{value}'" if nested else value
    if isinstance(value, list):
        return "[" + ", ".join(_render_value(v, nested=True) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class _TypeMismatch(Exception):
    pass


def _as_value(binding):
    # node and relationship bindings surface as strings in value position
    if isinstance(binding, NodeId):
        return str(binding)
    if isinstance(binding, Edge):
        return f"{binding.head}-[{binding.relation}]->{binding.tail}"
    return binding


def _kind(value) -> int:
    if isinstance(value, bool):
        return 0
    if isinstance(value, (int, float)):
        return 0
    if isinstance(value, str):
        return 1
    if isinstance(value, list):
        return 2
    return 3  # null sorts last


def _value_cmp(a, b) -> int:
    ka, kb = _kind(a), _kind(b)
    if ka != kb:
        return -1 if ka < kb else 1
    if ka == 3:
        return 0
    if ka == 0:
        fa, fb = float(a), float(b)
        return (fa > fb) - (fa < fb)
    if ka == 1:
        return (a > b) - (a < b)
    for xa, xb in zip(a, b):
        c = _value_cmp(xa, xb)
        if c:
            return c
    return (len(a) > len(b)) - (len(a) < len(b))


def _canonical(value):
    if isinstance(value, list):
        return tuple(_canonical(v) for v in value)
    return value


class _Executor:
    def __init__(self, graph: KnowledgeGraph):
        self.graph = graph
        self.warnings = 0

    # -- expression evaluation over one row environment

    def eval(self, expr: Expr, env: dict):
        if isinstance(expr, Literal):
            return expr.value
        if isinstance(expr, ListLiteral):
            return [self.eval(x, env) for x in expr.items]
        if isinstance(expr, Var):
            return _as_value(env[expr.name])
        if isinstance(expr, Prop):
            binding = env[expr.var]
            if binding is None:
                return None
            if isinstance(binding, NodeId):
                return str(binding) if expr.key == "name" else None
            if isinstance(binding, Edge):
                return binding.relation if expr.key == "name" else None
            raise _TypeMismatch
        if isinstance(expr, Cmp):
            return self.eval_cmp(expr, env)
        if isinstance(expr, BoolOp):
            values = [self.eval_bool(a, env) for a in expr.args]
            return all(values) if expr.op == "AND" else any(values)
        if isinstance(expr, Not):
            return not self.eval_bool(expr.arg, env)
        if isinstance(expr, AnyPred):
            source = self.eval(expr.source, env)
            if source is None:
                return False
            if not isinstance(source, list):
                raise _TypeMismatch
            inner = dict(env)
            for element in source:
                inner[expr.var] = element
                if self.eval_bool(expr.pred, inner):
                    return True
            return False
        raise _TypeMismatch  # bare Agg outside projection; validator rejects

    def eval_bool(self, expr: Expr, env: dict) -> bool:
        value = self.eval(expr, env)
        if isinstance(value, bool):
            return value
        if value is None:
            return False
        raise _TypeMismatch

    def eval_cmp(self, expr: Cmp, env: dict) -> bool:
        left = self.eval(expr.left, env)
        right = self.eval(expr.right, env)
        if expr.op == "IN":
            if right is None:
                return False
            if not isinstance(right, list):
                raise _TypeMismatch
            if left is None:
                return False
            return any(
                _kind(left) == _kind(item) and _value_cmp(left, item) == 0
                for item in right)
        if left is None or right is None:
            return False
        if expr.op == "CONTAINS":
            if not (isinstance(left, str) and isinstance(right, str)):
                raise _TypeMismatch
            return right in left
        if _kind(left) != _kind(right):
            raise _TypeMismatch
        return _value_cmp(left, right) == 0

    def passes(self, where: Optional[Expr], env: dict) -> bool:
        if where is None:
            return True
        try:
            return self.eval_bool(where, env)
        except _TypeMismatch:
            self.warnings += 1
            return False

    # -- pattern matching

    def node_candidates(self, atom: NodeAtom, env: dict) -> list[NodeId]:
        if atom.var is not None and atom.var in env:
            bound = env[atom.var]
            if not isinstance(bound, NodeId):
                return []
            if atom.label is not None and bound.namespace != atom.label:
                return []
            return [bound]
        if atom.label is not None:
            return self.graph.nodes_in_namespace(atom.label)
        return self.graph.sorted_nodes()

    def match_pattern(self, pattern: PathPattern, env: dict) -> Iterator[dict]:
        def extend(index: int, current: NodeId, bindings: dict,
                   used: frozenset) -> Iterator[dict]:
            if index == len(pattern.rels):
                yield bindings
                return
            rel = pattern.rels[index]
            nxt = pattern.nodes[index + 1]
            for edge in sorted(self.graph.incident_edges(current),
                               key=lambda e: e.key()):
                if rel.types and edge.relation not in rel.types:
                    continue
                if edge.key() in used:
                    continue
                if rel.direction == "out" and edge.head != current:
                    continue
                if rel.direction == "in" and edge.tail != current:
                    continue
                other = edge.tail if edge.head == current else edge.head
                if nxt.label is not None and other.namespace != nxt.label:
                    continue
                new = dict(bindings)
                if rel.var is not None:
                    prior = new.get(rel.var)
                    if prior is not None and prior != edge:
                        continue
                    new[rel.var] = edge
                if nxt.var is not None:
                    prior = new.get(nxt.var)
                    if prior is not None and prior != other:
                        continue
                    if prior is None and nxt.var in env and env[nxt.var] != other:
                        continue
                    new[nxt.var] = other
                yield from extend(index + 1, other, new, used | {edge.key()})

        first = pattern.nodes[0]
        for start in self.node_candidates(first, env):
            bindings: dict = {}
            if first.var is not None:
                bindings[first.var] = start
            yield from extend(0, start, bindings, frozenset())

    def apply_match(self, clause: MatchClause, rows: list[dict]) -> list[dict]:
        out: list[dict] = []
        new_vars = [a.var for a in clause.pattern.nodes if a.var is not None]
        new_vars += [r.var for r in clause.pattern.rels if r.var is not None]
        for env in rows:
            matched = False
            for bindings in self.match_pattern(clause.pattern, env):
                merged = dict(env)
                merged.update(bindings)
                if self.passes(clause.where, merged):
                    out.append(merged)
                    matched = True
            if clause.optional and not matched:
                merged = dict(env)
                for name in new_vars:
                    if name not in env:
                        merged[name] = None
                out.append(merged)
        return out

    # -- projection with implicit grouping

    def project(self, items: tuple[ProjItem, ...], distinct: bool,
                rows: list[dict]) -> list[dict]:
        names = [_item_name(item) for item in items]
        group_idx = [i for i, item in enumerate(items)
                     if not isinstance(item.expr, Agg)]
        agg_idx = [i for i, item in enumerate(items)
                   if isinstance(item.expr, Agg)]

        def eval_item(item: ProjItem, env: dict):
            # a bare variable keeps its node/edge binding so later MATCH
            # clauses can continue the pattern from it
            if isinstance(item.expr, Var):
                return env[item.expr.name]
            try:
                return self.eval(item.expr, env)
            except _TypeMismatch:
                self.warnings += 1
                return None

        if not agg_idx:
            projected = [
                {name: eval_item(item, env) for name, item in zip(names, items)}
                for env in rows
            ]
        else:
            groups: dict[tuple, dict] = {}
            for env in rows:
                key_values = [eval_item(items[i], env) for i in group_idx]
                key = tuple(_canonical(v) for v in key_values)
                bucket = groups.setdefault(key, {"keys": key_values, "rows": []})
                bucket["rows"].append(env)
            if not groups and not group_idx:
                groups[()] = {"keys": [], "rows": []}
            projected = []
            for bucket in groups.values():
                row = dict(zip((names[i] for i in group_idx), bucket["keys"]))
                for i in agg_idx:
                    row[names[i]] = self.aggregate(items[i].expr, bucket["rows"])
                projected.append({name: row[name] for name in names})
        if distinct:
            seen = set()
            unique = []
            for row in projected:
                key = tuple(_canonical(row[name]) for name in names)
                if key not in seen:
                    seen.add(key)
                    unique.append(row)
            projected = unique
        return projected

    def aggregate(self, agg: Agg, rows: list[dict]):
        values = []
        for env in rows:
            try:
                value = self.eval(agg.arg, env)
            except _TypeMismatch:
                self.warnings += 1
                value = None
            if value is not None:
                values.append(value)
        if agg.distinct:
            seen = set()
            unique = []
            for value in values:
                key = _canonical(value)
                if key not in seen:
                    seen.add(key)
                    unique.append(value)
            values = sorted(unique, key=functools.cmp_to_key(_value_cmp))
        if agg.fn == "COUNT":
            return len(values)
        return values

    # -- branch driver

    def run_branch(self, branch: QueryBranch) -> list[dict]:
        rows: list[dict] = [{}]
        for clause in branch.clauses:
            if isinstance(clause, MatchClause):
                rows = self.apply_match(clause, rows)
            else:
                rows = self.project(clause.items, clause.distinct, rows)
        ret = branch.returns
        rows = self.project(ret.items, ret.distinct, rows)
        names = [_item_name(item) for item in ret.items]
        if ret.order_by:
            rows = self.order_rows(rows, names, ret.order_by)
        if ret.limit is not None:
            rows = rows[:ret.limit]
        return rows

    def order_rows(self, rows: list[dict], names: list[str],
                   keys: tuple[OrderKey, ...]) -> list[dict]:
        decorated = []
        for index, row in enumerate(rows):
            key_values = []
            for key in keys:
                try:
                    key_values.append(self.eval(key.expr, row))
                except _TypeMismatch:
                    self.warnings += 1
                    key_values.append(None)
            full_row = [_as_value(row[n]) for n in names]
            decorated.append((key_values, full_row, index, row))

        def compare(a, b):
            for key, va, vb in zip(keys, a[0], b[0]):
                c = _value_cmp(va, vb)
                if c:
                    return -c if key.descending else c
            for va, vb in zip(a[1], b[1]):
                c = _value_cmp(va, vb)
                if c:
                    return c
            return a[2] - b[2]

        decorated.sort(key=functools.cmp_to_key(compare))
        return [d[3] for d in decorated]


def execute(ast: QueryAst, graph: KnowledgeGraph) -> ResultTable:
    """Evaluate a validated query. Read-only: the graph is never mutated."""
    executor = _Executor(graph)
    first_names: Optional[list[str]] = None
    all_rows: list[tuple] = []
    for branch in ast.branches:
        names = [_item_name(item) for item in branch.returns.items]
        if first_names is None:
            first_names = names
        elif names != first_names:
            raise CypherError(Diagnostics(
                "type", branch.returns.pos or Position(0, 1, 1),
                f"UNION ALL column names differ: {first_names} vs {names}"))
        rows = executor.run_branch(branch)
        all_rows.extend(
            tuple(_as_value(row[name]) for name in names) for row in rows)
    return ResultTable(first_names or [], all_rows, executor.warnings)


def run_query(query_text: str, graph: KnowledgeGraph) -> ResultTable:
    """parse + validate + execute; raises CypherError carrying Diagnostics."""
    problem = validate(query_text)
    if problem is not None:
        raise CypherError(problem)
    return execute(parse(query_text), graph)
