"""MiniSpec: a tiny ML-flavored verified language checked fully in-process.

It deliberately mirrors the val/let/match surface of proof-oriented
languages so that mutation and repair flows exercise realistic failure
modes (holes, dropped branches, unbound names) without any external
toolchain. Verification is total and deterministic: every program either
passes or fails with one of the fixed diagnostic phrasings

    "syntax error", "identifier not found", "type mismatch",
    "hole in term", "match not exhaustive"

which the default error taxonomy matches verbatim.

Grammar (types are monomorphic, checked against the preceding ``val``)::

    program := decl+
    decl    := "val" ident ":" type | "let" ident param* "=" expr | "open" ident
    type    := "int" | "bool" | type "->" type | "(" type ")"
    expr    := ident | int | "true" | "false" | "_"
             | expr binop expr | expr atom*            (application)
             | "if" expr "then" expr "else" expr
             | "let" ident "=" expr "in" expr
             | "match" expr "with" ("|" pattern "->" expr)+
             | "(" expr ")"
    binop   := "+" | "-" | "*" | "=" | "<"
    pattern := int | "true" | "false" | ident | "_"

``//`` line comments are skipped. A bare ``_`` in expression position is
never well-typed ("hole in term"); a ``match`` must cover both boolean
cases or include a catch-all pattern.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field


class MiniSpecError(Exception):
    """A diagnostic from lexing, parsing, or checking; str() is the log line."""


KEYWORDS = frozenset(
    ["val", "let", "open", "in", "if", "then", "else", "match", "with",
     "true", "false", "int", "bool"]
)

_TOKEN_RE = re.compile(
    r"""
      (?P<ws>[ \t\r]+)
    | (?P<comment>//[^\n]*)
    | (?P<nl>\n)
    | (?P<arrow>->)
    | (?P<hole>_(?![A-Za-z0-9_'.]))
    | (?P<word>[A-Za-z_][A-Za-z0-9_']*(?:\.[A-Za-z_][A-Za-z0-9_']*)*)
    | (?P<int>[0-9]+)
    | (?P<sym>[:=+\-*<()|])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # word | int | hole | arrow | one of ":=+-*<()|" | eof
    text: str
    line: int
    col: int
    pos: int
    end: int


def lex(source: str) -> list[Token]:
    """Tokenize; raises MiniSpecError("syntax error: ...") on a bad character."""
    tokens: list[Token] = []
    pos = 0
    line = 1
    line_start = 0
    n = len(source)
    while pos < n:
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            col = pos - line_start + 1
            raise MiniSpecError(
                f"syntax error: unexpected character {source[pos]!r} "
                f"(line {line}, column {col})"
            )
        kind = m.lastgroup
        text = m.group()
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            col = pos - line_start + 1
            if kind == "sym":
                kind = text
            tokens.append(Token(kind, text, line, col, pos, m.end()))
        pos = m.end()
    tokens.append(Token("eof", "", line, n - line_start + 1, n, n))
    return tokens


# Parse tree (internal to the checker; the mutation engine builds its own).

@dataclass(frozen=True)
class Type:
    pass


@dataclass(frozen=True)
class TBase(Type):
    name: str  # "int" | "bool"


@dataclass(frozen=True)
class TArrow(Type):
    arg: Type
    res: Type


T_INT = TBase("int")
T_BOOL = TBase("bool")


def type_str(ty: Type) -> str:
    if isinstance(ty, TBase):
        return ty.name
    assert isinstance(ty, TArrow)
    left = type_str(ty.arg)
    if isinstance(ty.arg, TArrow):
        left = f"({left})"
    return f"{left} -> {type_str(ty.res)}"


@dataclass(frozen=True)
class Expr:
    line: int


@dataclass(frozen=True)
class EIdent(Expr):
    name: str


@dataclass(frozen=True)
class EInt(Expr):
    value: int


@dataclass(frozen=True)
class EBool(Expr):
    value: bool


@dataclass(frozen=True)
class EHole(Expr):
    pass


@dataclass(frozen=True)
class EBin(Expr):
    op: str
    lhs: Expr
    rhs: Expr


@dataclass(frozen=True)
class EApp(Expr):
    fn: Expr
    args: tuple[Expr, ...]


@dataclass(frozen=True)
class EIf(Expr):
    cond: Expr
    then: Expr
    other: Expr


@dataclass(frozen=True)
class ELetIn(Expr):
    name: str
    bound: Expr
    body: Expr


@dataclass(frozen=True)
class Pattern:
    line: int


@dataclass(frozen=True)
class PInt(Pattern):
    value: int


@dataclass(frozen=True)
class PBool(Pattern):
    value: bool


@dataclass(frozen=True)
class PVar(Pattern):
    name: str


@dataclass(frozen=True)
class PWild(Pattern):
    pass


@dataclass(frozen=True)
class EMatch(Expr):
    scrutinee: Expr
    branches: tuple[tuple[Pattern, Expr], ...]


@dataclass(frozen=True)
class Decl:
    line: int


@dataclass(frozen=True)
class DVal(Decl):
    name: str
    ty: Type


@dataclass(frozen=True)
class DLet(Decl):
    name: str
    params: tuple[str, ...]
    body: Expr


@dataclass(frozen=True)
class DOpen(Decl):
    name: str


@dataclass
class _Parser:
    tokens: list[Token]
    i: int = 0

    def peek(self) -> Token:
        return self.tokens[self.i]

    def advance(self) -> Token:
        tok = self.tokens[self.i]
        if tok.kind != "eof":
            self.i += 1
        return tok

    def fail(self, expected: str) -> MiniSpecError:
        tok = self.peek()
        found = "end of input" if tok.kind == "eof" else repr(tok.text)
        return MiniSpecError(
            f"syntax error: unexpected {found} "
            f"(line {tok.line}, column {tok.col}); expected {expected}"
        )

    def expect_sym(self, sym: str, expected: str | None = None) -> Token:
        if self.peek().kind != sym:
            raise self.fail(expected or f"'{sym}'")
        return self.advance()

    def expect_keyword(self, word: str) -> Token:
        tok = self.peek()
        if tok.kind != "word" or tok.text != word:
            raise self.fail(f"'{word}'")
        return self.advance()

    def expect_name(self, what: str) -> Token:
        tok = self.peek()
        if tok.kind != "word" or tok.text in KEYWORDS:
            raise self.fail(what)
        return self.advance()

    # Declarations

    def parse_program(self) -> list[Decl]:
        decls: list[Decl] = []
        while self.peek().kind != "eof":
            decls.append(self.parse_decl())
        if not decls:
            raise self.fail("a declaration ('val', 'let', or 'open')")
        return decls

    def parse_decl(self) -> Decl:
        tok = self.peek()
        if tok.kind == "word" and tok.text == "val":
            self.advance()
            name = self.expect_name("a value name")
            self.expect_sym(":")
            ty = self.parse_type()
            return DVal(tok.line, name.text, ty)
        if tok.kind == "word" and tok.text == "let":
            self.advance()
            name = self.expect_name("a definition name")
            params: list[str] = []
            while self.peek().kind == "word" and self.peek().text not in KEYWORDS:
                params.append(self.advance().text)
            self.expect_sym("=", "'=' after the definition head")
            body = self.parse_expr()
            return DLet(tok.line, name.text, tuple(params), body)
        if tok.kind == "word" and tok.text == "open":
            self.advance()
            name = self.expect_name("a module name")
            return DOpen(tok.line, name.text)
        raise self.fail("a declaration ('val', 'let', or 'open')")

    def parse_type(self) -> Type:
        left = self.parse_type_atom()
        if self.peek().kind == "arrow":
            self.advance()
            return TArrow(left, self.parse_type())
        return left

    def parse_type_atom(self) -> Type:
        tok = self.peek()
        if tok.kind == "word" and tok.text == "int":
            self.advance()
            return T_INT
        if tok.kind == "word" and tok.text == "bool":
            self.advance()
            return T_BOOL
        if tok.kind == "(":
            self.advance()
            ty = self.parse_type()
            self.expect_sym(")")
            return ty
        raise self.fail("a type ('int', 'bool', or '(')")

    # Expressions; precedence: comparisons < additive < multiplicative < application.

    def parse_expr(self) -> Expr:
        return self.parse_cmp()

    def parse_cmp(self) -> Expr:
        left = self.parse_add()
        while self.peek().kind in ("=", "<"):
            op = self.advance()
            right = self.parse_add()
            left = EBin(op.line, op.text, left, right)
        return left

    def parse_add(self) -> Expr:
        left = self.parse_mul()
        while self.peek().kind in ("+", "-"):
            op = self.advance()
            right = self.parse_mul()
            left = EBin(op.line, op.text, left, right)
        return left

    def parse_mul(self) -> Expr:
        left = self.parse_app()
        while self.peek().kind == "*":
            op = self.advance()
            right = self.parse_app()
            left = EBin(op.line, op.text, left, right)
        return left

    def parse_app(self) -> Expr:
        head = self.parse_atom()
        args: list[Expr] = []
        # Only simple atoms may be arguments; 'if'/'let'/'match' never start
        # a trailing argument, so a following top-level 'let' is not consumed.
        while self._starts_simple_atom():
            args.append(self.parse_atom())
        if args:
            return EApp(head.line, head, tuple(args))
        return head

    def _starts_simple_atom(self) -> bool:
        tok = self.peek()
        if tok.kind in ("int", "hole", "("):
            return True
        if tok.kind == "word":
            return tok.text in ("true", "false") or tok.text not in KEYWORDS
        return False

    def parse_atom(self) -> Expr:
        tok = self.peek()
        if tok.kind == "int":
            self.advance()
            return EInt(tok.line, int(tok.text))
        if tok.kind == "hole":
            self.advance()
            return EHole(tok.line)
        if tok.kind == "(":
            self.advance()
            inner = self.parse_expr()
            self.expect_sym(")")
            return inner
        if tok.kind == "word":
            if tok.text == "true":
                self.advance()
                return EBool(tok.line, True)
            if tok.text == "false":
                self.advance()
                return EBool(tok.line, False)
            if tok.text == "if":
                self.advance()
                cond = self.parse_expr()
                self.expect_keyword("then")
                then = self.parse_expr()
                self.expect_keyword("else")
                other = self.parse_expr()
                return EIf(tok.line, cond, then, other)
            if tok.text == "let":
                self.advance()
                name = self.expect_name("a binder name")
                self.expect_sym("=", "'=' after the binder")
                bound = self.parse_expr()
                self.expect_keyword("in")
                body = self.parse_expr()
                return ELetIn(tok.line, name.text, bound, body)
            if tok.text == "match":
                self.advance()
                scrutinee = self.parse_expr()
                self.expect_keyword("with")
                branches: list[tuple[Pattern, Expr]] = []
                while self.peek().kind == "|":
                    self.advance()
                    pat = self.parse_pattern()
                    if self.peek().kind != "arrow":
                        raise self.fail("'->' after the pattern")
                    self.advance()
                    branches.append((pat, self.parse_expr()))
                if not branches:
                    raise self.fail("'|' introducing a match branch")
                return EMatch(tok.line, scrutinee, tuple(branches))
            if tok.text not in KEYWORDS:
                self.advance()
                return EIdent(tok.line, tok.text)
        raise self.fail("an expression")

    def parse_pattern(self) -> Pattern:
        tok = self.peek()
        if tok.kind == "int":
            self.advance()
            return PInt(tok.line, int(tok.text))
        if tok.kind == "hole":
            self.advance()
            return PWild(tok.line)
        if tok.kind == "word":
            if tok.text == "true":
                self.advance()
                return PBool(tok.line, True)
            if tok.text == "false":
                self.advance()
                return PBool(tok.line, False)
            if tok.text not in KEYWORDS:
                self.advance()
                return PVar(tok.line, tok.text)
        raise self.fail("a pattern")


def parse_program(source: str) -> list[Decl]:
    return _Parser(lex(source)).parse_program()


# Type checking

@dataclass
class _Checker:
    env: dict[str, Type] = field(default_factory=dict)

    def check_program(self, decls: list[Decl]) -> None:
        declared: dict[str, Type] = {}
        for decl in decls:
            if isinstance(decl, DOpen):
                continue
            if isinstance(decl, DVal):
                declared[decl.name] = decl.ty
                self.env[decl.name] = decl.ty
                continue
            assert isinstance(decl, DLet)
            self.check_let(decl, declared.get(decl.name))

    def check_let(self, decl: DLet, sig: Type | None) -> None:
        local = dict(self.env)
        if sig is None:
            if decl.params:
                raise MiniSpecError(
                    f"type mismatch: definition '{decl.name}' has parameters "
                    f"but no val signature (line {decl.line})"
                )
            self.env[decl.name] = self.infer(decl.body, local)
            return
        remaining = sig
        for param in decl.params:
            if not isinstance(remaining, TArrow):
                raise MiniSpecError(
                    f"type mismatch: '{decl.name}' binds more parameters than "
                    f"its signature {type_str(sig)} provides (line {decl.line})"
                )
            local[param] = remaining.arg
            remaining = remaining.res
        got = self.infer(decl.body, local)
        if got != remaining:
            raise MiniSpecError(
                f"type mismatch: expected {type_str(remaining)} but got "
                f"{type_str(got)} (line {decl.body.line})"
            )
        self.env[decl.name] = sig

    def infer(self, expr: Expr, env: dict[str, Type]) -> Type:
        if isinstance(expr, EInt):
            return T_INT
        if isinstance(expr, EBool):
            return T_BOOL
        if isinstance(expr, EHole):
            raise MiniSpecError(
                f"hole in term: '_' used as an expression (line {expr.line})"
            )
        if isinstance(expr, EIdent):
            ty = env.get(expr.name)
            if ty is None:
                raise MiniSpecError(
                    f"identifier not found: [{expr.name}] (line {expr.line})"
                )
            return ty
        if isinstance(expr, EBin):
            return self.infer_binop(expr, env)
        if isinstance(expr, EApp):
            fn_ty = self.infer(expr.fn, env)
            for arg in expr.args:
                arg_ty = self.infer(arg, env)
                if not isinstance(fn_ty, TArrow):
                    raise MiniSpecError(
                        f"type mismatch: expected a function but got "
                        f"{type_str(fn_ty)} (line {expr.line})"
                    )
                if arg_ty != fn_ty.arg:
                    raise MiniSpecError(
                        f"type mismatch: expected {type_str(fn_ty.arg)} but got "
                        f"{type_str(arg_ty)} (line {arg.line})"
                    )
                fn_ty = fn_ty.res
            return fn_ty
        if isinstance(expr, EIf):
            cond = self.infer(expr.cond, env)
            if cond != T_BOOL:
                raise MiniSpecError(
                    f"type mismatch: expected bool but got {type_str(cond)} "
                    f"(line {expr.cond.line})"
                )
            then = self.infer(expr.then, env)
            other = self.infer(expr.other, env)
            if then != other:
                raise MiniSpecError(
                    f"type mismatch: expected {type_str(then)} but got "
                    f"{type_str(other)} (line {expr.other.line})"
                )
            return then
        if isinstance(expr, ELetIn):
            bound = self.infer(expr.bound, env)
            inner = dict(env)
            inner[expr.name] = bound
            return self.infer(expr.body, inner)
        if isinstance(expr, EMatch):
            return self.infer_match(expr, env)
        raise AssertionError(f"unhandled expression {expr!r}")

    def infer_binop(self, expr: EBin, env: dict[str, Type]) -> Type:
        lhs = self.infer(expr.lhs, env)
        rhs = self.infer(expr.rhs, env)
        if expr.op in ("+", "-", "*", "<"):
            for side, ty in ((expr.lhs, lhs), (expr.rhs, rhs)):
                if ty != T_INT:
                    raise MiniSpecError(
                        f"type mismatch: expected int but got {type_str(ty)} "
                        f"(line {side.line})"
                    )
            return T_INT if expr.op in ("+", "-", "*") else T_BOOL
        assert expr.op == "="
        if isinstance(lhs, TArrow) or isinstance(rhs, TArrow):
            raise MiniSpecError(
                f"type mismatch: '=' compares base types only (line {expr.line})"
            )
        if lhs != rhs:
            raise MiniSpecError(
                f"type mismatch: expected {type_str(lhs)} but got "
                f"{type_str(rhs)} (line {expr.rhs.line})"
            )
        return T_BOOL

    def infer_match(self, expr: EMatch, env: dict[str, Type]) -> Type:
        scrut = self.infer(expr.scrutinee, env)
        result: Type | None = None
        seen_bools: set[bool] = set()
        has_catchall = False
        for pattern, body in expr.branches:
            inner = env
            if isinstance(pattern, PInt):
                if scrut != T_INT:
                    raise MiniSpecError(
                        f"type mismatch: expected {type_str(scrut)} but got int "
                        f"(line {pattern.line})"
                    )
            elif isinstance(pattern, PBool):
                if scrut != T_BOOL:
                    raise MiniSpecError(
                        f"type mismatch: expected {type_str(scrut)} but got bool "
                        f"(line {pattern.line})"
                    )
                seen_bools.add(pattern.value)
            elif isinstance(pattern, PVar):
                inner = dict(env)
                inner[pattern.name] = scrut
                has_catchall = True
            else:
                has_catchall = True
            body_ty = self.infer(body, inner)
            if result is None:
                result = body_ty
            elif body_ty != result:
                raise MiniSpecError(
                    f"type mismatch: expected {type_str(result)} but got "
                    f"{type_str(body_ty)} (line {body.line})"
                )
        if not has_catchall:
            if scrut == T_BOOL:
                missing = sorted(
                    str(b).lower() for b in (True, False) if b not in seen_bools
                )
                if missing:
                    raise MiniSpecError(
                        f"match not exhaustive: missing case "
                        f"{', '.join(missing)} (line {expr.line})"
                    )
            else:
                raise MiniSpecError(
                    f"match not exhaustive: missing catch-all pattern "
                    f"(line {expr.line})"
                )
        assert result is not None
        return result


def check_source(source: str) -> str | None:
    """Verify a MiniSpec program; returns None on success, a diagnostic otherwise."""
    try:
        decls = parse_program(source)
        _Checker().check_program(decls)
    except MiniSpecError as exc:
        return str(exc)
    except RecursionError:
        return "syntax error: nesting too deep"
    return None
