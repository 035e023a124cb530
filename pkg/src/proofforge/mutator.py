"""Rule-based synthetic repair data via AST-level mutation.

A verified solution is parsed into a span-annotated tree, structural
mutations are sampled (subterm omission, argument-to-hole, branch and
let-binding removal), and only mutants the checker rejects are kept as
repair problems. Mutations splice source spans; identifiers are removed
or replaced by `_`, never respelled.
"""

from __future__ import annotations

import enum
import random
import re
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

from .checker.backends import CheckerBackend, batch_check, check
from .checker.minispec import KEYWORDS, MiniSpecError, Token, lex
from .checker.taxonomy import Taxonomy
from .checker.verdicts import Status
from .records import RepairProblem
from .seeds import derive_seed


class ParseError(ValueError):
    """Structural parse failure; message carries position and expected tokens."""


class MutationError(ValueError):
    """A mutation does not fit the tree it is applied to (stale span)."""


Span = tuple[int, int]


@dataclass(frozen=True)
class Node:
    span: Span


@dataclass(frozen=True)
class Ident(Node):
    name: str


@dataclass(frozen=True)
class Literal(Node):
    text: str


@dataclass(frozen=True)
class Hole(Node):
    pass


@dataclass(frozen=True)
class BinOp(Node):
    op: str
    lhs: Node
    rhs: Node


@dataclass(frozen=True)
class App(Node):
    fn: Node
    args: tuple[Node, ...]


@dataclass(frozen=True)
class If(Node):
    cond: Node
    then: Node
    other: Node


@dataclass(frozen=True)
class LetIn(Node):
    name: str
    bound: Node
    body: Node


@dataclass(frozen=True)
class Branch(Node):
    pattern: str
    body: Node


@dataclass(frozen=True)
class Match(Node):
    scrutinee: Node
    branches: tuple[Branch, ...]


@dataclass(frozen=True)
class Let(Node):
    name: str
    params: tuple[str, ...]
    body: Node


@dataclass(frozen=True)
class ValDecl(Node):
    name: str
    type_text: str


@dataclass(frozen=True)
class OpenDecl(Node):
    module: str


@dataclass(frozen=True)
class Ast:
    """Parsed source plus its declaration nodes; spans index into `source`."""

    source: str
    decls: tuple[Node, ...]

    @property
    def root(self) -> Node | tuple[Node, ...]:
        return self.decls[0] if len(self.decls) == 1 else self.decls


class MutationOp(str, enum.Enum):
    OMIT_SUBTERM = "OmitSubterm"
    ARG_TO_HOLE = "ArgToHole"
    DROP_BRANCH = "DropBranch"
    DROP_LET_IN = "DropLetIn"


@dataclass(frozen=True)
class Mutation:
    op: MutationOp
    target_span: Span
    seed: int = 0


@dataclass
class _SpanParser:
    """Recursive descent over the same grammar the checker accepts.

    Kept separate from the checker's parser on purpose: tests cross-check
    the two against each other on the fixture corpus.
    """

    tokens: list[Token]
    source: str
    i: int = 0

    def peek(self) -> Token:
        return self.tokens[self.i]

    def advance(self) -> Token:
        tok = self.tokens[self.i]
        if tok.kind != "eof":
            self.i += 1
        return tok

    def fail(self, expected: str) -> ParseError:
        tok = self.peek()
        found = "end of input" if tok.kind == "eof" else repr(tok.text)
        return ParseError(
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

    def parse_program(self) -> list[Node]:
        decls: list[Node] = []
        while self.peek().kind != "eof":
            decls.append(self.parse_decl())
        if not decls:
            raise self.fail("a declaration ('val', 'let', or 'open')")
        return decls

    def parse_decl(self) -> Node:
        tok = self.peek()
        if tok.kind == "word" and tok.text == "val":
            self.advance()
            name = self.expect_name("a value name")
            self.expect_sym(":")
            first = self.peek()
            last = self.parse_type_tokens()
            return ValDecl((tok.pos, last.end), name.text, self._slice(first, last))
        if tok.kind == "word" and tok.text == "let":
            self.advance()
            name = self.expect_name("a definition name")
            params: list[str] = []
            while self.peek().kind == "word" and self.peek().text not in KEYWORDS:
                params.append(self.advance().text)
            self.expect_sym("=", "'=' after the definition head")
            body = self.parse_expr()
            return Let((tok.pos, body.span[1]), name.text, tuple(params), body)
        if tok.kind == "word" and tok.text == "open":
            self.advance()
            name = self.expect_name("a module name")
            return OpenDecl((tok.pos, name.end), name.text)
        raise self.fail("a declaration ('val', 'let', or 'open')")

    def parse_type_tokens(self) -> Token:
        """Consume one type; returns its last token (types are kept as text)."""
        last = self.parse_type_atom_tokens()
        if self.peek().kind == "arrow":
            self.advance()
            return self.parse_type_tokens()
        return last

    def parse_type_atom_tokens(self) -> Token:
        tok = self.peek()
        if tok.kind == "word" and tok.text in ("int", "bool"):
            return self.advance()
        if tok.kind == "(":
            self.advance()
            self.parse_type_tokens()
            return self.expect_sym(")")
        raise self.fail("a type ('int', 'bool', or '(')")

    def _slice(self, first: Token, last: Token) -> str:
        return self.source[first.pos : last.end]

    def parse_expr(self) -> Node:
        return self.parse_cmp()

    def parse_cmp(self) -> Node:
        left = self.parse_add()
        while self.peek().kind in ("=", "<"):
            op = self.advance()
            right = self.parse_add()
            left = BinOp((left.span[0], right.span[1]), op.text, left, right)
        return left

    def parse_add(self) -> Node:
        left = self.parse_mul()
        while self.peek().kind in ("+", "-"):
            op = self.advance()
            right = self.parse_mul()
            left = BinOp((left.span[0], right.span[1]), op.text, left, right)
        return left

    def parse_mul(self) -> Node:
        left = self.parse_app()
        while self.peek().kind == "*":
            op = self.advance()
            right = self.parse_app()
            left = BinOp((left.span[0], right.span[1]), op.text, left, right)
        return left

    def parse_app(self) -> Node:
        head = self.parse_atom()
        args: list[Node] = []
        while self._starts_simple_atom():
            args.append(self.parse_atom())
        if args:
            return App((head.span[0], args[-1].span[1]), head, tuple(args))
        return head

    def _starts_simple_atom(self) -> bool:
        tok = self.peek()
        if tok.kind in ("int", "hole", "("):
            return True
        if tok.kind == "word":
            return tok.text in ("true", "false") or tok.text not in KEYWORDS
        return False

    def parse_atom(self) -> Node:
        tok = self.peek()
        if tok.kind == "int":
            self.advance()
            return Literal((tok.pos, tok.end), tok.text)
        if tok.kind == "hole":
            self.advance()
            return Hole((tok.pos, tok.end))
        if tok.kind == "(":
            self.advance()
            inner = self.parse_expr()
            closing = self.expect_sym(")")
            return replace(inner, span=(tok.pos, closing.end))
        if tok.kind == "word":
            if tok.text in ("true", "false"):
                self.advance()
                return Literal((tok.pos, tok.end), tok.text)
            if tok.text == "if":
                self.advance()
                cond = self.parse_expr()
                self.expect_keyword("then")
                then = self.parse_expr()
                self.expect_keyword("else")
                other = self.parse_expr()
                return If((tok.pos, other.span[1]), cond, then, other)
            if tok.text == "let":
                self.advance()
                name = self.expect_name("a binder name")
                self.expect_sym("=", "'=' after the binder")
                bound = self.parse_expr()
                self.expect_keyword("in")
                body = self.parse_expr()
                return LetIn((tok.pos, body.span[1]), name.text, bound, body)
            if tok.text == "match":
                self.advance()
                scrutinee = self.parse_expr()
                self.expect_keyword("with")
                branches: list[Branch] = []
                while self.peek().kind == "|":
                    bar = self.advance()
                    pattern = self.parse_pattern_token()
                    if self.peek().kind != "arrow":
                        raise self.fail("'->' after the pattern")
                    self.advance()
                    body = self.parse_expr()
                    branches.append(
                        Branch((bar.pos, body.span[1]), pattern.text, body)
                    )
                if not branches:
                    raise self.fail("'|' introducing a match branch")
                return Match(
                    (tok.pos, branches[-1].span[1]), scrutinee, tuple(branches)
                )
            if tok.text not in KEYWORDS:
                self.advance()
                return Ident((tok.pos, tok.end), tok.text)
        raise self.fail("an expression")

    def parse_pattern_token(self) -> Token:
        tok = self.peek()
        if tok.kind in ("int", "hole"):
            return self.advance()
        if tok.kind == "word" and (
            tok.text in ("true", "false") or tok.text not in KEYWORDS
        ):
            return self.advance()
        raise self.fail("a pattern")


def parse(source: str) -> Ast:
    """Parse a definition or whole file into a span-annotated tree."""
    try:
        tokens = lex(source)
    except MiniSpecError as exc:
        raise ParseError(str(exc)) from exc
    parser = _SpanParser(tokens, source)
    return Ast(source, tuple(parser.parse_program()))


def pretty_print(ast: Ast) -> str:
    """Render a tree back to source; reparsing yields an identical tree."""
    return "\n".join(_print_decl(decl) for decl in ast.decls)


def _print_decl(node: Node) -> str:
    if isinstance(node, ValDecl):
        return f"val {node.name} : {node.type_text}"
    if isinstance(node, OpenDecl):
        return f"open {node.module}"
    if isinstance(node, Let):
        head = " ".join([node.name, *node.params])
        return f"let {head} = {_print_expr(node.body, 0)}"
    raise MutationError(f"not a declaration node: {node!r}")


def _print_expr(node: Node, prec: int) -> str:
    if isinstance(node, Ident):
        return node.name
    if isinstance(node, Literal):
        return node.text
    if isinstance(node, Hole):
        return "_"
    if isinstance(node, BinOp):
        level = {"=": 1, "<": 1, "+": 2, "-": 2, "*": 3}[node.op]
        text = (
            f"{_print_expr(node.lhs, level)} {node.op} "
            f"{_print_expr(node.rhs, level + 1)}"
        )
        return f"({text})" if prec > level else text
    if isinstance(node, App):
        parts = [_print_expr(node.fn, 5), *(_print_expr(a, 5) for a in node.args)]
        text = " ".join(parts)
        return f"({text})" if prec > 4 else text
    if isinstance(node, If):
        text = (
            f"if {_print_expr(node.cond, 0)} then {_print_expr(node.then, 0)} "
            f"else {_print_expr(node.other, 0)}"
        )
        return f"({text})" if prec > 0 else text
    if isinstance(node, LetIn):
        text = (
            f"let {node.name} = {_print_expr(node.bound, 0)} "
            f"in {_print_expr(node.body, 0)}"
        )
        return f"({text})" if prec > 0 else text
    if isinstance(node, Match):
        # Branch bodies print at prec 1 so a nested match cannot swallow the
        # next branch's bar.
        branches = " ".join(
            f"| {b.pattern} -> {_print_expr(b.body, 1)}" for b in node.branches
        )
        text = f"match {_print_expr(node.scrutinee, 0)} with {branches}"
        return f"({text})" if prec > 0 else text
    raise MutationError(f"not an expression node: {node!r}")


def strip_spans(node: Node | tuple[Node, ...]) -> object:
    """Structural identity of a tree, spans removed; used for fixpoint checks."""
    if isinstance(node, tuple):
        return tuple(strip_spans(n) for n in node)
    fields: list[object] = [type(node).__name__]
    for name, value in vars(node).items():
        if name == "span":
            continue
        if isinstance(value, Node):
            fields.append(strip_spans(value))
        elif isinstance(value, tuple) and value and isinstance(value[0], Node):
            fields.append(tuple(strip_spans(v) for v in value))
        else:
            fields.append(value)
    return tuple(fields)


@dataclass(frozen=True)
class MutationSite:
    op: MutationOp
    span: Span
    node_kind: str


def _walk(node: Node) -> Iterator[Node]:
    yield node
    if isinstance(node, (Let,)):
        yield from _walk(node.body)
    elif isinstance(node, BinOp):
        yield from _walk(node.lhs)
        yield from _walk(node.rhs)
    elif isinstance(node, App):
        yield from _walk(node.fn)
        for arg in node.args:
            yield from _walk(arg)
    elif isinstance(node, If):
        yield from _walk(node.cond)
        yield from _walk(node.then)
        yield from _walk(node.other)
    elif isinstance(node, LetIn):
        yield from _walk(node.bound)
        yield from _walk(node.body)
    elif isinstance(node, Match):
        yield from _walk(node.scrutinee)
        for branch in node.branches:
            yield from _walk(branch)
    elif isinstance(node, Branch):
        yield from _walk(node.body)


_EXPR_KINDS = (Ident, Literal, Hole, BinOp, App, If, LetIn, Match)


def enumerate_mutation_sites(ast: Ast) -> list[MutationSite]:
    """All mutation sites in deterministic preorder.

    Subterm omission targets every expression node; argument-to-hole targets
    application arguments and binop operands; branch removal targets each
    branch of a multi-branch match; let-in removal targets each let-in.
    """
    sites: list[MutationSite] = []
    for decl in ast.decls:
        for node in _walk(decl):
            kind = type(node).__name__
            if isinstance(node, _EXPR_KINDS):
                sites.append(MutationSite(MutationOp.OMIT_SUBTERM, node.span, kind))
            if isinstance(node, App):
                for arg in node.args:
                    sites.append(
                        MutationSite(
                            MutationOp.ARG_TO_HOLE, arg.span, type(arg).__name__
                        )
                    )
            elif isinstance(node, BinOp):
                for operand in (node.lhs, node.rhs):
                    sites.append(
                        MutationSite(
                            MutationOp.ARG_TO_HOLE,
                            operand.span,
                            type(operand).__name__,
                        )
                    )
            elif isinstance(node, Match) and len(node.branches) >= 2:
                for branch in node.branches:
                    sites.append(
                        MutationSite(MutationOp.DROP_BRANCH, branch.span, "Branch")
                    )
            elif isinstance(node, LetIn):
                sites.append(
                    MutationSite(MutationOp.DROP_LET_IN, node.span, "LetIn")
                )
    return sites


def _find_letin(ast: Ast, span: Span) -> LetIn:
    for decl in ast.decls:
        for node in _walk(decl):
            if isinstance(node, LetIn) and node.span == span:
                return node
    raise MutationError(f"no let-in at span {span}")


def apply_mutation(ast: Ast, mutation: Mutation) -> str:
    """Splice one mutation into the source text; identifiers are never edited."""
    sites = enumerate_mutation_sites(ast)
    if not any(
        s.op is mutation.op and s.span == mutation.target_span for s in sites
    ):
        raise MutationError(
            f"stale mutation site: {mutation.op.value} at {mutation.target_span} "
            "does not exist in this tree"
        )
    start, end = mutation.target_span
    source = ast.source
    if mutation.op is MutationOp.ARG_TO_HOLE:
        return source[:start] + "_" + source[end:]
    if mutation.op is MutationOp.DROP_LET_IN:
        body = _find_letin(ast, mutation.target_span).body
        return source[:start] + source[body.span[0] : body.span[1]] + source[end:]
    # OmitSubterm and DropBranch both delete the span outright.
    return source[:start] + source[end:]


@dataclass(frozen=True)
class MutationBudget:
    max_mutants: int
    max_kept: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_mutants < 1:
            raise ValueError(f"max_mutants must be >= 1, got {self.max_mutants}")
        if self.max_kept is not None and self.max_kept < 1:
            raise ValueError(f"max_kept must be >= 1, got {self.max_kept}")


_WORD_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_'.]*|[0-9]+|\S")


def _token_fallback_sites(body: str) -> list[MutationSite]:
    """Argument-to-hole sites found lexically, for unparseable sources.

    A word token counts as an argument when the previous token looks like a
    callee or a preceding argument (word, number, or closing paren).
    """
    sites: list[MutationSite] = []
    prev: re.Match[str] | None = None
    for match in _WORD_RE.finditer(body):
        text = match.group()
        if (
            prev is not None
            and text not in KEYWORDS
            and text[0].isalpha()
            and (prev.group()[0].isalnum() or prev.group() == ")")
            and prev.group() not in KEYWORDS
        ):
            sites.append(
                MutationSite(
                    MutationOp.ARG_TO_HOLE, (match.start(), match.end()), "token"
                )
            )
        prev = match
    return sites


def synth_repair_pairs(
    solution: tuple[str, str],
    checker_backend: CheckerBackend,
    budget: MutationBudget,
    *,
    context_id: str | None = None,
    prelude: str = "",
    parallelism: int = 4,
    taxonomy: Taxonomy | None = None,
    token_fallback: bool = False,
) -> list[RepairProblem]:
    """Mutate a verified (declaration, definition) pair into repair problems.

    Samples up to `budget.max_mutants` sites uniformly with the seeded RNG,
    always mutating the original definition, and keeps at most
    `budget.max_kept` mutants that the checker rejects. Output is a pure
    function of (solution, budget, backend identity). `prelude` holds any
    sibling declarations the solution needs in scope; it is checked with the
    program but never emitted in the repair rows.
    """
    declaration, body = solution
    original = _assemble(prelude, _assemble(declaration, body))
    baseline = check(original, backend=checker_backend, taxonomy=taxonomy)
    if baseline.status is not Status.PASS:
        raise ValueError(
            "refusing to mutate a solution that does not pass the checker: "
            f"{baseline.error_log.splitlines()[0] if baseline.error_log else baseline.status.value}"
        )

    fallback_used = False
    try:
        ast = parse(body)
        sites = enumerate_mutation_sites(ast)
    except ParseError:
        if not token_fallback:
            raise
        fallback_used = True
        ast = None
        sites = _token_fallback_sites(body)
    if not sites:
        return []

    rng = random.Random(budget.seed)
    mutants: list[str] = []
    seen: set[str] = set()
    for _ in range(budget.max_mutants):
        site = sites[rng.randrange(len(sites))]
        if ast is not None:
            text = apply_mutation(ast, Mutation(site.op, site.span, budget.seed))
        else:
            start, end = site.span
            text = body[:start] + "_" + body[end:]
        if text == body or text in seen:
            continue
        seen.add(text)
        mutants.append(text)

    verdicts = batch_check(
        [_assemble(prelude, _assemble(declaration, m)) for m in mutants],
        checker_backend,
        parallelism=parallelism,
        taxonomy=taxonomy,
    )
    problems: list[RepairProblem] = []
    for mutant, verdict in zip(mutants, verdicts):
        if verdict.status is not Status.FAIL:
            continue
        problems.append(
            RepairProblem(
                type_declaration=declaration,
                incorrect_solution=mutant,
                error_message=verdict.error_log,
                correct_solution=body,
                source="mutation",
                context_id=context_id,
                seed=budget.seed,
                via_token_fallback=fallback_used,
            )
        )
        if budget.max_kept is not None and len(problems) >= budget.max_kept:
            break
    return problems


def _assemble(head: str, rest: str) -> str:
    head = head.rstrip("\n")
    return f"{head}\n{rest}" if head else rest


def identifier_tokens(source: str) -> list[str]:
    """All identifier spellings in a source text (keywords and holes excluded)."""
    out = []
    for match in re.finditer(r"[A-Za-z_][A-Za-z0-9_'.]*", source):
        if match.group() not in KEYWORDS and match.group() != "_":
            out.append(match.group())
    return out


@dataclass(frozen=True)
class SolutionSpec:
    """One verified definition queued for mutation."""

    declaration: str
    body: str
    context_id: str | None = None
    prelude: str = ""


def mutate_many(
    solutions: Sequence[SolutionSpec],
    checker_backend: CheckerBackend,
    *,
    max_mutants: int,
    max_kept: int | None,
    seed: int,
    parallelism: int = 4,
    taxonomy: Taxonomy | None = None,
    token_fallback: bool = False,
) -> list[RepairProblem]:
    """synth_repair_pairs over many solutions.

    Each solution gets an independent sub-seed derived from (seed, index) so
    reordering unrelated inputs cannot perturb a solution's own mutants.
    """
    problems: list[RepairProblem] = []
    for idx, spec in enumerate(solutions):
        sub = derive_seed(seed, idx)
        budget = MutationBudget(max_mutants=max_mutants, max_kept=max_kept, seed=sub)
        problems.extend(
            synth_repair_pairs(
                (spec.declaration, spec.body),
                checker_backend,
                budget,
                context_id=spec.context_id,
                prelude=spec.prelude,
                parallelism=parallelism,
                taxonomy=taxonomy,
                token_fallback=token_fallback,
            )
        )
    return problems
