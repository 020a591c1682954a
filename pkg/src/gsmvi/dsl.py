"""A small differentiable expression language for log joints.

Grammar::

    expr     := term (('+' | '-') term)*
    term     := factor (('*' | '/') factor)*
    factor   := '-' factor | atom ('^' exponent)?
    exponent := ['-'] INT
    atom     := NUMBER
              | 'theta' '[' (INT | 'i') ']'
              | FUNC '(' expr ')'
              | 'dot' '(' 'theta' ',' 'theta' ')'
              | 'sum' '(' expr ')'
              | '(' expr ')'
    FUNC     := exp | log | sqrt | sinh | cosh | asinh | tanh | abs

Inside ``sum(...)`` the index ``i`` runs over every coordinate; sums do not
nest. Exponents are integer constants in ``[-8, 8]`` and do not chain, so
``x^2^3`` is rejected; write ``x^8``.

Example::

    >>> ast = parse("-0.5*dot(theta,theta)", 2)
    >>> evaluate(ast, [1.0, 2.0])
    -2.5
    >>> differentiate(ast, [1.0, 2.0])
    array([-1., -2.])
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

FUNCTIONS = ("exp", "log", "sqrt", "sinh", "cosh", "asinh", "tanh", "abs")
MAX_EXPONENT = 8


@dataclass(frozen=True)
class SourceSpan:
    start: int
    end: int

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise ValueError(f"invalid span {self.start}..{self.end}")


class DslError(ValueError):
    """Base class for expression errors; ``span`` locates the problem."""

    def __init__(self, message, span=None):
        where = f" at {span.start}..{span.end}" if span is not None else ""
        super().__init__(f"{message}{where}")
        self.message = message
        self.span = span


class LexError(DslError):
    pass


class ParseError(DslError):
    pass


class UnknownIdentifierError(DslError):
    pass


class ArityError(DslError):
    pass


class IndexOutOfRangeError(DslError):
    pass


class DslDomainError(DslError, ArithmeticError):
    """Evaluation left the domain of a function or produced a non-finite value."""


# ---------------------------------------------------------------- AST

_NOSPAN = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Num:
    value: float
    span: SourceSpan | None = _NOSPAN


@dataclass(frozen=True)
class Coord:
    """``theta[index]``; ``index is None`` means the sum variable ``i``."""

    index: int | None
    span: SourceSpan | None = _NOSPAN


@dataclass(frozen=True)
class Dot:
    span: SourceSpan | None = _NOSPAN


@dataclass(frozen=True)
class Neg:
    arg: object
    span: SourceSpan | None = _NOSPAN


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object
    span: SourceSpan | None = _NOSPAN


@dataclass(frozen=True)
class Pow:
    base: object
    exponent: int
    span: SourceSpan | None = _NOSPAN


@dataclass(frozen=True)
class Call:
    func: str
    arg: object
    span: SourceSpan | None = _NOSPAN


@dataclass(frozen=True)
class Sum:
    body: object
    span: SourceSpan | None = _NOSPAN


# ---------------------------------------------------------------- lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),\[\]])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # "number", "ident", "op", "eof"
    text: str
    span: SourceSpan


def tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            ch = text[pos]
            raise LexError(f"unexpected character {ch!r}",
                           SourceSpan(pos, pos + len(ch.encode("utf-8"))))
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(Token(kind, m.group(), SourceSpan(m.start(), m.end())))
        pos = m.end()
    tokens.append(Token("eof", "", SourceSpan(len(text), len(text))))
    return tokens


# ---------------------------------------------------------------- parser

class _Parser:
    def __init__(self, text, dim):
        self.tokens = tokenize(text)
        self.pos = 0
        self.dim = dim
        self.in_sum = False

    @property
    def tok(self):
        return self.tokens[self.pos]

    def advance(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def at(self, text):
        return self.tok.kind == "op" and self.tok.text == text

    def expect(self, text):
        if not self.at(text):
            raise ParseError(f"expected {text!r}, found {self.tok.text or 'end of input'!r}",
                             self.tok.span)
        return self.advance()

    def parse(self):
        node = self.expr()
        if self.tok.kind != "eof":
            raise ParseError(f"unexpected {self.tok.text!r}", self.tok.span)
        return node

    def expr(self):
        node = self.term()
        while self.at("+") or self.at("-"):
            op = self.advance()
            right = self.term()
            node = BinOp(op.text, node, right, SourceSpan(node.span.start, right.span.end))
        return node

    def term(self):
        node = self.factor()
        while self.at("*") or self.at("/"):
            op = self.advance()
            right = self.factor()
            node = BinOp(op.text, node, right, SourceSpan(node.span.start, right.span.end))
        return node

    def factor(self):
        if self.at("-"):
            minus = self.advance()
            arg = self.factor()
            return Neg(arg, SourceSpan(minus.span.start, arg.span.end))
        node = self.atom()
        if self.at("^"):
            self.advance()
            value, end = self.exponent()
            node = Pow(node, value, SourceSpan(node.span.start, end))
        return node

    def exponent(self):
        start = self.tok.span.start
        sign = 1
        if self.at("-"):
            self.advance()
            sign = -1
        tok = self.tok
        if tok.kind != "number" or not tok.text.isdigit():
            raise ParseError("exponent must be an integer constant", tok.span)
        self.advance()
        value = sign * int(tok.text)
        end = tok.span.end
        if abs(value) > MAX_EXPONENT:
            raise ParseError(f"exponent {value} outside [-{MAX_EXPONENT}, {MAX_EXPONENT}]",
                             SourceSpan(start, end))
        return value, end

    def atom(self):
        tok = self.tok
        if tok.kind == "number":
            self.advance()
            return Num(float(tok.text), tok.span)
        if self.at("("):
            self.advance()
            node = self.expr()
            close = self.expect(")")
            # keep the parenthesized extent for error reporting
            return _respan(node, SourceSpan(tok.span.start, close.span.end))
        if tok.kind == "ident":
            self.advance()
            name = tok.text
            if name == "theta":
                return self.coordinate(tok)
            if name == "dot":
                return self.dot(tok)
            if name == "sum":
                return self.sum(tok)
            if name in FUNCTIONS:
                args, close = self.call_args(tok)
                if len(args) != 1:
                    raise ArityError(f"{name} takes 1 argument, got {len(args)}",
                                     SourceSpan(tok.span.start, close.span.end))
                return Call(name, args[0], SourceSpan(tok.span.start, close.span.end))
            raise UnknownIdentifierError(f"unknown identifier {name!r}", tok.span)
        raise ParseError(f"unexpected {tok.text or 'end of input'!r}", tok.span)

    def call_args(self, name_tok):
        if not self.at("("):
            raise ParseError(f"expected '(' after {name_tok.text!r}", self.tok.span)
        self.advance()
        args = []
        if not self.at(")"):
            args.append(self.expr())
            while self.at(","):
                self.advance()
                args.append(self.expr())
        close = self.expect(")")
        return args, close

    def coordinate(self, theta_tok):
        if not self.at("["):
            raise ParseError("'theta' must be indexed as theta[k] outside dot()",
                             theta_tok.span)
        open_ = self.advance()
        idx_tok = self.advance()
        close = self.expect("]")
        bracket = SourceSpan(open_.span.start, close.span.end)
        span = SourceSpan(theta_tok.span.start, close.span.end)
        if idx_tok.kind == "ident":
            if idx_tok.text != "i":
                raise UnknownIdentifierError(f"unknown index {idx_tok.text!r}", idx_tok.span)
            if not self.in_sum:
                raise UnknownIdentifierError("index 'i' used outside sum()", idx_tok.span)
            return Coord(None, span)
        if idx_tok.kind != "number" or not idx_tok.text.isdigit():
            raise ParseError("index must be a nonnegative integer or 'i'", idx_tok.span)
        index = int(idx_tok.text)
        if index >= self.dim:
            raise IndexOutOfRangeError(
                f"index {index} out of range for dimension {self.dim}", bracket
            )
        return Coord(index, span)

    def dot(self, name_tok):
        if not self.at("("):
            raise ParseError("expected '(' after 'dot'", self.tok.span)
        self.advance()
        count = 0
        while not self.at(")"):
            tok = self.advance()
            if tok.kind != "ident" or tok.text != "theta":
                raise ParseError("dot() only accepts dot(theta, theta)", tok.span)
            count += 1
            if self.at(","):
                self.advance()
            elif not self.at(")"):
                raise ParseError("expected ',' or ')'", self.tok.span)
        close = self.advance()
        span = SourceSpan(name_tok.span.start, close.span.end)
        if count != 2:
            raise ArityError(f"dot takes 2 arguments, got {count}", span)
        return Dot(span)

    def sum(self, name_tok):
        if self.in_sum:
            raise ParseError("sum() cannot be nested", name_tok.span)
        self.in_sum = True
        try:
            args, close = self.call_args(name_tok)
        finally:
            self.in_sum = False
        span = SourceSpan(name_tok.span.start, close.span.end)
        if len(args) != 1:
            raise ArityError(f"sum takes 1 argument, got {len(args)}", span)
        return Sum(args[0], span)


def _respan(node, span):
    return type(node)(**{**node.__dict__, "span": span})


def parse(text, dim):
    """Parse ``text`` into an AST over ``theta`` of dimension ``dim``."""
    if int(dim) < 1:
        raise ValueError("dim must be >= 1")
    return _Parser(text, int(dim)).parse()


def check_dimension(node, dim):
    """Raise :class:`IndexOutOfRangeError` if ``node`` indexes past ``dim``."""
    for n in _walk(node):
        if isinstance(n, Coord) and n.index is not None and n.index >= dim:
            raise IndexOutOfRangeError(f"index {n.index} out of range for dimension {dim}",
                                       n.span)


def _walk(node):
    yield node
    if isinstance(node, (Neg, Call)):
        yield from _walk(node.arg)
    elif isinstance(node, BinOp):
        yield from _walk(node.left)
        yield from _walk(node.right)
    elif isinstance(node, Pow):
        yield from _walk(node.base)
    elif isinstance(node, Sum):
        yield from _walk(node.body)


def to_source(node):
    """Canonical, fully parenthesized text; ``parse(to_source(a))`` equals ``a``."""
    if isinstance(node, Num):
        return repr(float(node.value))
    if isinstance(node, Coord):
        return "theta[i]" if node.index is None else f"theta[{node.index}]"
    if isinstance(node, Dot):
        return "dot(theta,theta)"
    if isinstance(node, Neg):
        return f"(-{to_source(node.arg)})"
    if isinstance(node, BinOp):
        return f"({to_source(node.left)} {node.op} {to_source(node.right)})"
    if isinstance(node, Pow):
        return f"({to_source(node.base)}^{node.exponent})"
    if isinstance(node, Call):
        return f"{node.func}({to_source(node.arg)})"
    if isinstance(node, Sum):
        return f"sum({to_source(node.body)})"
    raise TypeError(f"not an expression node: {node!r}")


# ---------------------------------------------------------------- evaluation

def _finite(x, node):
    if not math.isfinite(x):
        raise DslDomainError("non-finite value", node.span)
    return x


def _apply(func, x, node):
    try:
        if func == "exp":
            return math.exp(x)
        if func == "log":
            if x <= 0:
                raise DslDomainError(f"log of nonpositive value {x!r}", node.span)
            return math.log(x)
        if func == "sqrt":
            if x < 0:
                raise DslDomainError(f"sqrt of negative value {x!r}", node.span)
            return math.sqrt(x)
        if func == "sinh":
            return math.sinh(x)
        if func == "cosh":
            return math.cosh(x)
        if func == "asinh":
            return math.asinh(x)
        if func == "tanh":
            return math.tanh(x)
        if func == "abs":
            return abs(x)
    except OverflowError:
        raise DslDomainError(f"overflow in {func}", node.span) from None
    raise AssertionError(func)


def _derivative(func, x, fx):
    if func == "exp":
        return fx
    if func == "log":
        return 1.0 / x
    if func == "sqrt":
        return 0.5 / fx if fx > 0 else math.inf
    if func == "sinh":
        return math.cosh(x)
    if func == "cosh":
        return math.sinh(x)
    if func == "asinh":
        return 1.0 / math.sqrt(1.0 + x * x)
    if func == "tanh":
        return 1.0 - fx * fx
    if func == "abs":
        return float(np.sign(x))
    raise AssertionError(func)


def _value(node, theta, i, cache):
    key = (id(node), i)
    if key in cache:
        return cache[key]
    if isinstance(node, Num):
        v = float(node.value)
    elif isinstance(node, Coord):
        v = float(theta[i if node.index is None else node.index])
    elif isinstance(node, Dot):
        v = float(theta @ theta)
    elif isinstance(node, Neg):
        v = -_value(node.arg, theta, i, cache)
    elif isinstance(node, BinOp):
        a = _value(node.left, theta, i, cache)
        b = _value(node.right, theta, i, cache)
        if node.op == "+":
            v = a + b
        elif node.op == "-":
            v = a - b
        elif node.op == "*":
            v = a * b
        else:
            if b == 0:
                raise DslDomainError("division by zero", node.span)
            v = a / b
    elif isinstance(node, Pow):
        a = _value(node.base, theta, i, cache)
        if a == 0 and node.exponent < 0:
            raise DslDomainError("division by zero", node.span)
        try:
            v = a ** node.exponent
        except OverflowError:
            raise DslDomainError("overflow in power", node.span) from None
    elif isinstance(node, Call):
        v = _apply(node.func, _value(node.arg, theta, i, cache), node)
    elif isinstance(node, Sum):
        v = 0.0
        for k in range(theta.shape[0]):
            v += _value(node.body, theta, k, cache)
    else:
        raise TypeError(f"not an expression node: {node!r}")
    v = _finite(v, node)
    cache[key] = v
    return v


def _backprop(node, adj, theta, i, cache, grad):
    if adj == 0.0 or isinstance(node, Num):
        return
    if isinstance(node, Coord):
        grad[i if node.index is None else node.index] += adj
    elif isinstance(node, Dot):
        grad += 2.0 * adj * theta
    elif isinstance(node, Neg):
        _backprop(node.arg, -adj, theta, i, cache, grad)
    elif isinstance(node, BinOp):
        if node.op == "+":
            _backprop(node.left, adj, theta, i, cache, grad)
            _backprop(node.right, adj, theta, i, cache, grad)
        elif node.op == "-":
            _backprop(node.left, adj, theta, i, cache, grad)
            _backprop(node.right, -adj, theta, i, cache, grad)
        elif node.op == "*":
            a = cache[(id(node.left), i)]
            b = cache[(id(node.right), i)]
            _backprop(node.left, adj * b, theta, i, cache, grad)
            _backprop(node.right, adj * a, theta, i, cache, grad)
        else:
            a = cache[(id(node.left), i)]
            b = cache[(id(node.right), i)]
            _backprop(node.left, adj / b, theta, i, cache, grad)
            _backprop(node.right, -adj * a / (b * b), theta, i, cache, grad)
    elif isinstance(node, Pow):
        k = node.exponent
        if k != 0:
            a = cache[(id(node.base), i)]
            _backprop(node.base, adj * k * a ** (k - 1), theta, i, cache, grad)
    elif isinstance(node, Call):
        x = cache[(id(node.arg), i)]
        fx = cache[(id(node), i)]
        dfx = _finite(_derivative(node.func, x, fx), node)
        _backprop(node.arg, adj * dfx, theta, i, cache, grad)
    elif isinstance(node, Sum):
        for k in range(theta.shape[0]):
            _backprop(node.body, adj, theta, k, cache, grad)


def _as_theta(theta):
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1:
        raise ValueError(f"theta must be a vector, got shape {theta.shape}")
    return theta


def evaluate(node, theta):
    """Value of the expression at ``theta``."""
    theta = _as_theta(theta)
    check_dimension(node, theta.shape[0])
    return _value(node, theta, None, {})


def differentiate(node, theta):
    """Exact gradient of the expression at ``theta`` (reverse mode)."""
    theta = _as_theta(theta)
    check_dimension(node, theta.shape[0])
    cache = {}
    _value(node, theta, None, cache)
    grad = np.zeros(theta.shape[0])
    _backprop(node, 1.0, theta, None, cache, grad)
    if not np.all(np.isfinite(grad)):
        raise DslDomainError("non-finite gradient", node.span)
    return grad
