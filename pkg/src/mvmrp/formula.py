"""Parser for the hierarchical model formula mini-language.

Grammar (whitespace-insensitive)::

    formula  := IDENT '~' term ('+' term)*
    term     := '0' | '1' | '-' '1' | IDENT | 'v_fe' '(' IDENT ')' | '(' slot '|' group ')'
    slot     := ('1' | '0' | '-' '1' | IDENT) ('+' IDENT)*
    group    := IDENT (':' IDENT)*

An intercept is implicit and suppressed with a top-level ``0`` or ``-1``.
Inside a random-effect slot, ``0 +``/``-1 +`` suppress the random intercept
and a bare covariate list keeps it.
"""
import re
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple, Union, Any

from .errors import FormulaError

FE_FUNCTION = "v_fe"

_IDENT = re.compile(r"[A-Za-z_.][A-Za-z0-9_.]*")
_NUMBER = re.compile(r"[0-9]+")
_SYMBOLS = set("~+-()|:,")


@dataclass(frozen=True)
class RandomEffectTerm:
    """A ``(slot | g1 : g2)`` term: d_j-dimensional coefficients per level of the grouping."""
    inner_terms: Tuple[str, ...]
    include_intercept: bool
    group_expr: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "inner_terms", tuple(self.inner_terms))
        object.__setattr__(self, "group_expr", tuple(self.group_expr))
        if not self.group_expr or any(not g for g in self.group_expr):
            raise FormulaError("empty group expression")
        if not self.include_intercept and not self.inner_terms:
            raise FormulaError("random-effect slot without intercept needs at least one covariate")

    @property
    def dimension(self) -> int:
        return len(self.inner_terms) + (1 if self.include_intercept else 0)

    @property
    def slot_names(self) -> List[str]:
        return (["(Intercept)"] if self.include_intercept else []) + list(self.inner_terms)

    @property
    def canonical_key(self) -> Tuple:
        return (self.group_expr, not self.include_intercept, self.inner_terms)

    @property
    def variables(self) -> List[str]:
        return list(self.inner_terms) + list(self.group_expr)

    @property
    def label(self) -> str:
        if self.include_intercept:
            slot = " + ".join(["1", *self.inner_terms])
        else:
            slot = " + ".join(["0", *self.inner_terms])
        return f"({slot} | {' : '.join(self.group_expr)})"


@dataclass(eq=False)
class FormulaAst:
    """Parsed model formula.

    Equality ignores the order of top-level terms; slot covariates and
    grouping variables keep their order since they fix column layout.
    """
    response: str
    fixed_terms: List[str] = field(default_factory=list)
    re_terms: List[RandomEffectTerm] = field(default_factory=list)
    fe_terms: List[str] = field(default_factory=list)
    intercept: bool = True

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FormulaAst):
            return NotImplemented
        return (
            self.response == other.response
            and self.intercept == other.intercept
            and sorted(self.fixed_terms) == sorted(other.fixed_terms)
            and sorted(self.fe_terms) == sorted(other.fe_terms)
            and sorted(t.canonical_key for t in self.re_terms)
            == sorted(t.canonical_key for t in other.re_terms)
        )

    __hash__ = None

    def canonical(self) -> "FormulaAst":
        """Copy with random-effect terms sorted on their canonical key."""
        return replace(
            self,
            fixed_terms=list(self.fixed_terms),
            re_terms=sorted(self.re_terms, key=lambda t: t.canonical_key),
            fe_terms=list(self.fe_terms),
        )

    def without_fe(self) -> "FormulaAst":
        return replace(self, fe_terms=[], fixed_terms=list(self.fixed_terms), re_terms=list(self.re_terms))

    def grouping_columns(self) -> List[str]:
        """Columns that index levels: random-effect groupings and ``v_fe`` variables."""
        columns = [g for term in self.re_terms for g in term.group_expr] + list(self.fe_terms)
        return list(dict.fromkeys(columns))

    def variables(self) -> List[str]:
        """All data columns referenced by the formula, response first."""
        seen: Dict[str, None] = {self.response: None}
        for name in self.fixed_terms:
            seen.setdefault(name)
        for term in self.re_terms:
            for name in term.variables:
                seen.setdefault(name)
        for name in self.fe_terms:
            seen.setdefault(name)
        return list(seen)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "response": self.response,
            "intercept": self.intercept,
            "fixed_terms": list(self.fixed_terms),
            "re_terms": [
                {
                    "inner_terms": list(t.inner_terms),
                    "include_intercept": t.include_intercept,
                    "group_expr": list(t.group_expr),
                    "dimension": t.dimension,
                }
                for t in self.re_terms
            ],
            "fe_terms": list(self.fe_terms),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FormulaAst":
        return cls(
            response=data["response"],
            fixed_terms=list(data.get("fixed_terms", [])),
            re_terms=[
                RandomEffectTerm(
                    inner_terms=tuple(t["inner_terms"]),
                    include_intercept=t["include_intercept"],
                    group_expr=tuple(t["group_expr"]),
                )
                for t in data.get("re_terms", [])
            ],
            fe_terms=list(data.get("fe_terms", [])),
            intercept=data.get("intercept", True),
        )


@dataclass(frozen=True)
class _Token:
    kind: str  # 'ident', 'number', a symbol, or 'eof'
    text: str
    offset: int


def _tokenize(src: str) -> List[_Token]:
    tokens = []
    pos = 0
    while pos < len(src):
        char = src[pos]
        if char.isspace():
            pos += 1
            continue
        if char in _SYMBOLS:
            tokens.append(_Token(char, char, pos))
            pos += 1
            continue
        match = _IDENT.match(src, pos)
        if match:
            tokens.append(_Token("ident", match.group(), pos))
            pos = match.end()
            continue
        match = _NUMBER.match(src, pos)
        if match:
            tokens.append(_Token("number", match.group(), pos))
            pos = match.end()
            continue
        raise FormulaError(
            f"unexpected character {char!r}", _byte_offset(src, pos), "identifier, number or operator"
        )
    tokens.append(_Token("eof", "", len(src)))
    return tokens


def _byte_offset(src: str, pos: int) -> int:
    return len(src[:pos].encode("utf-8", errors="surrogatepass"))


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.tokens = _tokenize(src)
        self.pos = 0

    @property
    def current(self) -> _Token:
        return self.tokens[self.pos]

    def _error(self, message: str, expected: Optional[str] = None, token: Optional[_Token] = None) -> FormulaError:
        token = token or self.current
        return FormulaError(message, _byte_offset(self.src, token.offset), expected)

    def _advance(self) -> _Token:
        token = self.current
        if token.kind != "eof":
            self.pos += 1
        return token

    def _expect(self, kind: str, expected: str) -> _Token:
        if self.current.kind != kind:
            found = self.current.text or "end of input"
            raise self._error(f"unexpected {found!r}", expected)
        return self._advance()

    def _intercept_flag(self) -> Optional[bool]:
        """Consume ``0``, ``1`` or ``-1`` if present and return the intercept flag."""
        token = self.current
        if token.kind == "number":
            if token.text not in ("0", "1"):
                raise self._error(f"unexpected number {token.text!r}", "0 or 1")
            self._advance()
            return token.text == "1"
        if token.kind == "-":
            self._advance()
            number = self._expect("number", "1 after '-'")
            if number.text != "1":
                raise self._error(f"unexpected number {number.text!r}", "1 after '-'", number)
            return False
        return None

    def parse(self) -> FormulaAst:
        response = self._expect("ident", "response variable").text
        self._expect("~", "'~'")
        ast = FormulaAst(response=response)
        self._term(ast)
        while self.current.kind == "+":
            self._advance()
            self._term(ast)
        if self.current.kind == "~":
            raise self._error("duplicate response", "'+' or end of input")
        if self.current.kind != "eof":
            raise self._error(f"unexpected {self.current.text!r}", "'+' or end of input")
        self._validate(ast)
        return ast

    def _term(self, ast: FormulaAst) -> None:
        flag = self._intercept_flag()
        if flag is not None:
            ast.intercept = flag
            return
        token = self.current
        if token.kind == "(":
            self._advance()
            ast.re_terms.append(self._random_effect(token))
            return
        if token.kind == "ident":
            self._advance()
            if token.text == FE_FUNCTION and self.current.kind == "(":
                ast.fe_terms.append(self._fe_call(token))
                return
            if self.current.kind == ":":
                raise self._error("interactions are only supported inside random-effect groups", "'+' or end of input")
            if token.text in ast.fixed_terms:
                raise self._error(f"duplicate term {token.text!r}", token=token)
            ast.fixed_terms.append(token.text)
            return
        found = token.text or "end of input"
        raise self._error(f"unexpected {found!r}", "term")

    def _fe_call(self, name: _Token) -> str:
        self._expect("(", "'('")
        args = []
        while self.current.kind != ")":
            if self.current.kind == "eof":
                raise self._error("unterminated v_fe(...)", "')'")
            if args:
                self._expect(",", "',' or ')'")
            args.append(self._expect("ident", "variable name").text)
        self._advance()
        if len(args) != 1:
            raise self._error(f"v_fe takes exactly one argument, got {len(args)}", token=name)
        return args[0]

    def _random_effect(self, opening: _Token) -> RandomEffectTerm:
        flag = self._intercept_flag()
        inner: List[str] = []
        if flag is None:
            inner.append(self._expect("ident", "'1', '0' or covariate").text)
            flag = True
        while self.current.kind == "+":
            self._advance()
            inner.append(self._expect("ident", "covariate name").text)
        self._expect("|", "'|'")
        if self.current.kind == ")":
            raise self._error("empty group expression", "grouping variable")
        group = [self._expect("ident", "grouping variable").text]
        while self.current.kind == ":":
            self._advance()
            group.append(self._expect("ident", "grouping variable").text)
        self._expect(")", "')'")
        if not flag and not inner:
            raise self._error("random-effect slot without intercept needs at least one covariate", token=opening)
        return RandomEffectTerm(tuple(inner), flag, tuple(group))

    def _validate(self, ast: FormulaAst) -> None:
        overlap = set(ast.fixed_terms) & set(ast.fe_terms)
        if overlap:
            raise FormulaError(f"variable(s) {sorted(overlap)} appear both as fixed terms and in v_fe")
        if len(set(ast.fe_terms)) != len(ast.fe_terms):
            raise FormulaError("duplicate v_fe term")
        if ast.response in ast.fixed_terms or ast.response in ast.fe_terms:
            raise FormulaError(f"response {ast.response!r} used as a term")
        if not (ast.fixed_terms or ast.re_terms or ast.fe_terms or ast.intercept):
            raise FormulaError("formula has no terms")


def parse_formula(src: Union[str, bytes]) -> FormulaAst:
    """Parse ``src`` into a :class:`FormulaAst`.

    Raises:
        FormulaError: with the byte offset of the offending token and the
            token that was expected there.
    """
    if isinstance(src, (bytes, bytearray)):
        try:
            src = bytes(src).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormulaError("invalid UTF-8 in formula", e.start, "UTF-8 text")
    if not isinstance(src, str):
        raise FormulaError(f"formula must be text, got {type(src).__name__}")
    return _Parser(src).parse()


def format_formula(ast: FormulaAst) -> str:
    """Pretty-print ``ast``; the output re-parses to an equal AST."""
    terms = [] if ast.intercept else ["0"]
    terms += [f"{FE_FUNCTION}({name})" for name in ast.fe_terms]
    terms += list(ast.fixed_terms)
    terms += [t.label for t in ast.re_terms]
    if not terms:
        terms = ["1"]
    return f"{ast.response} ~ {' + '.join(terms)}"
