"""Tokenizer and object/style token partitioning for the prompt mini-language.

Prompts follow ``A <adj>? <noun> (and|on|next to) a <adj>? <noun> ... in <style> style``.
Three interchangeable strategies split the tokens into disjoint object and
style index sets; they agree on template prompts and diverge on the variants
(genre word used as a modifier, style phrase without the ``style`` marker).
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Iterable

TAGS = ("noun", "adjective", "style_marker", "preposition", "determiner", "conjunction", "other")
CATEGORIES = ("multi_object_style", "scene_object_style", "multi_human", "animal_urban", "abstract_style")
COMPLEXITIES = ("low", "medium", "high", "very_high")

_ALPHABET = re.compile(r"^[A-Za-z ,]*$")
_FUNCTION_TAGS = frozenset({"preposition", "determiner", "conjunction", "style_marker"})


class EmptyPrompt(ValueError):
    pass


class UnknownCharacter(ValueError):
    pass


class NoObjectTokens(ValueError):
    pass


class ParserKind(str, Enum):
    DEPENDENCY_CHUNKS = "dependency_chunks"
    POS_TAGS = "pos_tags"
    NAIVE_SPLIT = "naive_split"


PARSER_ALIASES = {"spacy": ParserKind.DEPENDENCY_CHUNKS, "dep": ParserKind.DEPENDENCY_CHUNKS,
                  "pos": ParserKind.POS_TAGS, "naive": ParserKind.NAIVE_SPLIT}
PARSER_SHORT = {ParserKind.DEPENDENCY_CHUNKS: "spacy", ParserKind.POS_TAGS: "pos",
                ParserKind.NAIVE_SPLIT: "naive"}


def parser_kind(name: str | ParserKind) -> ParserKind:
    if isinstance(name, ParserKind):
        return name
    return PARSER_ALIASES.get(name) or ParserKind(name)


@dataclass(frozen=True)
class Prompt:
    text: str
    category: str = "multi_object_style"
    complexity: str = "low"

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.complexity not in COMPLEXITIES:
            raise ValueError(f"unknown complexity {self.complexity!r}")


@dataclass(frozen=True)
class Token:
    surface: str
    index: int
    tag: str
    genre: bool = False


@dataclass(frozen=True)
class TokenSplit:
    all: tuple[Token, ...]
    obj: frozenset[int]
    style: frozenset[int]
    obj_chunks: tuple[tuple[int, ...], ...] = ()
    parser: ParserKind | None = None

    def surfaces(self, indices: Iterable[int]) -> list[str]:
        return [self.all[i].surface for i in sorted(indices)]

    def obj_phrases(self) -> list[str]:
        return [" ".join(self.all[i].surface for i in chunk) for chunk in self.obj_chunks]

    def style_phrases(self) -> list[str]:
        return [" ".join(self.all[i].surface for i in run) for run in _runs(sorted(self.style))]

    def to_json(self, prompt: str) -> str:
        return json.dumps({
            "prompt": prompt,
            "parser": self.parser.value if self.parser else None,
            "obj": self.obj_phrases(),
            "style": self.style_phrases(),
        })


def _runs(indices: list[int]) -> list[list[int]]:
    runs: list[list[int]] = []
    for i in indices:
        if runs and runs[-1][-1] == i - 1:
            runs[-1].append(i)
        else:
            runs.append([i])
    return runs


class Lexicon:
    """word -> tag table, plus the token-id vocabulary used by the text encoder."""

    SPECIALS = ("<pad>", "<null>", "<unk>")

    def __init__(self, entries: list[tuple[str, str]]):
        self.entries = entries
        self.tags = dict(entries)
        self.words = [w for w, _ in entries]
        self.vocab = list(self.SPECIALS) + self.words
        self._ids = {w: i for i, w in enumerate(self.vocab)}

    @classmethod
    def from_file(cls, path) -> Lexicon:
        with open(path, encoding="utf-8") as fh:
            return cls(_parse_lexicon(fh.read()))

    def tag_of(self, word: str) -> tuple[str, bool]:
        tag = self.tags.get(word)
        if tag == "genre":
            return "adjective", True
        if tag is not None:
            return tag, False
        if word.endswith("style"):
            return "style_marker", False
        return "other", False

    def words_with_tag(self, tag: str) -> list[str]:
        return [w for w, t in self.entries if t == tag]

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def null_id(self) -> int:
        return 1

    @property
    def unk_id(self) -> int:
        return 2

    def token_ids(self, tokens: Iterable[Token]) -> list[int]:
        return [self._ids.get(t.surface, self.unk_id) for t in tokens]

    def __len__(self) -> int:
        return len(self.vocab)


def _parse_lexicon(text: str) -> list[tuple[str, str]]:
    entries = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        word, tag = line.split("\t")
        if tag not in TAGS and tag != "genre":
            raise ValueError(f"bad lexicon tag {tag!r} for {word!r}")
        entries.append((word, tag))
    return entries


@lru_cache(maxsize=1)
def default_lexicon() -> Lexicon:
    text = resources.files("lpa.data").joinpath("lexicon.tsv").read_text(encoding="utf-8")
    return Lexicon(_parse_lexicon(text))


def tokenize(prompt: Prompt | str, lexicon: Lexicon | None = None) -> list[Token]:
    text = prompt.text if isinstance(prompt, Prompt) else prompt
    lexicon = lexicon or default_lexicon()
    if not _ALPHABET.match(text):
        bad = next(ch for ch in text if not _ALPHABET.match(ch))
        raise UnknownCharacter(f"character {bad!r} outside the prompt alphabet")
    words = text.replace(",", " ").lower().split()
    if not words:
        raise EmptyPrompt("prompt has no tokens")
    tokens = []
    for i, w in enumerate(words):
        tag, genre = lexicon.tag_of(w)
        tokens.append(Token(w, i, tag, genre))
    return tokens


def _style_frame(tokens: list[Token]) -> tuple[int, int] | None:
    """(start, end) of the tokens strictly between the last ``in`` and a terminal style marker."""
    if not tokens or tokens[-1].tag != "style_marker":
        return None
    end = len(tokens) - 1
    for i in range(end - 1, -1, -1):
        if tokens[i].surface == "in":
            return (i + 1, end) if i + 1 < end else None
    return None


def _content(tok: Token) -> bool:
    return tok.tag not in _FUNCTION_TAGS and tok.tag != "other"


def parse(tokens: list[Token], kind: ParserKind | str) -> TokenSplit:
    kind = parser_kind(kind)
    frame = _style_frame(tokens)
    body_end = frame[0] - 1 if frame else len(tokens)
    if kind is ParserKind.NAIVE_SPLIT:
        chunks, style = _naive(tokens, frame, body_end)
    elif kind is ParserKind.POS_TAGS:
        chunks, style = _pos(tokens, frame, body_end)
    else:
        chunks, style = _dependency(tokens, frame, body_end)
    obj = frozenset(i for c in chunks for i in c)
    if not obj:
        raise NoObjectTokens("no object tokens found")
    return TokenSplit(tuple(tokens), obj, frozenset(style) - obj, tuple(chunks), kind)


def _frame_style(tokens: list[Token], frame) -> set[int]:
    if frame is None:
        return set()
    return {i for i in range(*frame) if _content(tokens[i])}


def _naive(tokens, frame, body_end):
    # keyword split: suffix rule for style, everything else cut at stopwords
    chunks: list[tuple[int, ...]] = []
    run: list[int] = []
    for i in range(body_end):
        if _content(tokens[i]):
            run.append(i)
        elif run:
            chunks.append(tuple(run))
            run = []
    if run:
        chunks.append(tuple(run))
    return chunks, _frame_style(tokens, frame)


def _pos(tokens, frame, body_end):
    chunks: list[tuple[int, ...]] = []
    mods: list[int] = []
    for i in range(body_end):
        tok = tokens[i]
        if tok.tag == "noun":
            chunks.append(tuple(mods) + (i,))
            mods = []
        elif tok.tag == "adjective":
            mods.append(i)
        else:
            mods = []
    style = set()
    if frame is not None:
        for i in range(*frame):
            if tokens[i].tag == "adjective":
                style.add(i)
            elif tokens[i].tag == "noun":
                chunks.append((i,))
    return chunks, style


def _dependency(tokens, frame, body_end):
    chunks: list[tuple[int, ...]] = []
    style = _frame_style(tokens, frame)
    cur: list[int] = []
    pending: list[int] = []
    for i in range(body_end):
        tok = tokens[i]
        if tok.tag == "noun":
            # compound nouns ("bus stop") extend the current head
            cur.extend(pending)
            cur.append(i)
            pending = []
        elif tok.tag == "adjective":
            if cur:
                chunks.append(tuple(cur))
                cur = []
            if tok.genre:
                style.add(i)
                pending = []
            else:
                pending.append(i)
        else:
            if cur:
                chunks.append(tuple(cur))
                cur = []
            pending = []
    if cur:
        chunks.append(tuple(cur))
    if frame is None:
        # "... in <genre words>" with the marker omitted is still a style phrase
        last_in = max((i for i, t in enumerate(tokens) if t.surface == "in"), default=None)
        if last_in is not None and last_in + 1 < len(tokens):
            tail = tokens[last_in + 1:]
            if all(t.tag == "adjective" and t.genre for t in tail):
                style.update(t.index for t in tail)
    return chunks, style


def validate_split(split: TokenSplit) -> list[str]:
    """Empty list when every TokenSplit invariant holds, else one message per violation."""
    problems = []
    n = len(split.all)
    for i in sorted(split.obj & split.style):
        problems.append(f"overlap at index {i}")
    if not split.obj:
        problems.append("empty object set")
    for name, idx in (("obj", split.obj), ("style", split.style)):
        for i in sorted(idx):
            if not 0 <= i < n:
                problems.append(f"{name} index {i} out of range")
    for k, tok in enumerate(split.all):
        if tok.index != k:
            problems.append(f"token {tok.surface!r} has index {tok.index}, expected {k}")
    for chunk in split.obj_chunks:
        if not chunk or list(chunk) != list(range(chunk[0], chunk[0] + len(chunk))):
            problems.append(f"object chunk {chunk} is not a contiguous run")
    return problems


def split_prompt(text: str, kind: ParserKind | str = ParserKind.DEPENDENCY_CHUNKS) -> TokenSplit:
    return parse(tokenize(text), kind)
