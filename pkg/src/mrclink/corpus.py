"""Annotated short texts, tokenization, and query/option sequence construction.

All types here are immutable values and every operation is a pure function,
so concurrent use needs no coordination.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .errors import InputFormatError, SequenceOverflowError
from .kb import NIL, Entity

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = 0, 1, 2, 3, 4
RESERVED_TOKENS = {PAD: PAD_ID, UNK: UNK_ID, CLS: CLS_ID, SEP: SEP_ID, MASK: MASK_ID}

_SPECIAL_RE = re.compile(r"(\[PAD\]|\[UNK\]|\[CLS\]|\[SEP\]|\[MASK\])")

# Segment tags inside an option sequence.
SEG_DESCRIPTION, SEG_QUERY, SEG_OPTION = 0, 1, 2


def split_tokens(text: str) -> list[str]:
    """Deterministic surface tokenization.

    Whitespace-separated chunks stay whole when pure ASCII; chunks containing
    other scripts fall back to per-character tokens (covers unspaced text).
    Bracketed special tokens are always atomic.
    """
    out: list[str] = []
    for chunk in text.split():
        for piece in _SPECIAL_RE.split(chunk):
            if not piece:
                continue
            if piece in RESERVED_TOKENS or piece.isascii():
                out.append(piece)
            else:
                out.extend(piece)
    return out


class Vocabulary:
    """Token -> id mapping with fixed reserved ids for the special tokens."""

    def __init__(self, token_to_id: Mapping[str, int]):
        for tok, want in RESERVED_TOKENS.items():
            if token_to_id.get(tok) != want:
                raise InputFormatError(f"vocabulary must map {tok} to {want}")
        ids = list(token_to_id.values())
        if len(set(ids)) != len(ids):
            raise InputFormatError("vocabulary mapping must be injective")
        self._token_to_id = dict(token_to_id)
        self._id_to_token = {i: t for t, i in self._token_to_id.items()}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        """Assign ids in first-seen order over the token stream of ``texts``."""
        mapping = dict(RESERVED_TOKENS)
        next_id = max(mapping.values()) + 1
        for text in texts:
            for tok in split_tokens(text):
                if tok not in mapping:
                    mapping[tok] = next_id
                    next_id += 1
        return cls(mapping)

    def id(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        try:
            return self._id_to_token[token_id]
        except KeyError:
            raise KeyError(f"unknown token id {token_id}") from None

    def __len__(self) -> int:
        return len(self._token_to_id)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def to_dict(self) -> dict[str, int]:
        return dict(self._token_to_id)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Token ids for a text; out-of-vocabulary tokens map to the UNK id."""
    return [vocab.id(tok) for tok in split_tokens(text)]


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.token(i) for i in ids)


@dataclass(frozen=True)
class Mention:
    """A span in a short text; ``gold`` is an entity id, ``NIL``, or None at inference."""

    start: int
    end: int
    surface: str
    gold: str | None = None

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)


@dataclass(frozen=True)
class AnnotatedText:
    text: str
    mentions: tuple[Mention, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "mentions", tuple(self.mentions))
        prev_end = 0
        for m in self.mentions:
            if not (0 <= m.start < m.end <= len(self.text)):
                raise InputFormatError(f"mention span {m.span} outside text bounds")
            if m.start < prev_end:
                raise InputFormatError("mentions must be non-overlapping and in order of appearance")
            if self.text[m.start : m.end] != m.surface:
                raise InputFormatError(
                    f"surface {m.surface!r} does not match text span {self.text[m.start:m.end]!r}"
                )
            prev_end = m.end


def build_query(text: AnnotatedText, target: Mention) -> str:
    """Replace the target mention span with the mask token; everything else unchanged."""
    if target not in text.mentions:
        raise ValueError("target is not a mention of this text")
    return text.text[: target.start] + MASK + text.text[target.end :]


def update_query(
    text: AnnotatedText,
    target: Mention,
    history: Mapping[Mention, Entity | None],
) -> str:
    """Mask the target and substitute previously linked entities' canonical names.

    A history value of None marks a NIL link: that mention keeps its surface.
    Replacements apply right to left so earlier spans stay valid.
    """
    if target in history:
        raise ValueError("target mention cannot appear in the history")
    if target not in text.mentions:
        raise ValueError("target is not a mention of this text")
    repls: list[tuple[int, int, str]] = [(target.start, target.end, MASK)]
    for m, ent in history.items():
        if ent is not None:
            repls.append((m.start, m.end, ent.canonical_name))
    out = text.text
    for start, end, repl in sorted(repls, key=lambda r: r[0], reverse=True):
        out = out[:start] + repl + out[end:]
    return out


@dataclass(frozen=True)
class TokenSequence:
    """Encoder input: token ids plus a per-token segment tag."""

    tokens: tuple[int, ...]
    segments: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.tokens)


def assemble_option_sequence(
    description: str,
    query: str,
    option_name: str,
    vocab: Vocabulary,
    max_len: int,
) -> TokenSequence:
    """[CLS] description [SEP] query [SEP] option [SEP], truncating only the description.

    Tokens come off the end of the description until the sequence fits
    ``max_len``; the query and option are never shortened.
    """
    if max_len < 8:
        raise ValueError("max_len must be >= 8")
    d = tokenize(description, vocab)
    q = tokenize(query, vocab)
    o = tokenize(option_name, vocab)
    budget = max_len - 4 - len(q) - len(o)
    if budget < 0:
        raise SequenceOverflowError(
            f"query ({len(q)}) and option ({len(o)}) tokens cannot fit in max_len={max_len}"
        )
    d = d[:budget]
    tokens = (CLS_ID, *d, SEP_ID, *q, SEP_ID, *o, SEP_ID)
    segments = (
        (SEG_DESCRIPTION,) * (len(d) + 2)
        + (SEG_QUERY,) * (len(q) + 1)
        + (SEG_OPTION,) * (len(o) + 1)
    )
    return TokenSequence(tokens=tokens, segments=segments)


def assemble_query_sequence(query: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """[CLS] query [SEP], for query-only reading."""
    q = tokenize(query, vocab)
    if len(q) + 2 > max_len:
        raise SequenceOverflowError(f"query ({len(q)}) tokens cannot fit in max_len={max_len}")
    tokens = (CLS_ID, *q, SEP_ID)
    return TokenSequence(tokens=tokens, segments=(SEG_QUERY,) * len(tokens))


def load_corpus(path: str) -> list[AnnotatedText]:
    """Read a line-delimited JSON corpus (text + mention spans, optional gold)."""
    texts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                mentions = tuple(
                    Mention(
                        start=int(m["start"]),
                        end=int(m["end"]),
                        surface=str(m["surface"]),
                        gold=None if m.get("gold") is None else str(m["gold"]),
                    )
                    for m in rec.get("mentions", [])
                )
                texts.append(AnnotatedText(text=str(rec["text"]), mentions=mentions))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, InputFormatError) as exc:
                raise InputFormatError(f"{path}:{lineno}: bad corpus record: {exc}") from exc
    return texts


def save_corpus(texts: Sequence[AnnotatedText], path: str, kinds: Sequence[str] | None = None) -> None:
    """Write a corpus file; ``kinds`` adds an informational per-text tag."""
    if kinds is not None and len(kinds) != len(texts):
        raise ValueError("kinds must align with texts")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, t in enumerate(texts):
            rec: dict = {
                "text": t.text,
                "mentions": [
                    {"start": m.start, "end": m.end, "surface": m.surface}
                    | ({"gold": m.gold} if m.gold is not None else {})
                    for m in t.mentions
                ],
            }
            if kinds is not None:
                rec["kind"] = kinds[i]
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


__all__ = [
    "PAD", "UNK", "CLS", "SEP", "MASK",
    "PAD_ID", "UNK_ID", "CLS_ID", "SEP_ID", "MASK_ID",
    "SEG_DESCRIPTION", "SEG_QUERY", "SEG_OPTION",
    "Vocabulary", "Mention", "AnnotatedText", "TokenSequence",
    "split_tokens", "tokenize", "detokenize",
    "build_query", "update_query",
    "assemble_option_sequence", "assemble_query_sequence",
    "load_corpus", "save_corpus", "NIL",
]
