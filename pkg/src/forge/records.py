"""Bitext record types, the line-delimited record codec, and tokenization.

The interchange format between all pipeline stages is UTF-8 JSONL with
exactly the keys ``src, trg, src_line, tgt_line`` per object (extra keys
are preserved on round-trip). ``seq`` is the record's ordinal position in
the input stream and is assigned at read time, never serialized.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Iterator, TextIO

import regex as _regex

from .errors import MalformedLine

REQUIRED_KEYS = ("src", "trg", "src_line", "tgt_line")

# Languages written without inter-word spaces: tokenized per grapheme
# cluster instead of per whitespace run. Extendable via config override.
CHARACTER_SPLIT_LANGS = frozenset({"zh", "ja", "th"})

_GRAPHEME = _regex.compile(r"\X")


class TokenizationMode(Enum):
    WHITESPACE = "whitespace"
    PER_CHARACTER = "per_character"


def is_lang_code(code: Any) -> bool:
    """True for a lowercase ASCII language tag of length 2-3."""
    return (
        isinstance(code, str)
        and 2 <= len(code) <= 3
        and all("a" <= c <= "z" for c in code)
    )


@dataclass
class ParallelRecord:
    """One bitext sample: a language pair plus its source/target lines."""

    src: str
    trg: str
    src_line: str
    tgt_line: str
    seq: int = 0
    extra: dict[str, Any] = field(default_factory=dict)

    def lang_pair(self) -> tuple[str, str]:
        return (self.src, self.trg)


@dataclass
class InstructionSample:
    """A record wrapped in a task instruction; response is the target line."""

    instruction: str
    response: str
    src: str
    trg: str
    template_id: int

    def to_json(self) -> str:
        obj = {
            "instruction": self.instruction,
            "response": self.response,
            "meta": {"src": self.src, "trg": self.trg, "template_id": self.template_id},
        }
        return json.dumps(obj, ensure_ascii=False)


def _parse_line(line: str, line_no: int) -> ParallelRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise MalformedLine(line_no, f"invalid JSON ({e.msg})") from e
    if not isinstance(obj, dict):
        raise MalformedLine(line_no, "not a JSON object")
    for key in REQUIRED_KEYS:
        if key not in obj:
            raise MalformedLine(line_no, f"missing key {key!r}")
    src, trg, src_line, tgt_line = (obj[k] for k in REQUIRED_KEYS)
    if not is_lang_code(src) or not is_lang_code(trg):
        raise MalformedLine(line_no, "invalid language code")
    if src == trg:
        raise MalformedLine(line_no, "src == trg")
    if not isinstance(src_line, str) or not isinstance(tgt_line, str):
        raise MalformedLine(line_no, "src_line/tgt_line must be strings")
    extra = {k: v for k, v in obj.items() if k not in REQUIRED_KEYS}
    return ParallelRecord(src, trg, src_line, tgt_line, extra=extra)


def read_records(
    stream: Iterable[str] | TextIO,
    on_malformed: Callable[[MalformedLine], None] | None = None,
) -> Iterator[ParallelRecord]:
    """Yield records from a JSONL stream in input order, seq = 0,1,2,...

    Blank lines are skipped. A line that fails to parse raises
    MalformedLine unless ``on_malformed`` is given, in which case the
    handler is called and the line is dropped (seq numbering is not
    consumed by dropped lines).
    """
    seq = 0
    for line_no, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            record = _parse_line(line, line_no)
        except MalformedLine as err:
            if on_malformed is None:
                raise
            on_malformed(err)
            continue
        record.seq = seq
        seq += 1
        yield record


def record_to_json(record: ParallelRecord) -> str:
    obj = {
        "src": record.src,
        "trg": record.trg,
        "src_line": record.src_line,
        "tgt_line": record.tgt_line,
    }
    obj.update(record.extra)
    return json.dumps(obj, ensure_ascii=False)


def write_records(records: Iterable[ParallelRecord], stream: TextIO) -> int:
    """Write records as JSONL; inverse of read_records. Returns line count."""
    n = 0
    for record in records:
        stream.write(record_to_json(record) + "\n")
        n += 1
    return n


def tokenization_mode(
    lang: str, char_split_langs: frozenset[str] | set[str] | None = None
) -> TokenizationMode:
    """Pick the tokenization mode for a language (unknown -> whitespace)."""
    table = CHARACTER_SPLIT_LANGS if char_split_langs is None else char_split_langs
    if lang in table:
        return TokenizationMode.PER_CHARACTER
    return TokenizationMode.WHITESPACE


def tokenize(text: str, mode: TokenizationMode) -> list[str]:
    """Split text into tokens; never yields empty or whitespace tokens.

    Whitespace mode splits on runs of unicode whitespace. Per-character
    mode yields one token per extended grapheme cluster so combining
    marks stay attached to their base character.
    """
    if mode is TokenizationMode.WHITESPACE:
        return text.split()
    return [g for g in _GRAPHEME.findall(text) if not g.isspace()]
