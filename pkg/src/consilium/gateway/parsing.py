"""Tolerant extraction of structured payloads from free-form model text."""

from __future__ import annotations

import json
import re
from typing import Optional

from ..errors import ParseError, ScoreRangeError

_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def _balanced_spans(text: str, open_ch: str, close_ch: str):
    """Yield candidate substrings with balanced braces, string-aware."""
    depth = 0
    start = -1
    in_string = False
    escaped = False
    for i, ch in enumerate(text):
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"' and depth > 0:
            in_string = True
        elif ch == open_ch:
            if depth == 0:
                start = i
            depth += 1
        elif ch == close_ch and depth > 0:
            depth -= 1
            if depth == 0:
                yield text[start : i + 1]


def extract_json_object(text: str) -> dict:
    """Return the first parseable JSON object embedded in the text.

    Fenced code blocks are tried first, then balanced-brace spans in the
    raw text, so prose around or inside markdown fences does not matter.
    """
    candidates: list[str] = []
    for block in _FENCE_RE.findall(text):
        candidates.append(block.strip())
    candidates.append(text.strip())
    for candidate in candidates:
        for span in _balanced_spans(candidate, "{", "}"):
            try:
                obj = json.loads(span)
            except json.JSONDecodeError:
                continue
            if isinstance(obj, dict):
                return obj
    raise ParseError("no JSON object found in model output")


def extract_json_array(text: str) -> list:
    """Return the first parseable JSON array embedded in the text."""
    candidates: list[str] = []
    for block in _FENCE_RE.findall(text):
        candidates.append(block.strip())
    candidates.append(text.strip())
    for candidate in candidates:
        for span in _balanced_spans(candidate, "[", "]"):
            try:
                arr = json.loads(span)
            except json.JSONDecodeError:
                continue
            if isinstance(arr, list):
                return arr
    raise ParseError("no JSON array found in model output")


def extract_tag_block(text: str, tag: str) -> Optional[str]:
    """Content of the last <tag>...</tag> pair, stripped; None if absent."""
    matches = re.findall(
        rf"<{re.escape(tag)}>(.*?)</{re.escape(tag)}>", text, re.DOTALL | re.IGNORECASE
    )
    if not matches:
        return None
    return matches[-1].strip()


def normalize_item(text: str) -> str:
    """Canonical form for list-item comparison: strip, collapse spaces, casefold."""
    return re.sub(r"\s+", " ", text.strip()).casefold()


_NUMBERED_RE = re.compile(r"^\s*(\d{1,3})[.):]\s+(.*\S)\s*$")
_BRACKET_RE = re.compile(r"^\s*\[(\d{1,3})\]\s+(.*\S)\s*$")
_BULLET_RE = re.compile(r"^\s*[-*•]\s+(.*\S)\s*$")


def parse_numbered_items(text: str) -> list[str]:
    """Parse '1. foo' / '2) bar' / '[3] baz' lines (bullets accepted) in order."""
    items: list[str] = []
    for line in text.splitlines():
        for pattern in (_NUMBERED_RE, _BRACKET_RE):
            m = pattern.match(line)
            if m:
                items.append(m.group(2).strip())
                break
        else:
            m = _BULLET_RE.match(line)
            if m:
                items.append(m.group(1).strip())
    return items


def headline(item: str) -> str:
    """Leading claim of a list item: the text before the first colon.

    Items follow the '[Name]: [rationale]' convention; square brackets around
    the name are shed so 'X' and '[X]' compare equal.
    """
    head = item.split(":", 1)[0].strip()
    if head.startswith("[") and head.endswith("]"):
        head = head[1:-1].strip()
    return head


def parse_ranked_list(text: str, tag: str = "top10", expect: int = 10) -> list[str]:
    """Ranked differential list from a tag block, exactly `expect` unique items."""
    block = extract_tag_block(text, tag)
    if block is None:
        raise ParseError(f"missing <{tag}> block in final decision")
    items = parse_numbered_items(block)
    if not items:
        # Tolerate one-item-per-line without numbering.
        items = [ln.strip() for ln in block.splitlines() if ln.strip()]
    seen: set[str] = set()
    unique: list[str] = []
    for item in items:
        key = normalize_item(item)
        if key in seen:
            continue
        seen.add(key)
        unique.append(item)
    if len(unique) != expect:
        raise ParseError(
            f"<{tag}> block must contain exactly {expect} distinct items, "
            f"found {len(unique)}"
        )
    return unique


def parse_final_answer(text: str) -> str:
    """Math-style verdict: <final_answer> content, 'N/A' meaning abstention."""
    block = extract_tag_block(text, "final_answer")
    if block is None:
        raise ParseError("missing <final_answer> block in final decision")
    answer = block.strip()
    if answer.startswith("- "):
        answer = answer[2:].strip()
    if not answer:
        raise ParseError("<final_answer> block is empty")
    return answer


def parse_yes_no(text: str) -> bool:
    """<answer>Yes|No</answer> verdict as a boolean."""
    block = extract_tag_block(text, "answer")
    if block is None:
        raise ParseError("missing <answer> block in yes/no verdict")
    token = block.strip().rstrip(".").casefold()
    if token == "yes":
        return True
    if token == "no":
        return False
    raise ParseError(f"verdict must be Yes or No, got {block.strip()!r}")


def parse_answer_letter(text: str) -> Optional[str]:
    """Multiple-choice reply in the form 'Answer: $LETTER'; None if absent."""
    m = re.search(r"Answer:\s*\$?([A-Za-z])\b", text)
    if not m:
        return None
    return m.group(1).upper()


def parse_judge_score(text: str, max_score: int = 5) -> float:
    """Normalized judge verdict in [0, 1] from a JSON integer score field.

    Accepts {"score": k} or {"global_score": k} with k in 0..max_score;
    falls back to a bare integer when the reply is just a number.
    """
    raw: Optional[float] = None
    try:
        obj = extract_json_object(text)
    except ParseError:
        m = re.search(r"-?\d+(?:\.\d+)?", text)
        if not m:
            raise ParseError("judge reply contains no score") from None
        raw = float(m.group(0))
    else:
        for key in ("score", "global_score", "rating"):
            if key in obj:
                try:
                    raw = float(obj[key])
                except (TypeError, ValueError):
                    raise ParseError(f"judge field {key!r} is not numeric") from None
                break
        if raw is None:
            raise ParseError("judge JSON lacks a score field")
    if raw < 0 or raw > max_score:
        raise ScoreRangeError(f"judge score {raw} outside [0, {max_score}]")
    return raw / max_score


def parse_match_verdict(text: str) -> Optional[int]:
    """<answer>No</answer> -> None, <answer>k</answer> with 1<=k -> k."""
    block = extract_tag_block(text, "answer")
    if block is None:
        raise ParseError("missing <answer> block in match verdict")
    token = block.strip().rstrip(".")
    if token.casefold() in ("no", "none", "n/a"):
        return None
    m = re.fullmatch(r"\d{1,3}", token)
    if not m:
        raise ParseError(f"match verdict must be 'No' or a rank, got {token!r}")
    rank = int(token)
    if rank < 1:
        raise ParseError(f"match rank must be >= 1, got {rank}")
    return rank
