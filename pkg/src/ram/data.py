"""bAbI-format story parsing, vocabulary construction, synthetic data.

A Story is an ordered stream of sentence segments plus the questions asked
along the way. Tokens are kept as lowercase strings until a Vocabulary
encodes them; answers are single class strings (comma-joined lists stay
one class).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "PAD_ID",
    "MASK_ID",
    "CLS_ID",
    "UNK_ID",
    "RESERVED_TOKENS",
    "ParseError",
    "Question",
    "Story",
    "QAExample",
    "Vocabulary",
    "AnswerInventory",
    "tokenize",
    "parse_babi",
    "to_babi_text",
    "build_vocab",
    "generate_task1",
    "qa_examples",
    "find_task_file",
    "load_babi_task",
]

PAD_ID = 0
MASK_ID = 1
CLS_ID = 2
UNK_ID = 3
RESERVED_TOKENS = ("<pad>", "<mask>", "<cls>", "<unk>")

_TOKEN_RE = re.compile(r"[\w']+|[^\w\s]")


class ParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def tokenize(text: str) -> list[str]:
    """Lowercase word/punctuation tokens: 'Mary moved.' -> ['mary','moved','.']"""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Question:
    tokens: tuple[str, ...]
    answer: str
    supports: tuple[int, ...] = ()
    # number of segments seen before this question was asked
    after_segment: int = 0


@dataclass
class Story:
    segments: list[list[str]] = field(default_factory=list)
    questions: list[Question] = field(default_factory=list)


@dataclass(frozen=True)
class QAExample:
    """One question with exactly the segment stream that precedes it."""

    segments: tuple[tuple[str, ...], ...]
    question: tuple[str, ...]
    answer: str
    supports: tuple[int, ...] = ()


def parse_babi(text: str) -> list[Story]:
    """Parse the standard numbered-line format.

    Lines are `ID tok tok ...` for statements and
    `ID tok ... ?\\tanswer[\\tsupport ids]` for questions. IDs count every
    line and must run 1, 2, 3, ... within a story; an ID of 1 starts a new
    story. Question lines do not become segments.
    """
    stories: list[Story] = []
    current: Story | None = None
    segment_line_ids: set[int] = set()
    expected_id = 1
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        head, _, rest = line.partition(" ")
        try:
            line_id = int(head)
        except ValueError:
            raise ParseError(line_no, f"expected integer line id, got {head!r}") from None
        if line_id == 1:
            if current is not None:
                stories.append(current)
            current = Story()
            segment_line_ids = set()
            expected_id = 1
        if current is None or line_id != expected_id:
            raise ParseError(line_no, f"line id {line_id} does not continue {expected_id - 1} and does not reset to 1")
        expected_id += 1
        if "\t" in rest:
            parts = rest.split("\t")
            if len(parts) not in (2, 3):
                raise ParseError(line_no, f"question line has {len(parts)} tab fields, expected 2 or 3")
            q_tokens = tuple(tokenize(parts[0]))
            if not q_tokens:
                raise ParseError(line_no, "empty question")
            answer = parts[1].strip().lower()
            if not answer:
                raise ParseError(line_no, "empty answer")
            supports: tuple[int, ...] = ()
            if len(parts) == 3 and parts[2].strip():
                try:
                    supports = tuple(int(s) for s in parts[2].split())
                except ValueError:
                    raise ParseError(line_no, f"bad support ids {parts[2]!r}") from None
                for s in supports:
                    if s not in segment_line_ids:
                        raise ParseError(line_no, f"support id {s} is not an earlier statement line")
            current.questions.append(
                Question(q_tokens, answer, supports, after_segment=len(current.segments))
            )
        else:
            tokens = tokenize(rest)
            if not tokens:
                raise ParseError(line_no, "empty statement")
            segment_line_ids.add(line_id)
            current.segments.append(tokens)
    if current is not None:
        stories.append(current)
    return stories


def to_babi_text(stories: Iterable[Story]) -> str:
    """Serialize stories back to the numbered-line format (parse fixed point)."""
    lines: list[str] = []
    for story in stories:
        by_prefix: dict[int, list[Question]] = {}
        for q in story.questions:
            by_prefix.setdefault(q.after_segment, []).append(q)
        line_id = 1

        def emit_questions(prefix: int):
            nonlocal line_id
            for q in by_prefix.get(prefix, ()):
                fields = [f"{line_id} {' '.join(q.tokens)}", q.answer]
                if q.supports:
                    fields.append(" ".join(str(s) for s in q.supports))
                lines.append("\t".join(fields))
                line_id += 1

        emit_questions(0)
        for i, seg in enumerate(story.segments):
            lines.append(f"{line_id} {' '.join(seg)}")
            line_id += 1
            emit_questions(i + 1)
    return "\n".join(lines) + ("\n" if lines else "")


class Vocabulary:
    """token <-> id bijection with reserved PAD/MASK/CLS/UNK ids."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._id_to_token: list[str] = list(RESERVED_TOKENS)
        self._token_to_id: dict[str, int] = {t: i for i, t in enumerate(self._id_to_token)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        tid = self._token_to_id.get(token)
        if tid is None:
            tid = len(self._id_to_token)
            self._token_to_id[token] = tid
            self._id_to_token.append(token)
        return tid

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, tid: int) -> str:
        return self._id_to_token[tid]

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.id_of(t) for t in tokens], dtype=np.intp)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._id_to_token[i] for i in ids]

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def __len__(self) -> int:
        return len(self._id_to_token)

    @property
    def tokens(self) -> list[str]:
        return list(self._id_to_token)


class AnswerInventory:
    """answer string <-> class id, ordered by first occurrence in training.

    Every answer string is also a vocabulary token, so the classifier can
    share the embedding matrix; `token_ids[c]` is the vocabulary row
    backing class c.
    """

    def __init__(self, answers: Iterable[str], vocab: Vocabulary):
        self._answers: list[str] = []
        self._class_of: dict[str, int] = {}
        for a in answers:
            if a not in self._class_of:
                self._class_of[a] = len(self._answers)
                self._answers.append(a)
        self.token_ids = np.array([vocab.id_of(a) for a in self._answers], dtype=np.intp)

    def class_of(self, answer: str) -> int:
        try:
            return self._class_of[answer]
        except KeyError:
            raise ValueError(f"answer {answer!r} not in training inventory") from None

    def answer_of(self, class_id: int) -> str:
        return self._answers[class_id]

    def __contains__(self, answer: str) -> bool:
        return answer in self._class_of

    def __len__(self) -> int:
        return len(self._answers)

    @property
    def answers(self) -> list[str]:
        return list(self._answers)


def build_vocab(stories: Sequence[Story]) -> tuple[Vocabulary, AnswerInventory]:
    """Vocabulary + answer inventory from training stories, in reading order.

    Answer strings enter the vocabulary as single tokens so the output
    heads can reuse embedding rows.
    """
    if not stories:
        raise ValueError("build_vocab needs at least one story")
    vocab = Vocabulary()
    answers: list[str] = []
    for story in stories:
        for seg in story.segments:
            for tok in seg:
                vocab.add(tok)
        for q in story.questions:
            for tok in q.tokens:
                vocab.add(tok)
            vocab.add(q.answer)
            answers.append(q.answer)
    return vocab, AnswerInventory(answers, vocab)


# ---------------------------------------------------------------------------
# synthetic single-supporting-fact corpus

_PERSONS = ("mary", "john", "daniel", "sandra")
_LOCATIONS = ("bathroom", "hallway", "garden", "kitchen", "office", "bedroom")
_MOVES = (
    ("moved", "to", "the"),
    ("went", "to", "the"),
    ("journeyed", "to", "the"),
    ("travelled", "to", "the"),
    ("went", "back", "to", "the"),
)
_LINES_PER_STORY = 15
_QUESTION_EVERY = 3


def generate_task1(n_stories: int, seed: int = 0) -> list[Story]:
    """Synthetic where-is-person stories in the single-supporting-fact shape.

    Fifteen lines per story with a question every third line; the answer is
    always the queried person's most recent location and the support id is
    the line of that move. Deterministic for a given seed.
    """
    if n_stories < 1:
        raise ValueError("n_stories must be >= 1")
    rng = np.random.default_rng(seed)
    stories: list[Story] = []
    for _ in range(n_stories):
        story = Story()
        location: dict[str, str] = {}
        move_line: dict[str, int] = {}
        for line_id in range(1, _LINES_PER_STORY + 1):
            if line_id % _QUESTION_EVERY == 0:
                movers = sorted(location)
                person = movers[rng.integers(len(movers))]
                story.questions.append(
                    Question(
                        tokens=("where", "is", person, "?"),
                        answer=location[person],
                        supports=(move_line[person],),
                        after_segment=len(story.segments),
                    )
                )
            else:
                person = _PERSONS[rng.integers(len(_PERSONS))]
                here = location.get(person)
                choices = [loc for loc in _LOCATIONS if loc != here]
                place = choices[rng.integers(len(choices))]
                verb = _MOVES[rng.integers(len(_MOVES))]
                story.segments.append([person, *verb, place, "."])
                location[person] = place
                move_line[person] = line_id
        stories.append(story)
    return stories


def qa_examples(stories: Iterable[Story]) -> list[QAExample]:
    """Flatten stories into per-question examples over their preceding segments."""
    out: list[QAExample] = []
    for story in stories:
        for q in story.questions:
            out.append(
                QAExample(
                    segments=tuple(tuple(s) for s in story.segments[: q.after_segment]),
                    question=q.tokens,
                    answer=q.answer,
                    supports=q.supports,
                )
            )
    return out


def find_task_file(data_dir, task: int, split: str) -> Path:
    """Locate `qa<task>_*_<split>.txt` under a bAbI data directory."""
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory not found: {root}")
    matches = sorted(root.glob(f"qa{task}_*_{split}.txt"))
    if not matches:
        raise FileNotFoundError(f"no qa{task}_*_{split}.txt under {root}")
    if len(matches) > 1:
        raise FileNotFoundError(f"ambiguous task files under {root}: {[m.name for m in matches]}")
    return matches[0]


def load_babi_task(data_dir, task: int, split: str) -> list[Story]:
    path = find_task_file(data_dir, task, split)
    return parse_babi(path.read_text(encoding="utf-8"))
