"""Vocabulary, coordinate quantization, dialog templates and box parsing.

Token id layout is fixed: six control tokens, then the 1001 coordinate
tokens ``COORD(0..1000)``, then the text lexicon in sorted order. Coordinate
tokens render as three-decimal numbers (``COORD(123)`` -> ``"0.123"``).
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from .geometry import BoxN

N_BINS = 1001
MAX_RESPONSE_LEN = 64

PAD, BOS, EOS = "<pad>", "<s>", "</s>"
BOX_OPEN, BOX_CLOSE, SEP = "⟨box⟩", "⟨/box⟩", ","
CONTROL_TOKENS = (PAD, BOS, EOS, BOX_OPEN, BOX_CLOSE, SEP)

TASKS = ("detection", "affordance")

# (user prompt, response prefix) per task and variant; "{t}" is the target phrase.
TEMPLATES = {
    "detection": (
        ("Show me the {t}.", "response: Here is the {t}."),
        ("Where is the {t}?", "response: Here is the {t}."),
        ("Where is the location of the {t}?", "response: Here is the location of the {t}."),
    ),
    "affordance": (
        ("Hand me the {t}.", "response: Sure. I will hand you the {t}."),
        ("Pass me the {t}.", "response: Alright, I will pick up the {t} for you."),
        ("Give me the {t}.", "response: Okay, I will give you the {t}."),
    ),
}

SYSTEM_PROMPTS = {
    "simple": "A chat between a human and an AI that understands visuals. Follow instructions.",
    "concrete": (
        "A chat between a human and an AI that understands visuals. In images, [x, y] "
        "denotes points: top-left is [0, 0], bottom-right is [1, 1]. Increasing x moves "
        "right; y moves down. A bounding box is defined as [x1, y1, x2, y2] where "
        "(x1, y1) is the top-left corner and (x2, y2) is the bottom-right corner. "
        "Follow instructions."
    ),
}

EXCEPTION_REASONS = (
    "NoBox", "UnterminatedBox", "MultipleBoxes", "WrongArity", "NonCoordToken", "OrderViolation",
)

_TOKEN_RE = re.compile(r"⟨/?box⟩|[01]\.\d{3}(?![\w.])|[A-Za-z0-9]+|[^\sA-Za-z0-9]")
_COORD_RE = re.compile(r"[01]\.\d{3}")
_NO_SPACE_BEFORE = {".", ",", "?", ":", ";", "]", ")", "-"}
_NO_SPACE_AFTER = {"[", "(", "-"}


class CodecError(ValueError):
    pass


class CoordOutOfRange(CodecError):
    pass


class BinOutOfRange(CodecError):
    pass


class UnknownToken(CodecError):
    pass


def quantize(v: float) -> int:
    """Map a coordinate in ``[0, 1]`` to its bin, rounding half away from zero."""
    if not (0.0 <= v <= 1.0):
        raise CoordOutOfRange(f"coordinate {v!r} outside [0, 1]")
    return min(int(v * 1000.0 + 0.5), N_BINS - 1)


def dequantize(k: int) -> float:
    if not (0 <= k <= N_BINS - 1) or int(k) != k:
        raise BinOutOfRange(f"bin {k!r} outside 0..{N_BINS - 1}")
    return int(k) / 1000.0


def quantize_box(b: BoxN) -> BoxN:
    return BoxN(*(dequantize(quantize(v)) for v in b.to_list()))


def split_words(text: str) -> list[str]:
    """Split text into surface tokens (words, punctuation, box markers, coordinates)."""
    return _TOKEN_RE.findall(text)


def join_words(words: Sequence[str]) -> str:
    out = []
    for i, w in enumerate(words):
        if i > 0 and w not in _NO_SPACE_BEFORE and words[i - 1] not in _NO_SPACE_AFTER:
            out.append(" ")
        out.append(w)
    return "".join(out)


def _lexicon_sources() -> list[str]:
    from .scenegen import all_phrases  # scene lexicon lives with the generator

    texts = list(SYSTEM_PROMPTS.values())
    for task in TASKS:
        for prompt, response in TEMPLATES[task]:
            texts.append(prompt.replace("{t}", ""))
            texts.append(response.replace("{t}", ""))
    texts.extend(all_phrases())
    return texts


class Vocab:
    """Immutable token <-> id mapping."""

    def __init__(self, text_tokens: Iterable[str]):
        words = sorted(set(text_tokens) - set(CONTROL_TOKENS))
        for w in words:
            if _COORD_RE.fullmatch(w):
                raise CodecError(f"text token {w!r} collides with coordinate surface form")
        self._tokens = (list(CONTROL_TOKENS)
                        + [f"{k / 1000:.3f}" for k in range(N_BINS)]
                        + words)
        self._index = {t: i for i, t in enumerate(self._tokens)}
        self.pad_id = self._index[PAD]
        self.bos_id = self._index[BOS]
        self.eos_id = self._index[EOS]
        self.box_open_id = self._index[BOX_OPEN]
        self.box_close_id = self._index[BOX_CLOSE]
        self.sep_id = self._index[SEP]
        self.coord_offset = len(CONTROL_TOKENS)

    @classmethod
    def default(cls) -> "Vocab":
        words = []
        for text in _lexicon_sources():
            words.extend(split_words(text))
        return cls(words)

    def __len__(self) -> int:
        return len(self._tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._tokens == other._tokens

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(self._tokens)

    def coord_id(self, k: int) -> int:
        if not 0 <= k < N_BINS:
            raise BinOutOfRange(f"bin {k!r} outside 0..{N_BINS - 1}")
        return self.coord_offset + k

    def is_coord(self, tid: int) -> bool:
        return self.coord_offset <= tid < self.coord_offset + N_BINS

    def coord_bin(self, tid: int) -> int:
        return tid - self.coord_offset

    def token_id(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise UnknownToken(f"token {word!r} is not in the vocabulary") from None

    def encode(self, text: str) -> list[int]:
        return [self.token_id(w) for w in split_words(text)]

    def decode(self, ids: Sequence[int]) -> str:
        return join_words([self._tokens[i] if 0 <= i < len(self) else f"<unk:{i}>" for i in ids])

    def dump(self) -> str:
        return "".join(t + "\n" for t in self._tokens)


def encode_box(b: BoxN, vocab: Vocab) -> list[int]:
    q = [vocab.coord_id(quantize(v)) for v in b.to_list()]
    return [vocab.box_open_id, q[0], vocab.sep_id, q[1], vocab.sep_id, q[2], vocab.sep_id, q[3],
            vocab.box_close_id]


@dataclass(frozen=True)
class DialogSample:
    sample_id: int
    scene_id: int
    object_index: int
    task: str
    variant: int
    phrase: str
    gold: BoxN
    prompt: tuple[int, ...]
    response: tuple[int, ...]


def render_dialog(task: str, variant: int, phrase: str, gold: BoxN, vocab: Vocab,
                  sample_id: int = 0, scene_id: int = 0, object_index: int = 0) -> DialogSample:
    """Instantiate one template pair.

    The response token sequence is ``BOS, <response text>, <box>, ".", EOS``.
    """
    if task not in TEMPLATES:
        raise ValueError(f"unknown task {task!r}")
    prompt_t, response_t = TEMPLATES[task][variant]
    prompt_ids = vocab.encode(prompt_t.format(t=phrase))
    response_ids = ([vocab.bos_id] + vocab.encode(response_t.format(t=phrase))
                    + encode_box(gold, vocab) + [vocab.token_id("."), vocab.eos_id])
    return DialogSample(sample_id, scene_id, object_index, task, variant, phrase, gold,
                        tuple(prompt_ids), tuple(response_ids))


def prompt_text(sample: DialogSample, vocab: Vocab) -> str:
    return vocab.decode(sample.prompt)


def response_text(ids: Sequence[int], vocab: Vocab) -> str:
    """Detokenize a response, dropping BOS/EOS/PAD."""
    drop = {vocab.bos_id, vocab.eos_id, vocab.pad_id}
    return vocab.decode([i for i in ids if i not in drop])


@dataclass(frozen=True)
class BoxException:
    reason: str

    def __post_init__(self):
        if self.reason not in EXCEPTION_REASONS:
            raise ValueError(f"unknown exception reason {self.reason!r}")


def parse_box(seq: Sequence[int], vocab: Vocab) -> BoxN | BoxException:
    """Decode the single box of a response, or classify why there is none.

    Checks run in a fixed order so each sequence maps to exactly one outcome:
    no ``⟨box⟩`` -> NoBox; more than one ``⟨box⟩`` or ``⟨/box⟩`` -> MultipleBoxes;
    no closing marker after the opener -> UnterminatedBox; a span token that is
    neither a coordinate nor a separator -> NonCoordToken; anything other than
    ``C , C , C , C`` -> WrongArity; ``x2 < x1`` or ``y2 < y1`` -> OrderViolation.
    """
    seq = list(seq)
    opens = [i for i, t in enumerate(seq) if t == vocab.box_open_id]
    closes = [i for i, t in enumerate(seq) if t == vocab.box_close_id]
    if not opens:
        return BoxException("NoBox")
    if len(opens) > 1 or len(closes) > 1:
        return BoxException("MultipleBoxes")
    if not closes or closes[0] < opens[0]:
        return BoxException("UnterminatedBox")
    span = seq[opens[0] + 1:closes[0]]
    if any(not (vocab.is_coord(t) or t == vocab.sep_id) for t in span):
        return BoxException("NonCoordToken")
    if len(span) != 7 or any(span[i] != vocab.sep_id for i in (1, 3, 5)) \
            or not all(vocab.is_coord(span[i]) for i in (0, 2, 4, 6)):
        return BoxException("WrongArity")
    x1, y1, x2, y2 = (dequantize(vocab.coord_bin(span[i])) for i in (0, 2, 4, 6))
    if x2 < x1 or y2 < y1:
        return BoxException("OrderViolation")
    return BoxN(x1, y1, x2, y2)
