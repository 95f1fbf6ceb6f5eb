"""
Token vocabulary of the policy network and the serializers built on it.

Layout of the vocabulary (ids are stable, the EOS id is 2):

    0 <pad>  1 <bos>  2 <eos>  3 <sep>  4 <pass>  5 <fail>  6 <err>  7 <in>  8 <out>  9 <fb>
    10-19  opcodes (PUSH ADD SUB MUL DUP SWAP DROP OVER REPEAT END)
    20     "-" (sign)
    21-30  digits 0-9

Numbers are an optional sign followed by their decimal digits, one token each.
"""

import logging
from collections.abc import Iterable, Sequence

from ..errors import VocabularyError
from ..models.dsl import Opcode, Program, RewardReport, TaskInstance, TestOutcome

logger = logging.getLogger(__name__)

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
SEP = "<sep>"
PASS = "<pass>"
FAIL = "<fail>"
ERR = "<err>"
IN = "<in>"
OUT = "<out>"
FB = "<fb>"
SIGN = "-"

SPECIAL_TOKENS = (PAD, BOS, EOS, SEP, PASS, FAIL, ERR, IN, OUT, FB)
DEFAULT_TOKENS = (
    *SPECIAL_TOKENS,
    *(op.value for op in Opcode),
    SIGN,
    *(str(d) for d in range(10)),
)

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
SEP_ID = 3

_OUTCOME_TOKEN = {TestOutcome.PASS: PASS, TestOutcome.FAIL: FAIL, TestOutcome.ERROR: ERR}


class Vocabulary:
    """Bijective token <-> id table"""

    def __init__(self, tokens: Sequence[str] = DEFAULT_TOKENS):
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        if tuple(tokens[:4]) != (PAD, BOS, EOS, SEP):
            raise VocabularyError("vocabulary must start with <pad> <bos> <eos> <sep>")
        self.tokens = tuple(tokens)
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __hash__(self) -> int:
        return hash(self.tokens)

    @property
    def eos_id(self) -> int:
        return EOS_ID

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise VocabularyError(f"unknown token {token!r}") from None

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise VocabularyError(f"token id {token_id} outside vocabulary of size {len(self)}")
        return self.tokens[token_id]

    def check_ids(self, ids: Iterable[int]) -> None:
        size = len(self.tokens)
        for i in ids:
            if not 0 <= i < size:
                raise VocabularyError(f"token id {i} outside vocabulary of size {size}")

    # -- serializers -------------------------------------------------------

    def number(self, value: int) -> list[int]:
        out = [self._ids[SIGN]] if value < 0 else []
        out.extend(self._ids[d] for d in str(abs(value)))
        return out

    def program(self, program: Program) -> list[int]:
        """Program tokens without a trailing EOS"""
        out: list[int] = []
        for ins in program.instructions:
            out.append(self._ids[ins.op.value])
            if ins.arg is not None:
                out.extend(self.number(ins.arg))
        return out

    def tests(self, task: TaskInstance) -> list[int]:
        out: list[int] = []
        for test in task.tests:
            for value in test.input:
                out.append(self._ids[IN])
                out.extend(self.number(value))
            out.append(self._ids[OUT])
            out.extend(self.number(test.expected))
        return out

    def feedback(self, report: RewardReport) -> list[int]:
        """<fb>, one marker per test, then the pass count"""
        out = [self._ids[FB]]
        out.extend(self._ids[_OUTCOME_TOKEN[o]] for o in report.per_test)
        out.extend(self.number(report.n_pass))
        return out

    def render(self, ids: Iterable[int]) -> str:
        """
        Render generated ids back to program text.

        Stops at EOS. Sign and digit tokens are merged into one word; every
        other token is its own word, so markers inside a thought render
        literally and fail to parse.
        """
        words: list[str] = []
        numeric = False
        for i in ids:
            if i == EOS_ID:
                break
            tok = self.token(i)
            is_num = tok == SIGN or tok.isdigit()
            if is_num and numeric and tok != SIGN:
                words[-1] += tok
            else:
                words.append(tok)
            numeric = is_num
        return " ".join(words)

    def header(self) -> list[str]:
        return list(self.tokens)
