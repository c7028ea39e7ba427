"""Data generators: the curriculum copy task and a character stream.

Copy task layout for a string of length L (symbols are indices into
COPY_SYMBOLS = ['#', '0', '1', '-']):

    inputs:  #  b_1 .. b_L  -  ...  -      (L+1 trailing blanks)
    targets: -  ...      -  #  b_1 .. b_L
    mask:    0  ...      0  1  1  ...  1   (loss on the last L+1 positions)

so the whole sample has length 2(L+1) and bits/char is averaged over the
masked positions only.
"""

from dataclasses import dataclass, field
from importlib import resources

import numpy as np

COPY_SYMBOLS = ("#", "0", "1", "-")
COPY_MARKER, COPY_ZERO, COPY_ONE, COPY_BLANK = range(4)
COPY_VOCAB = len(COPY_SYMBOLS)


@dataclass
class CopySample:
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    length: int


@dataclass
class CopyCurriculum:
    """Raises the string length T when the recent windowed error is low.

    update() records one finished sequence's bits/char; once `window`
    errors have accumulated and their mean is below `threshold`, T goes up
    by one and the window starts over. Otherwise the window slides.
    """

    T: int = 1
    threshold: float = 0.15
    window: int = 100
    errors: list = field(default_factory=list)

    def update(self, error):
        if error < 0:
            raise ValueError("error must be nonnegative")
        self.errors.append(float(error))
        if len(self.errors) > self.window:
            self.errors.pop(0)
        if len(self.errors) == self.window:
            if float(np.mean(self.errors)) < self.threshold:
                self.T += 1
                self.errors.clear()
                return True
        return False


def curriculum_update(curr, error):
    """Function form of CopyCurriculum.update; mutates and returns curr."""
    curr.update(error)
    return curr


def gen_copy_sample(t, rng):
    length = int(rng.integers(max(1, t - 5), t + 1))
    bits = rng.integers(0, 2, size=length) + COPY_ZERO
    total = 2 * (length + 1)
    inputs = np.full(total, COPY_BLANK, dtype=np.int64)
    targets = np.full(total, COPY_BLANK, dtype=np.int64)
    inputs[0] = COPY_MARKER
    inputs[1:length + 1] = bits
    targets[length + 1] = COPY_MARKER
    targets[length + 2:] = bits
    mask = np.zeros(total, dtype=bool)
    mask[length + 1:] = True
    return CopySample(inputs=inputs, targets=targets, mask=mask, length=length)


def gen_copy_batch(curr, batch, rng):
    """batch independent samples at the curriculum's current T."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    return [gen_copy_sample(curr.T, rng) for _ in range(batch)]


class Corpus:
    """A character corpus with a vocabulary built from its distinct symbols."""

    def __init__(self, text):
        if len(text) < 2:
            raise ValueError("corpus must contain at least 2 characters")
        self.text = text
        self.symbols = sorted(set(text))
        self.index = {c: i for i, c in enumerate(self.symbols)}
        self.encoded = np.array([self.index[c] for c in text], dtype=np.int64)

    @property
    def vocab(self):
        return len(self.symbols)

    def decode(self, ids):
        return "".join(self.symbols[i] for i in ids)


def load_corpus(path):
    with open(path, "r", encoding="utf-8") as fh:
        return Corpus(fh.read())


def bundled_corpus():
    """The packaged public-domain text sample; keeps everything offline."""
    text = resources.files("kfrtrl").joinpath("data/sample.txt").read_text(
        encoding="utf-8")
    return Corpus(text)


def corpus_stream(corpus, batch, rng):
    """batch infinite (input, target) streams over the corpus.

    Each lane walks the text from its own random offset, wrapping at the
    end; the target is always the next character.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    n = len(corpus.encoded)
    offsets = [int(rng.integers(0, n)) for _ in range(batch)]

    def lane(start):
        enc = corpus.encoded
        i = start
        while True:
            yield int(enc[i]), int(enc[(i + 1) % n])
            i = (i + 1) % n

    return [lane(o) for o in offsets]
