"""Seeded synthetic prompt/story corpus with paragraph and ending structure.

Documents are built from a fixed pseudo-word lexicon grouped into topics.
Sentences walk a per-topic word chain with low branching (0.8/0.2), and
sentence starts follow a skewed distribution, so next-token distributions
are locally sharp: under nucleus sampling a small end-of-sequence
probability then falls outside the nucleus at ordinary positions. A
document's final paragraph ends with a closing phrase only with probability
``closing_prob``, closing phrases leak into earlier paragraphs as noise with
probability ``noise_prob``, and the paragraph count comes from a wide
distribution - so the ending is signalled statistically by content, and
precisely only by paragraph structure, which models without markers cannot
see.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import Document

_SYLLABLES = (
    "ba be bi bo bu da de di do du fa fe fi fo fu ga ge gi go gu "
    "ka ke ki ko ku la le li lo lu ma me mi mo mu na ne ni no nu "
    "pa pe pi po pu ra re ri ro ru sa se si so su ta te ti to tu "
    "va ve vi vo vu za ze zi zo zu"
).split()

FUNCTION_WORDS = ("an", "de", "el", "on", "um", "ik")
CLOSING_WORDS = ("fin", "ende", "sela", "moroz")

N_TOPICS = 8
WORDS_PER_TOPIC = 12


def _lexicon() -> tuple[tuple[str, ...], ...]:
    # deterministic pseudo-words, independent of the corpus seed
    rng = np.random.Generator(np.random.Philox(20240901))
    seen = set(FUNCTION_WORDS) | set(CLOSING_WORDS)
    topics = []
    for _ in range(N_TOPICS):
        words = []
        while len(words) < WORDS_PER_TOPIC:
            n_syl = 2 + int(rng.integers(0, 2))
            w = "".join(_SYLLABLES[int(i)] for i in rng.integers(0, len(_SYLLABLES), n_syl))
            if w not in seen:
                seen.add(w)
                words.append(w)
        topics.append(tuple(words))
    return tuple(topics)


TOPIC_WORDS = _lexicon()

PARAGRAPH_COUNT_WEIGHTS = {5: 0.20, 6: 0.60, 7: 0.20}


@dataclass(frozen=True)
class SynthSpec:
    n_docs: int
    seed: int = 0
    closing_prob: float = 0.15
    noise_prob: float = 0.03
    para_weights: dict = field(default_factory=lambda: dict(PARAGRAPH_COUNT_WEIGHTS))

    def __post_init__(self) -> None:
        if self.n_docs < 1:
            raise ValueError("n_docs must be >= 1")
        if not 0 <= self.closing_prob <= 1 or not 0 <= self.noise_prob <= 1:
            raise ValueError("probabilities must lie in [0, 1]")


def _sentence(rng, topic_words) -> str:
    words = []
    for _ in range(int(rng.integers(2, 17))):
        if rng.random() < 0.25:
            words.append(FUNCTION_WORDS[int(rng.integers(0, len(FUNCTION_WORDS)))])
        else:
            # mildly zipfian within the topic: earlier words more frequent
            r = rng.random()
            idx = int(len(topic_words) * r * r)
            words.append(topic_words[min(idx, len(topic_words) - 1)])
    return " ".join(words) + "."


def _closing_sentence(rng) -> str:
    return CLOSING_WORDS[int(rng.integers(0, len(CLOSING_WORDS)))] + "."


def generate_corpus(spec: SynthSpec) -> list[Document]:
    rng = np.random.Generator(np.random.Philox(spec.seed))
    counts = sorted(spec.para_weights)
    weights = np.array([spec.para_weights[c] for c in counts], dtype=np.float64)
    weights /= weights.sum()

    docs = []
    for i in range(spec.n_docs):
        topic = TOPIC_WORDS[int(rng.integers(0, N_TOPICS))]
        n_paras = counts[int(rng.choice(len(counts), p=weights))]
        prompt = " ".join(
            topic[int(rng.integers(0, len(topic)))] for _ in range(2 + int(rng.integers(0, 2)))
        )
        paragraphs = []
        for p in range(n_paras):
            final = p == n_paras - 1
            n_sents = 1 + int(rng.integers(0, 4))
            sents = [_sentence(rng, topic) for _ in range(n_sents)]
            if final:
                if rng.random() < spec.closing_prob:
                    sents.append(_closing_sentence(rng))
            elif rng.random() < spec.noise_prob:
                # cue noise: a closing phrase that does not end the document
                sents.append(_closing_sentence(rng))
            # a continuation paragraph starts with the same ". " joint that
            # separates sentences, so under the no-marker scheme a paragraph
            # break leaves no textual trace and the paragraph count is only
            # visible through marker tokens
            body = " ".join(sents)
            paragraphs.append(" " + body if p > 0 else body)
        docs.append(
            Document(
                id=f"synth-{spec.seed}-{i:05d}",
                prompt=prompt,
                paragraphs=paragraphs,
                lang="english",
            )
        )
    return docs
