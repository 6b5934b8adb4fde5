"""Tokenization and paragraph-marker serialization.

Two tokenizer modes: ``char`` (every character seen in training) and ``bpe``
(greedy highest-frequency pair merges over each document's raw symbol stream,
no pre-tokenization). Special tokens are reserved and never merged into or
out of; the literal line break "\\n" is always in the vocabulary and doubles
as the NL special, so it also acts as a merge barrier.

Five serialization schemes for a multi-paragraph document:

* none:     P1 .. Pn                      (no markers)
* sep-nl:   P1 NL P2 NL .. Pn             (n-1 separators, line-break token)
* sep-diy:  P1 SEP P2 SEP .. Pn           (n-1 separators, dedicated token)
* eop-nl:   P1 NL P2 NL .. Pn NL          (marker after every paragraph)
* eop-diy:  P1 EOP P2 EOP .. Pn EOP

EOS, when appended, is always the final token, after any final marker.
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .corpus import Document

EOS_TOKEN = "⟨eos⟩"
EOP_TOKEN = "⟨eop⟩"
SEP_TOKEN = "⟨sep⟩"
PAD_TOKEN = "⟨pad⟩"
UNK_TOKEN = "⟨unk⟩"
NL_TOKEN = "\n"

_SENTINELS = {"EOS": EOS_TOKEN, "EOP": EOP_TOKEN, "SEP": SEP_TOKEN, "PAD": PAD_TOKEN, "UNK": UNK_TOKEN}


class CodecError(ValueError):
    pass


class ParaType(str, Enum):
    NONE = "none"
    SEP_NL = "sep-nl"
    SEP_DIY = "sep-diy"
    EOP_NL = "eop-nl"
    EOP_DIY = "eop-diy"

    @classmethod
    def parse(cls, name: str) -> "ParaType":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(p.value for p in cls)
            raise CodecError(f"unknown paratype {name!r} (expected one of: {valid})") from None

    @property
    def marker(self) -> str | None:
        """Special-id key of the marker token this scheme emits, if any."""
        return {
            ParaType.NONE: None,
            ParaType.SEP_NL: "NL",
            ParaType.SEP_DIY: "SEP",
            ParaType.EOP_NL: "NL",
            ParaType.EOP_DIY: "EOP",
        }[self]

    @property
    def marker_after_last(self) -> bool:
        return self in (ParaType.EOP_NL, ParaType.EOP_DIY)


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    special_ids: dict[str, int]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(set(self.tokens)) != len(self.tokens):
            raise CodecError("vocabulary token strings are not unique")
        for name in ("EOS", "NL", "PAD", "UNK"):
            if name not in self.special_ids:
                raise CodecError(f"vocabulary is missing required special {name}")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index[token]

    def special(self, name: str) -> int:
        """Index of a special token; raises CodecError when absent (EOP/SEP are optional)."""
        if name not in self.special_ids:
            raise CodecError(f"vocabulary has no {name} special token")
        return self.special_ids[name]

    def has_special(self, name: str) -> bool:
        return name in self.special_ids

    def marker_special_ids(self) -> set[int]:
        """Ids stripped by strip_special regardless of position: EOS/EOP/SEP."""
        return {self.special_ids[n] for n in ("EOS", "EOP", "SEP") if n in self.special_ids}


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    boundary_marks: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "ids", tuple(self.ids))
        if self.boundary_marks is not None:
            marks = tuple(self.boundary_marks)
            if any(b <= a for a, b in zip(marks, marks[1:])):
                raise CodecError("boundary_marks must be strictly increasing")
            if marks and (marks[0] < 0 or marks[-1] >= len(self.ids)):
                raise CodecError("boundary_marks out of range")
            object.__setattr__(self, "boundary_marks", marks)

    def __len__(self) -> int:
        return len(self.ids)


def _symbols(text: str, known: set[str]) -> list[str]:
    return [c if c in known else UNK_TOKEN for c in text]


def _apply_merges(symbols: list[str], ranks: dict[tuple[str, str], int]) -> list[str]:
    # repeatedly merge every occurrence of the lowest-rank adjacent pair
    while len(symbols) >= 2:
        best_rank, best_pair = None, None
        for i in range(len(symbols) - 1):
            pair = (symbols[i], symbols[i + 1])
            r = ranks.get(pair)
            if r is not None and (best_rank is None or r < best_rank):
                best_rank, best_pair = r, pair
        if best_pair is None:
            break
        left, right = best_pair
        merged = []
        i = 0
        while i < len(symbols):
            if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
                merged.append(left + right)
                i += 2
            else:
                merged.append(symbols[i])
                i += 1
        symbols = merged
    return symbols


@dataclass(frozen=True)
class Codec:
    mode: str
    vocab: Vocab
    merges: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "merges", tuple(tuple(m) for m in self.merges))
        object.__setattr__(self, "_ranks", {m: i for i, m in enumerate(self.merges)})
        object.__setattr__(self, "_chars", {t for t in self.vocab.tokens if len(t) == 1})

    def encode(self, text: str) -> list[int]:
        syms = _symbols(text, self._chars)
        if self.mode == "bpe" and self._ranks:
            syms = _apply_merges(syms, self._ranks)
        return [self.vocab.id_of(s) for s in syms]

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            if not 0 <= i < len(self.vocab):
                raise CodecError(f"token id {i} out of range for vocab of {len(self.vocab)}")
            out.append(self.vocab.tokens[i])
        return "".join(out)

    def with_specials(self, names) -> "Codec":
        """New codec with the named DIY specials (EOP/SEP) appended; existing ids unchanged."""
        tokens = list(self.vocab.tokens)
        special_ids = dict(self.vocab.special_ids)
        for name in names:
            if name not in ("EOP", "SEP"):
                raise CodecError(f"only EOP/SEP can be added post-hoc, not {name}")
            if name in special_ids:
                continue
            special_ids[name] = len(tokens)
            tokens.append(_SENTINELS[name])
        return Codec(self.mode, Vocab(tuple(tokens), special_ids), self.merges)

    def save(self, path: str | Path) -> None:
        payload = {
            "mode": self.mode,
            "tokens": list(self.vocab.tokens),
            "merges": [list(m) for m in self.merges],
            "special_ids": self.vocab.special_ids,
        }
        Path(path).write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Codec":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            mode=payload["mode"],
            vocab=Vocab(tuple(payload["tokens"]), dict(payload["special_ids"])),
            merges=tuple((l, r) for l, r in payload["merges"]),
        )


def _corpus_texts(corpus) -> list[str]:
    texts = []
    for item in corpus:
        if isinstance(item, Document):
            body = "\n".join(item.paragraphs)
            texts.append(item.prompt + "\n" + body if item.prompt else body)
        else:
            texts.append(str(item))
    return texts


def _train_bpe_merges(texts: list[str], known: set[str], n_merges: int, forbidden: set[str]):
    """Greedy highest-frequency adjacent-pair merges; ties -> lexicographically
    smallest (left, right). Stops early when no pair occurs twice."""
    seqs = [_symbols(t, known) for t in texts]
    barrier = {NL_TOKEN, UNK_TOKEN}
    sym: list[list[str | None]] = [list(s) for s in seqs]
    nxt = [list(range(1, len(s))) + [-1] for s in seqs]
    prv = [[-1] + list(range(len(s) - 1)) for s in seqs]
    counts: Counter = Counter()
    where: dict[tuple[str, str], set[tuple[int, int]]] = defaultdict(set)

    def track(pair, pos):
        if pair[0] in barrier or pair[1] in barrier or pair[0] + pair[1] in forbidden:
            return
        counts[pair] += 1
        where[pair].add(pos)

    def untrack(pair, pos):
        if pair[0] in barrier or pair[1] in barrier:
            return
        counts[pair] -= 1
        where[pair].discard(pos)
        if counts[pair] <= 0:
            del counts[pair]

    for s, seq in enumerate(seqs):
        for i in range(len(seq) - 1):
            track((seq[i], seq[i + 1]), (s, i))

    merges: list[tuple[str, str]] = []
    new_tokens: list[str] = []
    seen = set(known) | forbidden
    while len(merges) < n_merges:
        best = min(((-c, p) for p, c in counts.items() if c >= 2), default=None)
        if best is None:
            break
        left, right = best[1]
        merged_str = left + right
        for s, i in sorted(where[(left, right)]):
            j = nxt[s][i]
            if sym[s][i] != left or j == -1 or sym[s][j] != right:
                continue  # invalidated by an earlier overlapping merge
            l, r = prv[s][i], nxt[s][j]
            untrack((left, right), (s, i))
            if l != -1:
                untrack((sym[s][l], left), (s, l))
            if r != -1:
                untrack((right, sym[s][r]), (s, j))
            sym[s][i] = merged_str
            sym[s][j] = None
            nxt[s][i] = r
            if r != -1:
                prv[s][r] = i
            if l != -1:
                track((sym[s][l], merged_str), (s, l))
            if r != -1:
                track((merged_str, sym[s][r]), (s, i))
        merges.append((left, right))
        if merged_str not in seen:
            new_tokens.append(merged_str)
            seen.add(merged_str)
    return merges, new_tokens


def train_codec(corpus, mode: str, vocab_size: int | None = None, reserved_specials=frozenset()) -> Codec:
    """Build a codec from raw corpus text.

    ``reserved_specials`` names DIY specials ({"EOP", "SEP"}) to reserve now;
    EOS/PAD/UNK/NL are always present. ``vocab_size`` caps the total token
    count (required for bpe; optional for char, which defaults to everything
    seen).
    """
    if mode not in ("char", "bpe"):
        raise CodecError(f"unknown codec mode {mode!r}")
    texts = _corpus_texts(corpus)
    if not texts:
        raise CodecError("cannot train a codec on an empty corpus")
    extra = set(reserved_specials)
    if not extra <= {"EOP", "SEP"}:
        raise CodecError(f"reserved_specials may contain only EOP/SEP, got {sorted(extra)}")

    specials = ["EOS", "PAD", "UNK"] + [n for n in ("EOP", "SEP") if n in extra]
    alphabet = sorted(set("".join(texts)) | {NL_TOKEN})
    base = [_SENTINELS[n] for n in specials] + alphabet
    if vocab_size is not None and vocab_size < len(base):
        raise CodecError(
            f"vocab_size {vocab_size} too small: {len(specials)} specials + "
            f"{len(alphabet)} base characters"
        )

    merges: tuple[tuple[str, str], ...] = ()
    tokens = list(base)
    if mode == "bpe":
        if vocab_size is None:
            raise CodecError("bpe mode requires vocab_size")
        if vocab_size <= len(base):
            raise CodecError(
                f"vocab_size {vocab_size} too small for bpe: needs headroom above "
                f"{len(base)} base tokens"
            )
        learned, new_tokens = _train_bpe_merges(
            texts, set(alphabet), vocab_size - len(base), set(_SENTINELS.values())
        )
        merges = tuple(learned)
        tokens += new_tokens

    special_ids = {name: tokens.index(_SENTINELS[name]) for name in specials}
    special_ids["NL"] = tokens.index(NL_TOKEN)
    return Codec(mode, Vocab(tuple(tokens), special_ids), merges)


def serialize_document(doc: Document, codec: Codec, paratype: ParaType, append_eos: bool) -> TokenSeq:
    """Token layout for one document under a marker scheme.

    boundary_marks[i] is the index of paragraph i's last emitted token: the
    marker token when one follows the paragraph, its final content token
    otherwise.
    """
    paratype = ParaType(paratype)
    marker_id = None
    if paratype.marker is not None:
        marker_id = codec.vocab.special(paratype.marker)
    n = len(doc.paragraphs)
    ids: list[int] = []
    marks: list[int] = []
    for i, para in enumerate(doc.paragraphs):
        ids.extend(codec.encode(para))
        if marker_id is not None and (paratype.marker_after_last or i < n - 1):
            ids.append(marker_id)
        marks.append(len(ids) - 1)
    if append_eos:
        ids.append(codec.vocab.special("EOS"))
    return TokenSeq(tuple(ids), tuple(marks))


def strip_special(seq: TokenSeq, vocab: Vocab) -> TokenSeq:
    """Drop EOS/EOP/SEP everywhere; drop NL only where boundary_marks says it
    was emitted as a paragraph marker (content line breaks survive)."""
    drop_ids = vocab.marker_special_ids()
    nl = vocab.special_ids.get("NL")
    marker_positions = set(seq.boundary_marks or ())
    kept = [
        t
        for p, t in enumerate(seq.ids)
        if t not in drop_ids and not (t == nl and p in marker_positions)
    ]
    return TokenSeq(tuple(kept), None)


@dataclass(frozen=True)
class Example:
    """A full model-ready sequence: optional prompt context + serialized story."""

    doc_id: str
    ids: tuple[int, ...]
    boundary_marks: tuple[int, ...]
    story_start: int  # index of the first story token (prompt+joiner length)
    lang: str = "english"

    def __len__(self) -> int:
        return len(self.ids)


def encode_example(doc: Document, codec: Codec, paratype: ParaType, append_eos: bool = True) -> Example:
    """Prompt context (prompt + NL when non-empty) followed by the serialized story."""
    prefix: list[int] = []
    if doc.prompt:
        prefix = codec.encode(doc.prompt) + [codec.vocab.special("NL")]
    story = serialize_document(doc, codec, paratype, append_eos)
    off = len(prefix)
    return Example(
        doc_id=doc.id,
        ids=tuple(prefix) + story.ids,
        boundary_marks=tuple(m + off for m in story.boundary_marks),
        story_start=off,
        lang=doc.lang,
    )
