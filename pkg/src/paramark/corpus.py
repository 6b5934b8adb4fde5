"""Loading, validation, filtering, splitting and statistics for prompt/continuation corpora.

A corpus is a list of Documents: a prompt (possibly empty) plus an ordered list
of non-empty paragraphs. Two on-disk formats are supported:

* jsonl: one object per line with fields id, prompt, paragraphs, lang
* twofile: ``X.prompts`` (one prompt per line) and ``X.stories`` (stories
  separated by a line containing exactly ``<|doc|>``, paragraphs separated by
  blank lines)
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DOC_SEPARATOR = "<|doc|>"

LANGS = ("english", "chinese")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Document:
    id: str
    prompt: str
    paragraphs: tuple[str, ...]
    lang: str = "english"

    def __post_init__(self) -> None:
        object.__setattr__(self, "paragraphs", tuple(self.paragraphs))
        if not self.paragraphs:
            raise CorpusError(f"empty document {self.id}")
        for i, p in enumerate(self.paragraphs):
            if not isinstance(p, str) or not p.rstrip("\r\n"):
                raise CorpusError(f"document {self.id}: paragraph {i} is empty")
        if self.lang not in LANGS:
            raise CorpusError(f"document {self.id}: unknown lang {self.lang!r}")

    @property
    def story(self) -> str:
        return "\n".join(self.paragraphs)


@dataclass(frozen=True)
class CorpusStats:
    num_samples: int
    avg_words_per_sample: float
    avg_paragraphs_per_sample: float


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float
    valid_frac: float
    test_frac: float
    seed: int = 0

    def __post_init__(self) -> None:
        fracs = (self.train_frac, self.valid_frac, self.test_frac)
        if any(f < 0 or f > 1 for f in fracs):
            raise CorpusError(f"split fractions must lie in [0,1], got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise CorpusError(f"split fractions must sum to 1, got {sum(fracs)}")


def count_words(text: str, lang: str = "english") -> int:
    """Whitespace words for english; non-whitespace character count for chinese."""
    if lang == "chinese":
        return sum(1 for ch in text if not ch.isspace())
    return len(text.split())


def _clean_paragraphs(parts: list[str], doc_id: str, record_no: int) -> tuple[str, ...]:
    cleaned = [p.rstrip() for p in parts]
    if not cleaned or any(not p for p in cleaned):
        raise CorpusError(f"record {record_no}: empty document {doc_id}")
    return tuple(cleaned)


def _load_jsonl(path: Path) -> list[Document]:
    docs = []
    with path.open(encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"record {i}: invalid json ({exc})") from exc
            if "paragraphs" not in rec:
                raise CorpusError(f"record {i}: missing paragraphs field")
            doc_id = str(rec.get("id", f"doc{i:06d}"))
            paragraphs = _clean_paragraphs(list(rec["paragraphs"]), doc_id, i)
            docs.append(
                Document(
                    id=doc_id,
                    prompt=str(rec.get("prompt", "")).rstrip(),
                    paragraphs=paragraphs,
                    lang=rec.get("lang", "english"),
                )
            )
    return docs


def _twofile_paths(path: Path) -> tuple[Path, Path]:
    base = path
    if base.suffix in (".prompts", ".stories"):
        base = base.with_suffix("")
    return base.with_suffix(".prompts"), base.with_suffix(".stories")


def _load_twofile(path: Path, lang: str) -> list[Document]:
    prompts_path, stories_path = _twofile_paths(path)
    for p in (prompts_path, stories_path):
        if not p.exists():
            raise CorpusError(f"missing corpus file {p}")
    prompts = prompts_path.read_text(encoding="utf-8").splitlines()
    stories = stories_path.read_text(encoding="utf-8").split("\n" + DOC_SEPARATOR + "\n")
    # a lone separator line at either end produces empty story chunks
    if stories and stories[0].startswith(DOC_SEPARATOR + "\n"):
        stories[0] = stories[0][len(DOC_SEPARATOR) + 1 :]
    stories = [s for s in stories if s.strip()]
    if len(prompts) != len(stories):
        raise CorpusError(
            f"{prompts_path.name} has {len(prompts)} prompts but "
            f"{stories_path.name} has {len(stories)} stories"
        )
    docs = []
    for i, (prompt, story) in enumerate(zip(prompts, stories)):
        doc_id = f"{stories_path.stem}-{i:06d}"
        parts = [p for p in (chunk.strip("\n") for chunk in story.split("\n\n")) if p.strip()]
        paragraphs = _clean_paragraphs(parts, doc_id, i)
        docs.append(Document(id=doc_id, prompt=prompt.rstrip(), paragraphs=paragraphs, lang=lang))
    return docs


def load_corpus(path: str | Path, format: str = "jsonl", lang: str = "english") -> list[Document]:
    """Load documents in file order; raises CorpusError naming the bad record."""
    path = Path(path)
    if format == "jsonl":
        if not path.exists():
            raise CorpusError(f"missing corpus file {path}")
        docs = _load_jsonl(path)
    elif format == "prompt_story_twofile":
        docs = _load_twofile(path, lang)
    else:
        raise CorpusError(f"unknown corpus format {format!r}")
    seen: set[str] = set()
    for d in docs:
        if d.id in seen:
            raise CorpusError(f"duplicate document id {d.id}")
        seen.add(d.id)
    return docs


def write_corpus(docs: list[Document], path: str | Path) -> None:
    """Inverse of load_corpus for the jsonl format (UTF-8, LF line endings)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for d in docs:
            rec = {"id": d.id, "prompt": d.prompt, "paragraphs": list(d.paragraphs), "lang": d.lang}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def filter_by_length(docs, codec, paratype, max_tokens: int = 1024, append_eos: bool = True):
    """Keep documents whose full serialized example (prompt context + story
    under the given paratype, specials included) is at most max_tokens."""
    from .textcodec import encode_example  # deferred: corpus <-> textcodec

    if max_tokens < 1:
        raise CorpusError(f"max_tokens must be >= 1, got {max_tokens}")
    kept = []
    for d in docs:
        n = len(encode_example(d, codec, paratype, append_eos=append_eos).ids)
        if n <= max_tokens:
            kept.append(d)
    return kept


def compute_stats(docs: list[Document]) -> CorpusStats:
    """Mean continuation words (prompts excluded) and mean paragraph count."""
    if not docs:
        raise CorpusError("cannot compute stats of an empty corpus")
    words = [count_words(d.story, d.lang) for d in docs]
    paras = [len(d.paragraphs) for d in docs]
    return CorpusStats(
        num_samples=len(docs),
        avg_words_per_sample=sum(words) / len(docs),
        avg_paragraphs_per_sample=sum(paras) / len(docs),
    )


def split_corpus(
    docs: list[Document], spec: SplitSpec
) -> tuple[list[Document], list[Document], list[Document]]:
    """Deterministic disjoint partition; floor-sized valid/test, remainder to train."""
    n = len(docs)
    n_valid = int(spec.valid_frac * n)
    n_test = int(spec.test_frac * n)
    rng = np.random.Generator(np.random.Philox(spec.seed))
    order = rng.permutation(n)
    n_train = n - n_valid - n_test
    train = [docs[i] for i in order[:n_train]]
    valid = [docs[i] for i in order[n_train : n_train + n_valid]]
    test = [docs[i] for i in order[n_train + n_valid :]]
    return train, valid, test
