"""Nucleus (top-p) sampling and autoregressive generation with EOS stopping.

The nucleus is the smallest prefix of tokens, sorted by probability descending
with ties broken toward smaller token ids, whose cumulative mass reaches p;
sampling renormalizes within it. Randomness comes from numpy's Philox
generator (a documented, counter-based, seedable 64-bit scheme), one stream
per generation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DecodeError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    max_new_tokens: int
    p: float = 0.95
    seed: int = 0
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if not 0 < self.p <= 1:
            raise DecodeError(f"p must lie in (0, 1], got {self.p}")
        if self.max_new_tokens < 0:
            raise DecodeError("max_new_tokens must be >= 0")
        if self.temperature <= 0:
            raise DecodeError("temperature must be > 0")


@dataclass(frozen=True)
class Generation:
    prompt_ids: tuple[int, ...]
    output_ids: tuple[int, ...]
    ended_with_eos: bool
    steps: int

    def __post_init__(self) -> None:
        if self.steps != len(self.output_ids):
            raise DecodeError("steps must equal the number of generated tokens")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def nucleus_of(probs: np.ndarray, p: float) -> np.ndarray:
    """Token ids of the smallest probability-descending prefix with cumulative
    mass >= p; equal probabilities enter in ascending id order."""
    probs = np.asarray(probs, dtype=np.float64)
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise DecodeError("probabilities must be finite and non-negative")
    if abs(float(probs.sum()) - 1.0) > 1e-6:
        raise DecodeError(f"probabilities sum to {probs.sum():.8f}, not 1")
    order = np.argsort(-probs, kind="stable")  # stable keeps ties in id order
    cum = np.cumsum(probs[order])
    k = int(np.searchsorted(cum, p - 1e-12, side="left"))
    k = min(k, len(order) - 1)
    return order[: k + 1]


def top_p_sample(probs: np.ndarray, p: float, rng: np.random.Generator) -> int:
    """One draw from the renormalized nucleus; deterministic given rng state."""
    nucleus = nucleus_of(probs, p)
    probs = np.asarray(probs, dtype=np.float64)
    mass = probs[nucleus]
    r = rng.random() * float(mass.sum())
    picked = int(np.searchsorted(np.cumsum(mass), r, side="right"))
    return int(nucleus[min(picked, len(nucleus) - 1)])


def _softmax(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def generate(model, prompt_ids, cfg: GenConfig, eos_id: int | None) -> Generation:
    """Sample up to max_new_tokens; stop when EOS is emitted (EOS included in
    the output). Context overflow slides a window over the most recent
    context_len - 1 tokens. The model must expose context_len, prefill(ids),
    step(cache, token) and cache_len(cache)."""
    prompt = tuple(int(t) for t in prompt_ids)
    if not prompt:
        raise DecodeError("prompt must not be empty")
    if len(prompt) > model.context_len - 1:
        raise DecodeError(
            f"prompt of {len(prompt)} does not fit context_len {model.context_len}"
        )
    if cfg.max_new_tokens == 0:
        return Generation(prompt, (), False, 0)

    rng = make_rng(cfg.seed)
    cache, logits = model.prefill(prompt)
    if eos_id is not None and not 0 <= eos_id < len(logits):
        raise DecodeError(f"eos id {eos_id} outside vocabulary of {len(logits)}")

    seq = list(prompt)
    output: list[int] = []
    ended = False
    for i in range(cfg.max_new_tokens):
        tok = top_p_sample(_softmax(logits, cfg.temperature), cfg.p, rng)
        output.append(tok)
        seq.append(tok)
        if eos_id is not None and tok == eos_id:
            ended = True
            break
        if i == cfg.max_new_tokens - 1:
            break
        if model.cache_len(cache) + 1 > model.context_len:
            cache, logits = model.prefill(seq[-(model.context_len - 1) :])
        else:
            cache, logits = model.step(cache, tok)
    return Generation(prompt, tuple(output), ended, len(output))
