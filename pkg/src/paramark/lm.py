"""A small decoder-only transformer language model trained from scratch.

Architecture: pre-layer-norm blocks, GELU MLP, learned positional embeddings,
weight-tied output projection, init scale 0.02. Parameters are float32;
loss/metric sums accumulate in float64. Training: Adam (0.9, 0.999, 1e-8)
with linear warmup then a constant (optionally decayed) learning rate,
best-validation checkpoint selection.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_MAGIC = b"plmw1"
INIT_STD = 0.02


class LmError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    context_len: int = 256
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise LmError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.context_len < 2:
            raise LmError("context_len must be >= 2")
        if self.vocab_size < 4:
            raise LmError("vocab_size must be >= 4")
        if not 0 <= self.dropout < 1:
            raise LmError("dropout must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    batch_size: int = 32
    warmup_steps: int = 800
    peak_lr: float = 3e-4
    grad_clip: float | None = 1.0
    eval_every: int = 100
    lr_decay: str = "none"  # none | cosine | linear

    def __post_init__(self) -> None:
        for name in ("total_steps", "batch_size", "warmup_steps", "eval_every"):
            if getattr(self, name) < 1:
                raise LmError(f"{name} must be >= 1")
        if self.peak_lr <= 0:
            raise LmError("peak_lr must be > 0")
        if self.lr_decay not in ("none", "cosine", "linear"):
            raise LmError(f"unknown lr_decay {self.lr_decay!r}")


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn_qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.attn_out = nn.Linear(cfg.d_model, cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.mlp_in = nn.Linear(cfg.d_model, cfg.d_ff)
        self.mlp_out = nn.Linear(cfg.d_ff, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        b, n, c = t.shape
        return t.view(b, n, self.n_heads, c // self.n_heads).transpose(1, 2)

    def forward(self, x: torch.Tensor, past=None):
        q, k, v = self.attn_qkv(self.ln1(x)).chunk(3, dim=-1)
        q, k, v = self._split(q), self._split(k), self._split(v)
        if past is not None:
            pk, pv = past
            k = torch.cat([pk, k], dim=2)
            v = torch.cat([pv, v], dim=2)
        # with a cache the query is strictly newest, so full attention is causal
        causal = past is None and q.shape[2] > 1
        y = F.scaled_dot_product_attention(q, k, v, is_causal=causal)
        y = y.transpose(1, 2).reshape(x.shape)
        x = x + self.drop(self.attn_out(y))
        x = x + self.drop(self.mlp_out(F.gelu(self.mlp_in(self.ln2(x)))))
        return x, (k, v)


class TransformerLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.context_len, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)
        self.apply(self._init)

    def _init(self, module: nn.Module) -> None:
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.normal_(module.weight, mean=0.0, std=INIT_STD)
            if getattr(module, "bias", None) is not None:
                nn.init.zeros_(module.bias)

    def forward(self, idx: torch.Tensor, past=None):
        """idx: (B, T) int64. Returns (B, T, V) logits and the new kv cache.

        ``past`` is a per-layer kv list; positions continue from its length.
        """
        b, t = idx.shape
        offset = 0 if past is None else past[0][0].shape[2]
        if offset + t > self.cfg.context_len:
            raise LmError(f"sequence of {offset + t} exceeds context_len {self.cfg.context_len}")
        pos = torch.arange(offset, offset + t, device=idx.device)
        x = self.drop(self.tok_emb(idx) + self.pos_emb(pos))
        new_past = []
        for i, block in enumerate(self.blocks):
            x, kv = block(x, None if past is None else past[i])
            new_past.append(kv)
        x = self.ln_f(x)
        logits = x @ self.tok_emb.weight.t()  # weight-tied output projection
        return logits, new_past


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict[str, torch.Tensor]
    step: int = 0
    history: tuple = ()  # (step, train_loss, valid_nll | None)

    def materialize(self) -> "LanguageModel":
        return LanguageModel(self)


def init_checkpoint(cfg: ModelConfig) -> Checkpoint:
    torch.manual_seed(cfg.seed)
    module = TransformerLM(cfg)
    return Checkpoint(config=cfg, state={k: v.detach().clone() for k, v in module.state_dict().items()})


def _build_module(ckpt: Checkpoint) -> TransformerLM:
    module = TransformerLM(ckpt.config)
    module.load_state_dict(ckpt.state)
    module.eval()
    return module


class LanguageModel:
    """Inference wrapper: numpy in/out, eval mode, no grad."""

    def __init__(self, ckpt: Checkpoint):
        self.config = ckpt.config
        self.module = _build_module(ckpt)

    @property
    def context_len(self) -> int:
        return self.config.context_len

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    def _ids(self, ids) -> torch.Tensor:
        t = torch.as_tensor(list(ids), dtype=torch.long)
        if t.numel() == 0:
            raise LmError("empty token sequence")
        if t.min() < 0 or t.max() >= self.config.vocab_size:
            raise LmError("token id out of range")
        return t.unsqueeze(0)

    @torch.no_grad()
    def logits(self, ids) -> np.ndarray:
        out, _ = self.module(self._ids(ids))
        return out[0].numpy()

    @torch.no_grad()
    def next_token_distribution(self, ids) -> np.ndarray:
        """Row-stochastic (len, vocab): row t is P(. | ids[:t+1]), float64."""
        out, _ = self.module(self._ids(ids))
        return torch.softmax(out[0].double(), dim=-1).numpy()

    @torch.no_grad()
    def prefill(self, ids):
        out, past = self.module(self._ids(ids))
        return past, out[0, -1].numpy()

    @torch.no_grad()
    def step(self, past, token: int):
        out, past = self.module(torch.tensor([[token]], dtype=torch.long), past)
        return past, out[0, -1].numpy()

    def cache_len(self, past) -> int:
        return past[0][0].shape[2]


def forward(ckpt: Checkpoint, ids) -> np.ndarray:
    """(len, vocab) logits; row t conditions on ids[:t+1]. Causal, eval mode."""
    return ckpt.materialize().logits(ids)


def loss(logits, targets, mask=None) -> torch.Tensor:
    """Mean NLL (nats/token) over unmasked positions."""
    logits = torch.as_tensor(logits)
    targets = torch.as_tensor(targets, dtype=torch.long)
    flat = logits.reshape(-1, logits.shape[-1])
    tgt = targets.reshape(-1)
    nll = F.cross_entropy(flat, tgt, reduction="none")
    if mask is not None:
        m = torch.as_tensor(mask, dtype=torch.bool).reshape(-1)
        if not m.any():
            raise LmError("loss: every position is masked")
        nll = nll[m]
    return nll.mean()


def token_logprobs(ckpt: Checkpoint | "LanguageModel", seq) -> list[tuple[int, float]]:
    """Record t is (seq[t+1], log P(seq[t+1] | seq[:t+1])); float64 softmax."""
    model = ckpt if isinstance(ckpt, LanguageModel) else ckpt.materialize()
    ids = list(seq.ids if hasattr(seq, "ids") else seq)
    if len(ids) < 2:
        raise LmError("token_logprobs needs at least 2 tokens")
    logits = torch.from_numpy(model.logits(ids)).double()
    logp = torch.log_softmax(logits, dim=-1)
    return [(ids[t + 1], float(logp[t, ids[t + 1]])) for t in range(len(ids) - 1)]


# ------------------------------------------------------------------ training


def _as_stream(seqs) -> np.ndarray:
    parts = []
    for s in seqs:
        ids = list(s.ids if hasattr(s, "ids") else s)
        parts.extend(ids)
    if not parts:
        raise LmError("no training tokens")
    return np.asarray(parts, dtype=np.int64)


def _valid_nll(module: TransformerLM, stream: np.ndarray, context: int) -> float:
    """Pooled token NLL over non-overlapping windows; float64 accumulation."""
    module.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(stream) - 1, context):
            chunk = stream[start : start + context + 1]
            if len(chunk) < 2:
                break
            x = torch.from_numpy(chunk[:-1]).unsqueeze(0)
            y = torch.from_numpy(chunk[1:])
            logits, _ = module(x)
            logp = torch.log_softmax(logits[0].double(), dim=-1)
            total += float(-logp[torch.arange(len(y)), y].sum())
            count += len(y)
    module.train()
    return total / count


def _lr_at(step: int, cfg: TrainConfig) -> float:
    lr = cfg.peak_lr * min(1.0, step / cfg.warmup_steps)
    if cfg.lr_decay == "none" or step <= cfg.warmup_steps:
        return lr
    frac = (step - cfg.warmup_steps) / max(1, cfg.total_steps - cfg.warmup_steps)
    if cfg.lr_decay == "linear":
        return lr * (1.0 - frac)
    return lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_seqs, valid_seqs) -> Checkpoint:
    """Train from scratch; returns the checkpoint with the lowest validation
    token-NLL seen at eval points (multiples of eval_every, plus the final
    step). Deterministic given configs and data."""
    torch.manual_seed(model_cfg.seed)
    module = TransformerLM(model_cfg)
    module.train()
    opt = torch.optim.Adam(module.parameters(), lr=train_cfg.peak_lr, betas=(0.9, 0.999), eps=1e-8)

    stream = _as_stream(train_seqs)
    window = model_cfg.context_len + 1
    if len(stream) < window:  # tile tiny corpora so windows always fill
        reps = math.ceil(window / len(stream))
        stream = np.tile(stream, reps + 1)
    valid_stream = _as_stream(valid_seqs) if valid_seqs else stream
    rng = np.random.Generator(np.random.Philox(model_cfg.seed))

    best_nll = math.inf
    best_state = {k: v.detach().clone() for k, v in module.state_dict().items()}
    best_step = 0
    history = []
    for step in range(1, train_cfg.total_steps + 1):
        lr = _lr_at(step, train_cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        starts = rng.integers(0, len(stream) - window + 1, size=train_cfg.batch_size)
        batch = np.stack([stream[s : s + window] for s in starts])
        x = torch.from_numpy(batch[:, :-1])
        y = torch.from_numpy(batch[:, 1:])
        logits, _ = module(x)
        step_loss = loss(logits, y)
        if not torch.isfinite(step_loss):
            raise TrainingDiverged(f"non-finite loss {step_loss.item()} at step {step} (lr={lr:g})")
        opt.zero_grad(set_to_none=True)
        step_loss.backward()
        if train_cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(module.parameters(), train_cfg.grad_clip)
        opt.step()

        if step % train_cfg.eval_every == 0 or step == train_cfg.total_steps:
            nll = _valid_nll(module, valid_stream, model_cfg.context_len)
            history.append((step, step_loss.item(), nll))
            if nll < best_nll:
                best_nll = nll
                best_step = step
                best_state = {k: v.detach().clone() for k, v in module.state_dict().items()}
        else:
            history.append((step, step_loss.item(), None))

    return Checkpoint(config=model_cfg, state=best_state, step=best_step, history=tuple(history))


# ------------------------------------------------------------------ grad check


def _flat_loss_fn(cfg: ModelConfig, ids):
    ids = torch.as_tensor(list(ids), dtype=torch.long)
    if len(ids) < 2:
        raise LmError("grad_check needs at least 2 tokens")
    x, y = ids[:-1].unsqueeze(0), ids[1:]

    torch.manual_seed(cfg.seed)
    module = TransformerLM(cfg).double()
    module.eval()  # dropout off: finite differences need a deterministic loss
    params = dict(module.named_parameters())

    def compute(overrides: dict[str, torch.Tensor]) -> torch.Tensor:
        merged = {**{k: v for k, v in params.items()}, **overrides}
        logits = torch.func.functional_call(module, merged, (x,))[0]
        return loss(logits, y)

    return module, params, compute


def finite_difference_grads(model_cfg: ModelConfig, ids, h: float = 1e-3, method: str = "vmap"):
    """Central-difference gradient of the loss for every parameter coordinate,
    all in float64. Returns (analytic, numeric) dicts of tensors.

    ``h`` is a relative step: coordinate i is probed at h * (|theta_i| + h),
    so 0.02-scale embedding entries and unit-scale layer-norm gains both see
    perturbations small against their own magnitude (absolute floor h^2 for
    zero-initialized coordinates).
    """
    module, params, compute = _flat_loss_fn(model_cfg, ids)

    analytic_loss = compute({})
    grads = torch.autograd.grad(analytic_loss, list(params.values()))
    analytic = {name: g for name, g in zip(params, grads)}

    numeric = {}
    for name, p in params.items():
        base = p.detach()
        flat = base.reshape(-1)
        steps = h * (flat.abs() + h)
        n = flat.numel()
        fd = torch.empty(n, dtype=torch.float64)
        with torch.no_grad():
            if method == "vmap":
                def one(pv, _name=name):
                    return compute({_name: pv})

                chunk = 256
                for start in range(0, n, chunk):
                    idx = torch.arange(start, min(start + chunk, n))
                    probe = torch.zeros((len(idx), n), dtype=torch.float64)
                    probe[torch.arange(len(idx)), idx] = steps[idx]
                    stacked = torch.cat([flat + probe, flat - probe]).reshape(-1, *base.shape)
                    vals = torch.func.vmap(one)(stacked)
                    fd[idx] = (vals[: len(idx)] - vals[len(idx) :]) / (2 * steps[idx])
            else:
                for i in range(n):
                    delta = torch.zeros_like(flat)
                    delta[i] = steps[i]
                    plus = compute({name: (flat + delta).reshape(base.shape)})
                    minus = compute({name: (flat - delta).reshape(base.shape)})
                    fd[i] = (plus - minus) / (2 * steps[i])
        numeric[name] = fd.reshape(base.shape)
    return analytic, numeric


def grad_check(model_cfg: ModelConfig, ids, h: float = 1e-3, method: str = "vmap") -> float:
    """Max over parameter groups of ||analytic - numeric|| / max(norms).

    Per-group norm comparison: coordinates with near-zero gradients would
    otherwise dominate the ratio with pure truncation noise.
    """
    if model_cfg.n_layers > 2 or model_cfg.d_model > 16:
        raise LmError("grad_check wants a tiny config (<= 2 layers, d_model <= 16)")
    from torch.nn.attention import SDPBackend, sdpa_kernel

    with sdpa_kernel([SDPBackend.MATH]):  # fp64-exact and vmap-friendly
        analytic, numeric = finite_difference_grads(model_cfg, ids, h, method)
    max_err = 0.0
    for name, a in analytic.items():
        fd = numeric[name]
        denom = max(a.norm().item(), fd.norm().item(), 1e-12)
        max_err = max(max_err, (a - fd).norm().item() / denom)
    return max_err


# ------------------------------------------------------------------ vocab growth


def extend_vocab(ckpt: Checkpoint, new_specials, vocab=None, noise_std: float = INIT_STD) -> Checkpoint:
    """Append embedding/output rows for new special tokens: mean of existing
    embedding rows plus gaussian noise. All other parameters unchanged."""
    names = list(new_specials)
    if len(set(names)) != len(names):
        raise LmError(f"duplicate tokens in {names}")
    if vocab is not None:
        for name in names:
            if name in vocab.tokens:
                raise LmError(f"token {name!r} already in vocabulary")
    if not names:
        return ckpt
    emb = ckpt.state["tok_emb.weight"]
    gen = torch.Generator().manual_seed(ckpt.config.seed + emb.shape[0])
    mean = emb.mean(dim=0, keepdim=True)
    rows = mean + noise_std * torch.randn((len(names), emb.shape[1]), generator=gen, dtype=emb.dtype)
    state = {k: v.detach().clone() for k, v in ckpt.state.items()}
    state["tok_emb.weight"] = torch.cat([emb, rows], dim=0)
    cfg = replace(ckpt.config, vocab_size=ckpt.config.vocab_size + len(names))
    return Checkpoint(config=cfg, state=state, step=ckpt.step, history=ckpt.history)


# ------------------------------------------------------------------ persistence


_DTYPES = {"f4": np.float32, "f8": np.float64, "i8": np.int64}


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Layout: b"plmw1" | u32 header length | JSON header | raw little-endian
    tensor data at the listed offsets."""
    tensors = []
    blobs = []
    offset = 0
    for name, t in ckpt.state.items():
        arr = t.detach().numpy()
        code = {np.dtype(v): k for k, v in _DTYPES.items()}[arr.dtype]
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        tensors.append(
            {"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {
            "version": 1,
            "config": asdict(ckpt.config),
            "step": ckpt.step,
            "history": [list(h) for h in ckpt.history],
            "tensors": tensors,
        }
    ).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise LmError(f"{path}: not a checkpoint file (bad magic)")
    n = struct.unpack("<I", data[5:9])[0]
    header = json.loads(data[9 : 9 + n].decode("utf-8"))
    base = 9 + n
    state = {}
    for spec in header["tensors"]:
        dtype = np.dtype(_DTYPES[spec["dtype"]]).newbyteorder("<")
        arr = np.frombuffer(
            data, dtype=dtype, count=int(np.prod(spec["shape"])) if spec["shape"] else 1,
            offset=base + spec["offset"],
        ).reshape(spec["shape"])
        state[spec["name"]] = torch.from_numpy(arr.astype(dtype.newbyteorder("="))).clone()
    cfg = ModelConfig(**header["config"])
    history = tuple(tuple(h) for h in header["history"])
    return Checkpoint(config=cfg, state=state, step=header["step"], history=history)
