"""Word-level causal transformer LM, trained once and then frozen.

Architecture: learned token + absolute position embeddings, pre-LN blocks
(4 layers, 4 heads, d=64 by default), no biases on the projections, tied
nothing, a final layernorm and an unembedding matrix. Context window 48.
The block-stack helpers take an arbitrary starting embedding matrix and
mask so the fusion module can splice in visual prefixes or a mid-stack
fusion layer without duplicating the forward pass.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .errors import ContextLengthError, TrainingError
from .optim import AdamW, cosine_lr
from .seeding import rng_for

PAD_ID = 0
BOS_ID = 1
UNK_ID = 2
SPECIAL_TOKENS = ("<pad>", "<bos>", "<unk>")
MAX_VOCAB = 512

_WORD_RE = re.compile(r"[a-z0-9]+|[?.:,!]")


@dataclass(frozen=True)
class Vocabulary:
    """Token table with fixed special ids PAD=0, BOS=1, UNK=2."""

    id_to_token: tuple[str, ...]
    _token_to_id: dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:3]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(self.id_to_token) > MAX_VOCAB:
            raise ValueError(f"vocabulary size {len(self.id_to_token)} exceeds {MAX_VOCAB}")
        if len(set(self.id_to_token)) != len(self.id_to_token):
            raise ValueError("vocabulary has duplicate tokens")
        self._token_to_id.update({t: i for i, t in enumerate(self.id_to_token)})

    def __len__(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id


def normalize(text: str) -> list[str]:
    """Lowercased word/punctuation stream used everywhere text enters."""
    return _WORD_RE.findall(text.lower())


def build_vocabulary(corpus: Sequence[str]) -> Vocabulary:
    seen = sorted({w for line in corpus for w in normalize(line)})
    return Vocabulary(id_to_token=SPECIAL_TOKENS + tuple(seen))


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """BOS-prefixed token ids; unknown words map to UNK."""
    return [BOS_ID] + [vocab.id_of(w) for w in normalize(text)]


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    words = []
    for i in ids:
        if i in (PAD_ID, BOS_ID):
            continue
        words.append(vocab.id_to_token[i] if 0 <= i < len(vocab) else SPECIAL_TOKENS[UNK_ID])
    return " ".join(words)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LmConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_mlp: int = 256
    context: int = 48

    def as_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "d_mlp": self.d_mlp,
            "context": self.context,
        }


@dataclass
class LmCheckpoint:
    config: LmConfig
    vocab: Vocabulary
    params: dict[str, Tensor]

    def freeze(self) -> "LmCheckpoint":
        for t in self.params.values():
            t.freeze()
        return self


@dataclass
class TextStates:
    """Forward-pass products at each text position."""

    tokens: list[int]
    hidden: Tensor  # (T, d) post final layernorm
    logits: Tensor  # (T, |V|)


def init_lm_params(cfg: LmConfig, vocab_size: int, seed: int) -> dict[str, Tensor]:
    rng = rng_for(seed, "lm-init")
    scale = 0.02

    def norm(*shape):
        return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)

    params: dict[str, Tensor] = {
        "wte": norm(vocab_size, cfg.d_model),
        "wpe": norm(cfg.context, cfg.d_model),
    }
    for i in range(cfg.n_layers):
        p = f"h{i}"
        params[f"{p}.ln1.g"] = Tensor(np.ones(cfg.d_model), requires_grad=True)
        params[f"{p}.ln1.b"] = Tensor(np.zeros(cfg.d_model), requires_grad=True)
        params[f"{p}.wq"] = norm(cfg.d_model, cfg.d_model)
        params[f"{p}.wk"] = norm(cfg.d_model, cfg.d_model)
        params[f"{p}.wv"] = norm(cfg.d_model, cfg.d_model)
        params[f"{p}.wo"] = norm(cfg.d_model, cfg.d_model)
        params[f"{p}.ln2.g"] = Tensor(np.ones(cfg.d_model), requires_grad=True)
        params[f"{p}.ln2.b"] = Tensor(np.zeros(cfg.d_model), requires_grad=True)
        params[f"{p}.mlp1"] = norm(cfg.d_model, cfg.d_mlp)
        params[f"{p}.mlp2"] = norm(cfg.d_mlp, cfg.d_model)
    params["ln_f.g"] = Tensor(np.ones(cfg.d_model), requires_grad=True)
    params["ln_f.b"] = Tensor(np.zeros(cfg.d_model), requires_grad=True)
    params["w_un"] = norm(cfg.d_model, vocab_size)
    return params


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def block_forward(x: Tensor, params: dict[str, Tensor], layer: int, mask: np.ndarray, n_heads: int) -> Tensor:
    p = f"h{layer}"
    h = ad.layer_norm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
    q = ad.matmul(h, params[f"{p}.wq"])
    k = ad.matmul(h, params[f"{p}.wk"])
    v = ad.matmul(h, params[f"{p}.wv"])
    att = ad.matmul(ad.attention(q, k, v, mask, n_heads=n_heads), params[f"{p}.wo"])
    x = ad.add(x, att)
    h2 = ad.layer_norm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
    mlp = ad.matmul(ad.gelu(ad.matmul(h2, params[f"{p}.mlp1"])), params[f"{p}.mlp2"])
    return ad.add(x, mlp)


def run_layers(x: Tensor, ckpt: LmCheckpoint, mask: np.ndarray, first: int = 0, last: int | None = None) -> Tensor:
    """Apply transformer blocks [first, last) to an embedding matrix."""
    last = ckpt.config.n_layers if last is None else last
    for layer in range(first, last):
        x = block_forward(x, ckpt.params, layer, mask, ckpt.config.n_heads)
    return x


def final_hidden(x: Tensor, ckpt: LmCheckpoint) -> Tensor:
    return ad.layer_norm(x, ckpt.params["ln_f.g"], ckpt.params["ln_f.b"])


def unembed(h: Tensor, ckpt: LmCheckpoint) -> Tensor:
    return ad.matmul(h, ckpt.params["w_un"])


def embed_tokens(tokens: Sequence[int], ckpt: LmCheckpoint) -> Tensor:
    """Token + position embeddings; errors past the context window."""
    n = len(tokens)
    if n == 0:
        raise ValueError("cannot embed an empty token sequence")
    if n > ckpt.config.context:
        raise ContextLengthError(f"sequence length {n} exceeds context {ckpt.config.context}")
    tok = ad.embedding(ckpt.params["wte"], np.asarray(tokens, dtype=np.int64))
    pos = ad.embedding(ckpt.params["wpe"], np.arange(n, dtype=np.int64))
    return ad.add(tok, pos)


def lm_forward(tokens: Sequence[int], ckpt: LmCheckpoint) -> TextStates:
    """Causal forward pass over one token sequence."""
    tokens = [int(t) for t in tokens]
    x = embed_tokens(tokens, ckpt)
    x = run_layers(x, ckpt, causal_mask(len(tokens)))
    h = final_hidden(x, ckpt)
    return TextStates(tokens=tokens, hidden=h, logits=unembed(h, ckpt))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class LmTrainConfig:
    steps: int = 1400
    batch_size: int = 12
    lr: float = 1e-3
    weight_decay: float = 0.01
    heldout_fraction: float = 0.1
    log_every: int = 0  # 0 = silent


def _unigram_baseline(train_seqs: list[list[int]], held_seqs: list[list[int]], vocab_size: int) -> float:
    """Cross entropy of held-out next-tokens under the train unigram with
    add-one smoothing; the floor a trained LM must beat."""
    counts = np.ones(vocab_size)
    for seq in train_seqs:
        for t in seq[1:]:
            counts[t] += 1.0
    logp = np.log(counts / counts.sum())
    total, n = 0.0, 0
    for seq in held_seqs:
        for t in seq[1:]:
            total -= logp[t]
            n += 1
    return total / max(n, 1)


def _mean_sequence_loss(seqs: list[list[int]], ckpt: LmCheckpoint) -> float:
    total, n = 0.0, 0
    for seq in seqs:
        states = lm_forward(seq[:-1], ckpt)
        losses, _ = kernels.cross_entropy_rows(states.logits.data, np.asarray(seq[1:], dtype=np.int64))
        total += float(losses.sum())
        n += len(seq) - 1
    return total / max(n, 1)


def train_lm(corpus_tokens: list[list[int]], vocab: Vocabulary, cfg: LmConfig, train_cfg: LmTrainConfig, seed: int) -> LmCheckpoint:
    """Train from scratch on tokenized sequences and return a frozen model.

    Sequences longer than the context are rejected. A held-out slice
    (train_cfg.heldout_fraction of sequences, at least one) must end up
    below the smoothed unigram baseline, else TrainingError.
    heldout_fraction=0 evaluates on the training sequences themselves
    (memorization checks).
    """
    if not corpus_tokens:
        raise ValueError("empty corpus")
    for seq in corpus_tokens:
        if len(seq) < 2:
            raise ValueError(f"sequence too short to train on: {seq}")
        if len(seq) > cfg.context:
            raise ContextLengthError(f"corpus sequence length {len(seq)} exceeds context {cfg.context}")
    rng = rng_for(seed, "lm-train")
    order = rng.permutation(len(corpus_tokens))
    n_held = int(round(len(corpus_tokens) * train_cfg.heldout_fraction))
    if train_cfg.heldout_fraction > 0:
        n_held = max(n_held, 1)
    held = [corpus_tokens[i] for i in order[: n_held]]
    train = [corpus_tokens[i] for i in order[n_held:]]
    if not train:
        raise ValueError("heldout_fraction leaves no training sequences")
    if not held:
        held = train  # memorization mode

    params = init_lm_params(cfg, len(vocab), seed)
    ckpt = LmCheckpoint(config=cfg, vocab=vocab, params=params)
    opt = AdamW(params, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    names = list(params)
    tensors = [params[k] for k in names]

    for step in range(train_cfg.steps):
        idx = rng.integers(0, len(train), size=min(train_cfg.batch_size, len(train)))
        grads_acc: dict[str, np.ndarray] | None = None
        loss_val = 0.0
        for i in idx:
            seq = train[int(i)]
            states = lm_forward(seq[:-1], ckpt)
            loss = ad.sequence_cross_entropy(states.logits, np.asarray(seq[1:], dtype=np.int64))
            gmap = ad.backward(loss, leaves=tensors)
            loss_val += loss.item()
            if grads_acc is None:
                grads_acc = {k: gmap[t].copy() for k, t in zip(names, tensors)}
            else:
                for k, t in zip(names, tensors):
                    grads_acc[k] += gmap[t]
        scale = 1.0 / len(idx)
        for k in grads_acc:
            grads_acc[k] *= scale
        loss_val *= scale
        if not math.isfinite(loss_val):
            raise TrainingError(f"lm loss non-finite at step {step}")
        opt.step(grads_acc, lr=cosine_lr(train_cfg.lr, step, train_cfg.steps))
        if train_cfg.log_every and step % train_cfg.log_every == 0:
            print(f"lm step {step}: loss {loss_val:.4f}")

    held_loss = _mean_sequence_loss(held, ckpt)
    baseline = _unigram_baseline(train, held, len(vocab))
    if not held_loss < baseline:
        raise TrainingError(
            f"lm failed convergence check: held-out CE {held_loss:.4f} vs unigram baseline {baseline:.4f}"
        )
    return ckpt.freeze()


# ---------------------------------------------------------------------------
# scoring and sampling
# ---------------------------------------------------------------------------


def score_candidates(prompt: str, candidates: Sequence[str], ckpt: LmCheckpoint) -> list[float]:
    """Mean log-likelihood of each candidate continuation under the LM.

    Scores are order-stable and duplicates score identically.
    """
    if len(candidates) < 2:
        raise ValueError(f"need at least 2 candidates, got {len(candidates)}")
    prompt_ids = tokenize(prompt, ckpt.vocab)
    scores = []
    for cand in candidates:
        cand_ids = tokenize(cand, ckpt.vocab)[1:]  # strip BOS
        if not cand_ids:
            raise ValueError(f"candidate normalizes to nothing: {cand!r}")
        seq = prompt_ids + cand_ids
        states = lm_forward(seq[:-1], ckpt)
        logp = np.log(np.clip(softmax_rows_np(states.logits.data), 1e-300, None))
        positions = range(len(prompt_ids) - 1, len(seq) - 1)
        scores.append(float(np.mean([logp[p, seq[p + 1]] for p in positions])))
    return scores


def softmax_rows_np(logits: np.ndarray) -> np.ndarray:
    return kernels.softmax_rows(np.ascontiguousarray(logits))


def sample(
    prompt: str,
    ckpt: LmCheckpoint,
    temperature: float = 1.0,
    seed: int = 0,
    max_tokens: int = 8,
    stop_token: str = ".",
) -> str:
    """Autoregressive completion of the prompt; returns only the new text.

    temperature=0 is greedy argmax (ties to the lowest id). Stops at the
    stop token, max_tokens, or the context limit.
    """
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    ids = tokenize(prompt, ckpt.vocab)
    if len(ids) >= ckpt.config.context:
        raise ContextLengthError(f"prompt length {len(ids)} leaves no room in context {ckpt.config.context}")
    stop_id = ckpt.vocab.id_of(stop_token)
    rng = rng_for(seed, "sample")
    out: list[int] = []
    for _ in range(max_tokens):
        states = lm_forward(ids, ckpt)
        logits = states.logits.data[-1]
        if temperature == 0.0:
            nxt = int(np.argmax(logits))
        else:
            probs = softmax_rows_np((logits / temperature)[None, :])[0]
            nxt = int(rng.choice(len(probs), p=probs / probs.sum()))
        out.append(nxt)
        ids.append(nxt)
        if nxt == stop_id or len(ids) >= ckpt.config.context:
            break
    return detokenize(out, ckpt.vocab)


def mean_logprob_of_tokens(prompt_ids: list[int], completion_ids: list[int], ckpt: LmCheckpoint) -> float:
    """Mean log-prob of completion tokens given the prompt (used by best-of-N)."""
    if not completion_ids:
        return -np.inf
    seq = prompt_ids + completion_ids
    states = lm_forward(seq[:-1], ckpt)
    logp = np.log(np.clip(softmax_rows_np(states.logits.data), 1e-300, None))
    positions = range(len(prompt_ids) - 1, len(seq) - 1)
    return float(np.mean([logp[p, seq[p + 1]] for p in positions]))
