"""Contrastive dual encoder and alignment scoring.

The image tower embeds 4x4 patches to 32-d, runs one self-attention block
with no positional signal (patch order is irrelevant by construction) and
mean-pools into a unit-norm joint vector. The text tower is a bag of
32-d token embeddings, mean-pooled and unit-normalized. Training uses the
symmetric in-batch cross entropy with a learnable temperature.

Alignment maps a cosine onto a confidence f in [0,1] through a fixed
affine calibration (1st/99th percentile of matched-pair cosines). The
oracle variant bypasses the encoder entirely: f is the fraction of the
prompt's referenced attributes that the image actually shows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import world as world_mod
from .autodiff import Tensor
from .errors import ShapeError, TrainingError
from .optim import AdamW, cosine_lr
from .seeding import derive_seed, rng_for
from .textlm import BOS_ID, PAD_ID, Vocabulary, tokenize

D_JOINT = 32
PATCH_DIM = world_mod.PATCH_SIDE * world_mod.PATCH_SIDE * 3  # 48
MAX_LOGIT_SCALE = math.log(100.0)


@dataclass
class DualEncoderCheckpoint:
    vocab: Vocabulary
    params: dict[str, Tensor]

    def freeze(self) -> "DualEncoderCheckpoint":
        for t in self.params.values():
            t.freeze()
        return self


@dataclass(frozen=True)
class Calibration:
    """Affine cosine -> confidence map, frozen after encoder training."""

    s_lo: float
    s_hi: float

    def confidence(self, cosine: float) -> float:
        span = self.s_hi - self.s_lo
        if span <= 0:
            span = 1e-6
        return float(np.clip((cosine - self.s_lo) / span, 0.0, 1.0))


@dataclass
class AlignmentScore:
    raw: float  # cosine for the learned scorer, match fraction for the oracle
    f: float  # calibrated confidence in [0, 1]
    warned: bool = False  # oracle could not parse the prompt


def init_dual_params(vocab_size: int, seed: int) -> dict[str, Tensor]:
    rng = rng_for(seed, "dual-init")
    scale = 0.05

    def norm(*shape):
        return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)

    return {
        "patch_w": norm(PATCH_DIM, D_JOINT),
        "pos_emb": norm(world_mod.N_PATCHES, D_JOINT),
        "ln.g": Tensor(np.ones(D_JOINT), requires_grad=True),
        "ln.b": Tensor(np.zeros(D_JOINT), requires_grad=True),
        "wq": norm(D_JOINT, D_JOINT),
        "wk": norm(D_JOINT, D_JOINT),
        "wv": norm(D_JOINT, D_JOINT),
        "wo": norm(D_JOINT, D_JOINT),
        "pool_w": norm(D_JOINT, D_JOINT),
        "tok_emb": norm(vocab_size, D_JOINT),
        "logit_scale": Tensor(np.asarray(math.log(1.0 / 0.07)), requires_grad=True),
    }


def encode_image(sample: world_mod.ImageSample, ckpt: DualEncoderCheckpoint) -> Tensor:
    """Per-patch features z_v, shape (16, 32)."""
    return encode_patches(world_mod.image_patches(sample.pixels), ckpt)


def encode_patches(patches: np.ndarray, ckpt: DualEncoderCheckpoint) -> Tensor:
    """Patch projection + grid position embedding, one full-visibility
    attention mix, residual. Positions matter: thin shapes (bar, triangle)
    are indistinguishable from coverage statistics alone."""
    if patches.shape != (world_mod.N_PATCHES, PATCH_DIM):
        raise ShapeError(f"expected patches {(world_mod.N_PATCHES, PATCH_DIM)}, got {patches.shape}")
    p = ckpt.params
    x = ad.add(ad.matmul(Tensor(patches), p["patch_w"]), p["pos_emb"])
    h = ad.layer_norm(x, p["ln.g"], p["ln.b"])
    q = ad.matmul(h, p["wq"])
    k = ad.matmul(h, p["wk"])
    v = ad.matmul(h, p["wv"])
    full = np.ones((world_mod.N_PATCHES, world_mod.N_PATCHES), dtype=bool)
    att = ad.matmul(ad.attention(q, k, v, full), p["wo"])
    return ad.add(x, att)


def _mean_rows(x: Tensor) -> Tensor:
    """Row mean kept as a (1, d) matrix (a constant-weight matmul)."""
    n = x.data.shape[0]
    return ad.matmul(Tensor(np.full((1, n), 1.0 / n)), x)


def _joint_from_patch_features(z: Tensor, ckpt: DualEncoderCheckpoint) -> Tensor:
    pooled = ad.matmul(_mean_rows(z), ckpt.params["pool_w"])
    return ad.reshape(ad.l2_normalize_rows(pooled), (D_JOINT,))


def image_joint(sample: world_mod.ImageSample, ckpt: DualEncoderCheckpoint) -> Tensor:
    """Unit-norm joint-space embedding of one image, shape (32,)."""
    return _joint_from_patch_features(encode_image(sample, ckpt), ckpt)


def text_joint(text_ids: Sequence[int], ckpt: DualEncoderCheckpoint) -> Tensor:
    """Unit-norm bag-of-embeddings text vector, shape (32,). Special tokens
    (PAD/BOS) are excluded from the bag."""
    ids = [int(t) for t in text_ids if int(t) not in (PAD_ID, BOS_ID)]
    if not ids:
        raise ValueError("text contains no content tokens")
    rows = ad.embedding(ckpt.params["tok_emb"], np.asarray(ids, dtype=np.int64))
    pooled = _mean_rows(rows)
    return ad.reshape(ad.l2_normalize_rows(pooled), (D_JOINT,))


def cosine(a: Tensor, b: Tensor) -> float:
    return float(a.data @ b.data)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class PerceptTrainConfig:
    steps: int = 1800
    batch_size: int = 32  # bounded by the number of distinct appearance bundles
    lr: float = 2e-3
    weight_decay: float = 1e-4
    heldout_pairs: int = 32
    retrieval_floor: float = 0.90
    # extra sampling weight on neutral pairs: they are the only place the
    # tower can learn what a *named* object looks like (captions already
    # spell the attributes out), and that name channel is what alignment
    # scoring leans on for objects with no attribute sentences
    neutral_boost: int = 3
    log_every: int = 0


def _distinct_caption_sample(pairs, rng: np.random.Generator, count: int) -> list[int]:
    """Pick caption-pair indices whose attribute bundles are pairwise
    distinct, so retrieval has a unique right answer per row. Objects carry
    distinct bundles, so this is one caption per object."""
    order = rng.permutation(len(pairs))
    seen = set()
    picked: list[int] = []
    for i in order:
        pair = pairs[int(i)]
        if pair.kind != "caption":
            continue
        key = pair.image.requested
        if key in seen:
            continue
        seen.add(key)
        picked.append(int(i))
        if len(picked) == count:
            return picked
    raise ValueError(f"could not find {count} caption pairs with distinct appearances (got {len(picked)})")


def train_dual_encoder(
    paired_set: Sequence[world_mod.PairedExample],
    vocab: Vocabulary,
    cfg: PerceptTrainConfig,
    seed: int,
) -> tuple[DualEncoderCheckpoint, Calibration]:
    """Contrastive training; returns the frozen encoder plus calibration.

    Holds out cfg.heldout_pairs caption pairs (one per appearance bundle)
    and requires top-1 caption-to-image retrieval on them to reach
    cfg.retrieval_floor, else TrainingError. Calibration comes from
    calibrate() on the run-time-form split of the same paired set.
    """
    pairs = list(paired_set)
    if len(pairs) < 64:
        raise ValueError(f"need at least 64 paired examples, got {len(pairs)}")
    rng = rng_for(seed, "dual-train")
    held_idx = _distinct_caption_sample(pairs, rng, cfg.heldout_pairs)
    held_set = set(held_idx)
    train_idx = [i for i in range(len(pairs)) if i not in held_set]
    boost = max(int(cfg.neutral_boost), 1)
    sample_pool = train_idx + [
        i for i in train_idx if pairs[i].kind == "neutral" for _ in range(boost - 1)
    ]

    params = init_dual_params(len(vocab), seed)
    ckpt = DualEncoderCheckpoint(vocab=vocab, params=params)
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    names = list(params)
    tensors = [params[k] for k in names]

    token_cache = [tokenize(p.text, vocab) for p in pairs]

    for step in range(cfg.steps):
        # batch rows must carry distinct appearances or in-batch CE punishes
        # a text for matching another row's equally-correct image
        chosen: list[int] = []
        seen_keys = set()
        for j in rng.permutation(len(sample_pool)):
            i = sample_pool[int(j)]
            key = pairs[i].image.requested
            if key in seen_keys:
                continue
            seen_keys.add(key)
            chosen.append(i)
            if len(chosen) == cfg.batch_size:
                break
        # fresh jitter each visit; otherwise the tower memorizes exact
        # patch layouts and misranks unseen renders of the same object
        batch_patches = [
            world_mod.image_patches(
                world_mod.render(
                    pairs[i].image.drawn, derive_seed(seed, "aug", step, i), 0.0
                ).pixels
            )
            for i in chosen
        ]
        text_vecs = [text_joint(token_cache[i], ckpt) for i in chosen]
        img_vecs = [
            _joint_from_patch_features(encode_patches(bp, ckpt), ckpt) for bp in batch_patches
        ]
        t_mat = ad.stack_rows(text_vecs)
        i_mat = ad.stack_rows(img_vecs)
        logits = ad.mul(ad.matmul(t_mat, ad.transpose(i_mat)), ad.exp(params["logit_scale"]))
        targets = np.arange(len(chosen), dtype=np.int64)
        loss = ad.mul(
            ad.add(
                ad.sequence_cross_entropy(logits, targets),
                ad.sequence_cross_entropy(ad.transpose(logits), targets),
            ),
            0.5,
        )
        if not math.isfinite(loss.item()):
            raise TrainingError(f"dual encoder loss non-finite at step {step}")
        gmap = ad.backward(loss, leaves=tensors)
        opt.step({k: gmap[t] for k, t in zip(names, tensors)}, lr=cosine_lr(cfg.lr, step, cfg.steps))
        np.clip(params["logit_scale"].data, None, MAX_LOGIT_SCALE, out=params["logit_scale"].data)
        if cfg.log_every and step % cfg.log_every == 0:
            print(f"dual step {step}: loss {loss.item():.4f}")

    ckpt.freeze()
    acc = _retrieval_accuracy(ckpt, [pairs[i] for i in held_idx], [token_cache[i] for i in held_idx])
    if acc < cfg.retrieval_floor:
        raise TrainingError(
            f"dual encoder retrieval check failed: top-1 {acc:.3f} < {cfg.retrieval_floor:.2f} on {len(held_idx)} held-out pairs"
        )
    return ckpt, calibrate(ckpt, pairs)


def calibration_split(pairs: Sequence[world_mod.PairedExample]) -> list[tuple[str, world_mod.ImageSample]]:
    """Matched (text, image) pairs in the form alignment sees at run time.

    Run-time prompts name an object and ask for an attribute; they never
    state one. Captions therefore do not belong in the split: their stated
    attributes inflate the cosine range and push real prompts below s_lo.
    Neutral lines go in as-is, question lines with the answer removed."""
    attr_values = set(world_mod.COLORS) | set(world_mod.SHAPES) | set(world_mod.SIZES)
    split = []
    for pair in pairs:
        if pair.kind == "neutral":
            split.append((pair.text, pair.image))
        elif pair.kind == "qa":
            toks = pair.text.split()
            if toks and toks[-1] == ".":
                toks = toks[:-1]
            if toks and toks[-1] in attr_values:
                toks = toks[:-1]
            split.append((" ".join(toks), pair.image))
    return split


def calibrate(ckpt: DualEncoderCheckpoint, pairs: Sequence[world_mod.PairedExample]) -> Calibration:
    """Affine confidence endpoints: 1st/99th percentile of matched-pair
    cosines over the run-time-form calibration split."""
    cosines = []
    for text, image in calibration_split(pairs):
        t = text_joint(tokenize(text, ckpt.vocab), ckpt)
        v = image_joint(image, ckpt)
        cosines.append(cosine(t, v))
    if len(cosines) < 2:
        raise ValueError("calibration split needs at least 2 matched pairs")
    s_lo = float(np.percentile(cosines, 1.0))
    s_hi = float(np.percentile(cosines, 99.0))
    return Calibration(s_lo=s_lo, s_hi=s_hi)


def _retrieval_accuracy(ckpt, pairs, token_lists) -> float:
    texts = np.stack([text_joint(t, ckpt).data for t in token_lists])
    imgs = np.stack([image_joint(p.image, ckpt).data for p in pairs])
    sims = texts @ imgs.T
    return float((sims.argmax(axis=1) == np.arange(len(pairs))).mean())


# ---------------------------------------------------------------------------
# alignment scoring
# ---------------------------------------------------------------------------


def alignment(
    prompt: str,
    sample: world_mod.ImageSample,
    ckpt: DualEncoderCheckpoint,
    calibration: Calibration,
) -> AlignmentScore:
    """Learned prompt/image agreement: calibrated cosine in joint space."""
    t = text_joint(tokenize(prompt, ckpt.vocab), ckpt)
    v = image_joint(sample, ckpt)
    raw = cosine(t, v)
    return AlignmentScore(raw=raw, f=calibration.confidence(raw))


def oracle_alignment(expected: Mapping[str, str] | None, sample: world_mod.ImageSample) -> AlignmentScore:
    """Ground-truth agreement: fraction of referenced attributes the image
    actually shows. None/empty expected means the prompt was unparseable;
    falls back to f=0 with the warning flag set."""
    if not expected:
        return AlignmentScore(raw=0.0, f=0.0, warned=True)
    drawn = sample.drawn.as_dict()
    hits = sum(1 for slot, value in expected.items() if drawn.get(slot) == value)
    f = hits / len(expected)
    return AlignmentScore(raw=f, f=f)
