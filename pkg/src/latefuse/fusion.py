"""Visual projector + fusion attention layer over the frozen LM.

The projector (VTP) maps per-patch visual features (n_v, 32) to
pseudo-tokens (n_v, 64) via a GELU bottleneck. The fusion layer (LFAL) is
one residual cross/self-attention block: queries come from text states,
keys and values from the pseudo-tokens concatenated with the text states.
Text-to-text attention stays causal; every text position sees every
visual slot. Wo starts at zero, so at init the fused logits equal the
frozen LM's exactly.

Three placements share the same trainable parameters shape:
  late          LFAL applied to the post-final-layernorm states, then the
                frozen unembedding (the paper's main configuration)
  intermediate  LFAL spliced in after LM layer ceil(L/2)
  early         pseudo-tokens prepended as a position-free prefix before
                layer 0 (an empty prefix recovers the text-only path)

Only the projector and fusion layer train; the LM and vision encoder stay
frozen throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import percept, textlm
from . import world as world_mod
from .autodiff import Tensor
from .errors import ConfigError, ContextLengthError, ShapeError, TrainingError
from .optim import AdamW
from .seeding import derive_seed, rng_for
from .textlm import LmCheckpoint
from .world import (
    ATTRIBUTE_VALUES,
    CAPTION_TEMPLATES,
    COLOR_QUESTION,
    NEUTRAL_TEMPLATES,
    SHAPE_QUESTION,
    SIZE_QUESTION,
    PairedExample,
)

PLACEMENTS = ("early", "intermediate", "late")
D_VISUAL = 32
D_HIDDEN = 128

# Pseudo-tokens are plain tensors of shape (n_v, d_model); the alias marks
# intent at call sites.
PseudoTokens = Tensor


@dataclass(frozen=True)
class FusionVariant:
    placement: str = "late"
    multi_image: bool = True

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"unknown placement {self.placement!r}; choices: {PLACEMENTS}")

    def tag(self) -> str:
        return f"{self.placement}+{'multi' if self.multi_image else 'single'}"


@dataclass
class FusionParams:
    variant: FusionVariant
    params: dict[str, Tensor]  # proj.w2, proj.w1, attn.wq, attn.wk, attn.wv, attn.wo

    def freeze(self) -> "FusionParams":
        for t in self.params.values():
            t.freeze()
        return self

    @property
    def d_model(self) -> int:
        return self.params["proj.w1"].data.shape[1]


def init_fusion_params(d_model: int, seed: int, variant: FusionVariant | None = None) -> FusionParams:
    """Wo starts at zero so the fused model reproduces the frozen LM before
    training. Only Wo: zeroing Wv as well makes each gradient carry the
    other as a factor and the visual pathway never leaves zero."""
    rng = rng_for(seed, "fusion-init")
    scale = 0.02

    def norm(*shape):
        return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)

    params = {
        "proj.w2": norm(D_VISUAL, D_HIDDEN),
        "proj.w1": norm(D_HIDDEN, d_model),
        "attn.wq": norm(d_model, d_model),
        "attn.wk": norm(d_model, d_model),
        "attn.wv": norm(d_model, d_model),
        "attn.wo": Tensor(np.zeros((d_model, d_model)), requires_grad=True),
    }
    return FusionParams(variant=variant or FusionVariant(), params=params)


def empty_visual(d: int = D_VISUAL) -> Tensor:
    return Tensor(np.zeros((0, d)))


def vtp_forward(z_v: Tensor, fusion: FusionParams) -> PseudoTokens:
    """Project patch features (n_v, 32) to pseudo-tokens (n_v, d_model)."""
    if z_v.data.ndim != 2 or z_v.data.shape[1] != fusion.params["proj.w2"].data.shape[0]:
        raise ShapeError(
            f"visual features must be (n_v, {fusion.params['proj.w2'].data.shape[0]}), got {z_v.data.shape}"
        )
    return ad.matmul(ad.gelu(ad.matmul(z_v, fusion.params["proj.w2"])), fusion.params["proj.w1"])


def fusion_mask(n_text: int, n_visual: int) -> np.ndarray:
    """(T, n_v+T) key mask: visual slots fully visible, text causal."""
    mask = np.zeros((n_text, n_visual + n_text), dtype=bool)
    mask[:, :n_visual] = True
    mask[:, n_visual:] = np.tril(np.ones((n_text, n_text), dtype=bool))
    return mask


def lfal_residual(u_v: PseudoTokens, h: Tensor, fusion: FusionParams) -> Tensor:
    """h + attention(h Wq, [u; h] Wk, [u; h] Wv) Wo, single head."""
    p = fusion.params
    if h.data.shape[1] != p["attn.wq"].data.shape[0]:
        raise ShapeError(f"text states dim {h.data.shape[1]} does not match fusion dim {p['attn.wq'].data.shape[0]}")
    n_v = u_v.data.shape[0]
    kv = ad.concat_rows([u_v, h]) if n_v else h
    q = ad.matmul(h, p["attn.wq"])
    k = ad.matmul(kv, p["attn.wk"])
    v = ad.matmul(kv, p["attn.wv"])
    att = ad.attention(q, k, v, fusion_mask(h.data.shape[0], n_v))
    return ad.add(h, ad.matmul(att, p["attn.wo"]))


def lfal_forward(u_v: PseudoTokens, hidden: Tensor, fusion: FusionParams, lm: LmCheckpoint) -> Tensor:
    """Late placement: fuse post-layernorm states, project to logits."""
    return textlm.unembed(lfal_residual(u_v, hidden, fusion), lm)


def mid_layer(lm: LmCheckpoint) -> int:
    return math.ceil(lm.config.n_layers / 2)


def early_mask(n_text: int, n_visual: int) -> np.ndarray:
    """Square mask over [visual; text] rows: visual rows see all visual,
    text rows see all visual plus causal text."""
    n = n_visual + n_text
    mask = np.zeros((n, n), dtype=bool)
    mask[:n_visual, :n_visual] = True
    mask[n_visual:, :n_visual] = True
    mask[n_visual:, n_visual:] = np.tril(np.ones((n_text, n_text), dtype=bool))
    return mask


def early_forward_full(tokens: Sequence[int], u_v: PseudoTokens, fusion: FusionParams, lm: LmCheckpoint) -> Tensor:
    """Early placement, all rows: (n_v + T, |V|) logits. Text rows shift by
    n_v slots; the visual prefix carries no position embeddings."""
    n_v = u_v.data.shape[0]
    n = len(tokens)
    if n_v + n > lm.config.context:
        raise ContextLengthError(f"prefix {n_v} + text {n} exceeds context {lm.config.context}")
    text_emb = textlm.embed_tokens(tokens, lm)
    x = ad.concat_rows([u_v, text_emb]) if n_v else text_emb
    x = textlm.run_layers(x, lm, early_mask(n, n_v))
    return textlm.unembed(textlm.final_hidden(x, lm), lm)


def intermediate_from_mid(u_v: PseudoTokens, x_mid: Tensor, fusion: FusionParams, lm: LmCheckpoint) -> Tensor:
    """Resume the frozen stack after splicing the fusion block at mid."""
    x = lfal_residual(u_v, x_mid, fusion)
    x = textlm.run_layers(x, lm, textlm.causal_mask(x.data.shape[0]), first=mid_layer(lm))
    return textlm.unembed(textlm.final_hidden(x, lm), lm)


def text_mid_states(tokens: Sequence[int], lm: LmCheckpoint) -> Tensor:
    """Hidden states entering the intermediate fusion point."""
    x = textlm.embed_tokens(tokens, lm)
    return textlm.run_layers(x, lm, textlm.causal_mask(len(tokens)), first=0, last=mid_layer(lm))


def fuse_forward(tokens: Sequence[int], z_v: Tensor, fusion: FusionParams, lm: LmCheckpoint) -> Tensor:
    """Fused logits at the text positions, (T, |V|), for any placement.

    z_v is the (n_v, 32) visual feature matrix; an empty (0, 32) matrix is
    allowed and leaves the early path identical to the frozen LM.
    """
    u_v = vtp_forward(z_v, fusion) if z_v.data.shape[0] else Tensor(np.zeros((0, fusion.d_model)))
    placement = fusion.variant.placement
    if placement == "late":
        states = textlm.lm_forward(tokens, lm)
        return lfal_forward(u_v, states.hidden, fusion, lm)
    if placement == "intermediate":
        return intermediate_from_mid(u_v, text_mid_states(tokens, lm), fusion, lm)
    full = early_forward_full(tokens, u_v, fusion, lm)
    return ad.slice_rows(full, u_v.data.shape[0], u_v.data.shape[0] + len(tokens))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class FusionTrainConfig:
    # two stages at a 4:1 step ratio; the long first stage matters because
    # the layer learns in phases (suppress the text prior, then read the
    # image) and stopping mid-transition leaves a scrambled attribute map
    stage1_steps: int = 6000
    stage1_lr: float = 5e-4
    stage2_steps: int = 1500
    stage2_lr: float = 5e-5
    batch_size: int = 16
    weight_decay: float = 0.01
    # attribute-word targets get this CE weight; at 1.0 the grounding signal
    # (the only part the image can improve) drowns in template-choice entropy
    attr_weight: float = 8.0
    # probability of replacing the object name with a random one per visit;
    # names predict attributes on training pairs, so without the swap the
    # layer learns a text shortcut and never reads the image
    name_swap: float = 1.0
    check_pairs: int = 64  # sample size for the attribute-loss exit check
    log_every: int = 0


def _attr_token_ids(vocab) -> set[int]:
    ids = set()
    for values in ATTRIBUTE_VALUES.values():
        for v in values:
            if v in vocab:
                ids.add(vocab.id_of(v))
    return ids


def _name_token_ids(pairs: Sequence[PairedExample], vocab) -> set[int]:
    """Object-name token ids, inferred as corpus tokens that are neither
    template literals, attribute values, nor answer words."""
    literal = {"yes", "no"}
    for tpl in (*CAPTION_TEMPLATES, *NEUTRAL_TEMPLATES, COLOR_QUESTION, SHAPE_QUESTION, SIZE_QUESTION):
        for word in tpl.split():
            if not (word.startswith("{") and word.endswith("}")):
                literal.add(word)
    for values in ATTRIBUTE_VALUES.values():
        literal.update(values)
    names = set()
    for p in pairs:
        for tok in p.text.lower().split():
            if tok not in literal and tok in vocab:
                names.add(vocab.id_of(tok))
    return names


def _pair_forward(idx: int, z_arr: np.ndarray, fusion: FusionParams, lm: LmCheckpoint, tokens, late_cache, mid_cache) -> Tensor:
    """Fused logits for pair idx, reusing cached text states where the
    placement allows (text states never depend on the image)."""
    toks = tokens[idx]
    u_v = vtp_forward(Tensor(z_arr), fusion)
    placement = fusion.variant.placement
    if placement == "late":
        return lfal_forward(u_v, Tensor(late_cache[idx]), fusion, lm)
    if placement == "intermediate":
        return intermediate_from_mid(u_v, Tensor(mid_cache[idx]), fusion, lm)
    full = early_forward_full(toks, u_v, fusion, lm)
    return ad.slice_rows(full, u_v.data.shape[0], u_v.data.shape[0] + len(toks))


def train_fusion(
    paired_set: Sequence[PairedExample],
    lm: LmCheckpoint,
    vision: percept.DualEncoderCheckpoint,
    cfg: FusionTrainConfig,
    seed: int,
    variant: FusionVariant | None = None,
) -> FusionParams:
    """Two-stage training of projector + fusion layer on (text, image) pairs.

    The frozen LM and vision encoder are never updated (their buffers are
    write-locked). Exit checks: loss finite throughout, and the fused
    model's cross entropy on attribute-word tokens beats the frozen LM's
    on a sampled subset, else TrainingError.
    """
    pairs = list(paired_set)
    if not pairs:
        raise ValueError("empty paired set")
    variant = variant or FusionVariant()
    fusion = init_fusion_params(lm.config.d_model, seed, variant)
    rng = rng_for(seed, "fusion-train", variant.placement)

    tokens = [textlm.tokenize(p.text, lm.vocab) for p in pairs]
    budget = lm.config.context - (16 if variant.placement == "early" else 0)
    for t in tokens:
        if len(t) > budget:
            raise ContextLengthError(f"pair text length {len(t)} exceeds budget {budget} for {variant.placement}")
    attr_ids = _attr_token_ids(lm.vocab)
    weight_cache = [
        np.where(np.isin(np.asarray(t[1:]), list(attr_ids)), cfg.attr_weight, 1.0) for t in tokens
    ]
    name_ids = _name_token_ids(pairs, lm.vocab)
    name_pool = sorted(name_ids)
    # swap applies only to single-name lines; size comparisons name two
    # objects and a swap would break the yes/no semantics
    swap_pos: list[int | None] = []
    for t in tokens:
        hits = [p for p, tok in enumerate(t) if tok in name_ids]
        swap_pos.append(hits[0] if len(hits) == 1 else None)
    z_cache = [percept.encode_image(p.image, vision).data for p in pairs]
    late_cache = None
    mid_cache = None
    if variant.placement == "late":
        late_cache = [textlm.lm_forward(t, lm).hidden.data for t in tokens]
    elif variant.placement == "intermediate":
        mid_cache = [text_mid_states(t, lm).data for t in tokens]

    opt = AdamW(fusion.params, lr=cfg.stage1_lr, weight_decay=cfg.weight_decay)
    names = list(fusion.params)
    tensors = [fusion.params[k] for k in names]
    stages = ((cfg.stage1_steps, cfg.stage1_lr), (cfg.stage2_steps, cfg.stage2_lr))
    step_total = 0
    for stage_steps, stage_lr in stages:
        for _ in range(stage_steps):
            idx = rng.integers(0, len(pairs), size=min(cfg.batch_size, len(pairs)))
            grads_acc: dict[str, np.ndarray] | None = None
            loss_val = 0.0
            for i in idx:
                i = int(i)
                # fresh jitter per visit: evaluation renders unseen images,
                # and a fixed render per pair overfits exact patch layouts
                sample = world_mod.render(
                    pairs[i].image.drawn, derive_seed(seed, "aug", step_total, i), 0.0
                )
                z_i = percept.encode_image(sample, vision).data
                pos = swap_pos[i]
                if pos is not None and name_pool and rng.random() < cfg.name_swap:
                    seq = list(tokens[i])
                    seq[pos] = name_pool[int(rng.integers(len(name_pool)))]
                    logits = fuse_forward(seq, Tensor(z_i), fusion, lm)
                    toks = seq
                else:
                    logits = _pair_forward(i, z_i, fusion, lm, tokens, late_cache, mid_cache)
                    toks = tokens[i]
                loss = ad.sequence_cross_entropy(
                    ad.slice_rows(logits, 0, len(toks) - 1),
                    np.asarray(toks[1:], dtype=np.int64),
                    weights=weight_cache[i],
                )
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
                raise TrainingError(f"fusion loss non-finite at step {step_total}")
            opt.step(grads_acc, lr=stage_lr)
            if cfg.log_every and step_total % cfg.log_every == 0:
                print(f"fusion[{variant.tag()}] step {step_total}: loss {loss_val:.4f}")
            step_total += 1

    fusion.freeze()
    _attribute_improvement_check(
        pairs, tokens, z_cache, late_cache, mid_cache, swap_pos, name_pool, fusion, lm, cfg, rng
    )
    return fusion


def _attribute_improvement_check(
    pairs, tokens, z_cache, late_cache, mid_cache, swap_pos, name_pool, fusion, lm, cfg, rng
) -> None:
    """Fused CE on attribute-word targets must beat the frozen LM's on the
    training stream: name-swapped lines when the swap is on, so the image
    is the only attribute source, else the original pairs."""
    attr_ids = _attr_token_ids(lm.vocab)
    sample = rng.permutation(len(pairs))[: cfg.check_pairs]
    fused_losses: list[float] = []
    frozen_losses: list[float] = []
    for i in sample:
        i = int(i)
        seq = list(tokens[i])
        pos = swap_pos[i]
        swapped = pos is not None and bool(name_pool) and cfg.name_swap > 0
        if swapped:
            seq[pos] = name_pool[int(rng.integers(len(name_pool)))]
        targets = np.asarray(seq[1:], dtype=np.int64)
        attr_pos = [p for p, t in enumerate(targets) if int(t) in attr_ids]
        if not attr_pos:
            continue
        if swapped:
            fused_rows = fuse_forward(seq, Tensor(z_cache[i]), fusion, lm).data
        else:
            fused_rows = _pair_forward(i, z_cache[i], fusion, lm, tokens, late_cache, mid_cache).data
        frozen_rows = textlm.lm_forward(seq, lm).logits.data
        for p in attr_pos:
            fused_losses.append(_row_ce(fused_rows[p], targets[p]))
            frozen_losses.append(_row_ce(frozen_rows[p], targets[p]))
    if not fused_losses:
        return  # corpus with no attribute words; nothing to check
    fused_mean = float(np.mean(fused_losses))
    frozen_mean = float(np.mean(frozen_losses))
    if not fused_mean < frozen_mean:
        raise TrainingError(
            f"fusion exit check failed: attribute-token CE {fused_mean:.4f} not below frozen LM {frozen_mean:.4f}"
        )


def _row_ce(logit_row: np.ndarray, target: int) -> float:
    m = logit_row.max()
    return float(np.log(np.exp(logit_row - m).sum()) + m - logit_row[target])
