"""Multi-image inference: generate, fuse, weigh, aggregate.

For a prompt, the engine renders k images from the ground-truth-aware
generator (per-image seeds are seed+i), computes the frozen text-only
next-token distribution p_0 and one fused distribution p_i per image,
scores prompt/image agreement f_i, and reduces everything with the
configured aggregation strategy.

The confidence-weighted "clip_fusion" mixture is computed as

    acc  = mean(1 - f) * p_0
    acc += (f_i / k) * p_i        (ascending image index)

so f == 0 returns p_0 bit-for-bit, f == 1 returns the uniform average of
the per-image distributions bit-for-bit, and the total-variation distance
from p_0 is provably bounded by mean(f).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import fusion as fusion_mod
from . import percept, textlm, world as world_mod
from .autodiff import Tensor
from .errors import ConfigError
from .percept import AlignmentScore, Calibration, DualEncoderCheckpoint
from .seeding import derive_seed
from .textlm import LmCheckpoint
from .world import ImageSample, WorldSpec

STRATEGIES = (
    "clip_fusion",
    "average_logits",
    "max_confidence",
    "single_image",
    "text_only",
    "entropy_weighted",
)
METHODS = STRATEGIES + ("best_of_n",)
ALIGNMENT_MODES = ("learned", "oracle")
IMAGE_SOURCES = ("generate", "retrieve")


@dataclass(frozen=True)
class InferenceConfig:
    k: int = 6
    strategy: str = "clip_fusion"
    epsilon: float = 0.0
    alignment: str = "learned"
    seed: int = 0
    tau: float = 1.0
    image_source: str = "generate"
    n_samples: int | None = None  # best_of_n budget; None = calibrate
    sample_max_tokens: int = 3  # completion length for best_of_n draws

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.strategy not in METHODS:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choices: {METHODS}")
        if self.strategy == "single_image" and self.k != 1:
            raise ConfigError(f"single_image requires k=1, got k={self.k}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must be in [0,1], got {self.epsilon}")
        if self.alignment not in ALIGNMENT_MODES:
            raise ConfigError(f"unknown alignment mode {self.alignment!r}")
        if self.image_source not in IMAGE_SOURCES:
            raise ConfigError(f"unknown image source {self.image_source!r}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")

    def replace(self, **kw) -> "InferenceConfig":
        from dataclasses import replace as dc_replace

        return dc_replace(self, **kw)


@dataclass
class ModelBundle:
    """Everything inference needs, trained and frozen."""

    lm: LmCheckpoint
    vision: DualEncoderCheckpoint | None = None
    fusion: fusion_mod.FusionParams | None = None
    calibration: Calibration | None = None
    world: WorldSpec | None = None


@dataclass
class ImagePrediction:
    index: int
    probs: np.ndarray  # fused next-token distribution (|V|,)
    align: AlignmentScore
    sample: ImageSample


@dataclass
class PredictionBundle:
    prompt: str
    text_probs: np.ndarray  # frozen-LM next-token distribution (|V|,)
    images: list[ImagePrediction] = field(default_factory=list)
    strategy: str = "clip_fusion"
    tau: float = 1.0
    final: np.ndarray | None = None

    def confidences(self) -> list[float]:
        return [im.align.f for im in self.images]


def generate_images(prompt: str, k: int, seed: int, epsilon: float, world: WorldSpec) -> list[ImageSample]:
    """k renders for the prompt, index-ordered, render seeds seed+i."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    return [world_mod.generator_image(prompt, world, seed + i, epsilon) for i in range(k)]


def _next_token_probs(logit_rows: np.ndarray) -> np.ndarray:
    return textlm.softmax_rows_np(logit_rows)[-1]


def fused_logit_rows(tokens: Sequence[int], sample: ImageSample, bundle: ModelBundle) -> np.ndarray:
    """(T, |V|) fused logits for one image; all components frozen."""
    z = percept.encode_image(sample, bundle.vision)
    return fusion_mod.fuse_forward(tokens, z, bundle.fusion, bundle.lm).data


def image_confidence(prompt: str, sample: ImageSample, bundle: ModelBundle, mode: str) -> AlignmentScore:
    if mode == "oracle":
        expected = world_mod.expected_attributes(prompt, bundle.world)
        score = percept.oracle_alignment(expected, sample)
        if score.warned:
            warnings.warn(f"oracle alignment could not parse prompt {prompt!r}; using f=0")
        return score
    return percept.alignment(prompt, sample, bundle.vision, bundle.calibration)


def predict_distributions(
    prompt: str,
    images: Sequence[ImageSample],
    bundle: ModelBundle,
    config: InferenceConfig,
) -> PredictionBundle:
    """Next-token distributions and confidences for a prompt + image set."""
    tokens = textlm.tokenize(prompt, bundle.lm.vocab)
    text_probs = _next_token_probs(textlm.lm_forward(tokens, bundle.lm).logits.data)
    preds: list[ImagePrediction] = []
    for i, sample in enumerate(images):
        probs = _next_token_probs(fused_logit_rows(tokens, sample, bundle))
        align = image_confidence(prompt, sample, bundle, config.alignment)
        preds.append(ImagePrediction(index=i, probs=probs, align=align, sample=sample))
    return PredictionBundle(
        prompt=prompt,
        text_probs=text_probs,
        images=preds,
        strategy=config.strategy,
        tau=config.tau,
    )


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats; 0 log 0 treated as 0."""
    p = np.asarray(p)
    mask = p > 0
    return float(-(p[mask] * np.log(p[mask])).sum())


def combine_rows(
    p0: np.ndarray,
    per_image: Sequence[np.ndarray],
    f: Sequence[float],
    strategy: str,
    tau: float = 1.0,
) -> np.ndarray:
    """Aggregate matching-shape distribution arrays (vector or row matrix).

    Every strategy reduces in a fixed (index) order so results are
    bit-reproducible; see the module docstring for the clip_fusion form.
    """
    if strategy == "text_only":
        return p0.copy()
    k = len(per_image)
    if k == 0:
        raise ValueError(f"strategy {strategy!r} needs at least one image distribution")
    if strategy == "single_image":
        return per_image[0].copy()
    if strategy == "clip_fusion":
        if len(f) != k:
            raise ValueError(f"{k} image distributions but {len(f)} confidences")
        w0 = float(np.sum([1.0 - fi for fi in f]) / k)
        acc = w0 * p0
        for fi, pi in zip(f, per_image):
            acc += (fi / k) * pi
        return acc
    if strategy == "average_logits":
        # historical tag from the baseline table; averages the normalized
        # per-image distributions, identical to clip_fusion at f=1
        acc = 0.0 * p0
        inv = 1.0 / k
        for pi in per_image:
            acc += inv * pi
        return acc
    if strategy == "max_confidence":
        if p0.ndim == 1:
            ents = [entropy(pi) for pi in per_image]
            return per_image[int(np.argmin(ents))].copy()
        out = np.empty_like(p0)
        for r in range(p0.shape[0]):
            ents = [entropy(pi[r]) for pi in per_image]
            out[r] = per_image[int(np.argmin(ents))][r]
        return out
    if strategy == "entropy_weighted":
        pool = [p0] + [pi for pi in per_image]
        if p0.ndim == 1:
            logw = np.array([-entropy(p) / tau for p in pool])
            w = np.exp(logw - logw.max())
            w /= w.sum()
            acc = w[0] * p0
            for wi, pi in zip(w[1:], per_image):
                acc += wi * pi
            return acc
        out = np.empty_like(p0)
        for r in range(p0.shape[0]):
            logw = np.array([-entropy(p[r]) / tau for p in pool])
            w = np.exp(logw - logw.max())
            w /= w.sum()
            acc = w[0] * p0[r]
            for wi, pi in zip(w[1:], per_image):
                acc += wi * pi[r]
            out[r] = acc
        return out
    raise ConfigError(f"unknown aggregation strategy {strategy!r}; choices: {STRATEGIES}")


def aggregate(bundle: PredictionBundle, strategy: str | None = None, tau: float | None = None) -> np.ndarray:
    """Final next-token distribution under the bundle's (or given) strategy."""
    strategy = bundle.strategy if strategy is None else strategy
    tau = bundle.tau if tau is None else tau
    final = combine_rows(
        bundle.text_probs,
        [im.probs for im in bundle.images],
        bundle.confidences(),
        strategy,
        tau,
    )
    bundle.final = final
    return final


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def best_of_n(
    prompt: str,
    n: int,
    lm: LmCheckpoint,
    seed: int = 0,
    temperature: float = 1.0,
    max_tokens: int = 8,
    return_details: bool = False,
):
    """Draw n temperature-1 completions, return the highest mean-log-prob one.

    Ties (including exact duplicates) resolve to the lowest sample index.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    prompt_ids = textlm.tokenize(prompt, lm.vocab)
    completions: list[str] = []
    scores: list[float] = []
    for j in range(n):
        text = textlm.sample(
            prompt, lm, temperature=temperature, seed=derive_seed(seed, "best-of-n", j), max_tokens=max_tokens
        )
        ids = textlm.tokenize(text, lm.vocab)[1:]
        completions.append(text)
        scores.append(textlm.mean_logprob_of_tokens(prompt_ids, ids, lm))
    best = int(np.argmax(scores))
    if return_details:
        return completions[best], completions, scores, best
    return completions[best]


def embedding_substitute_predict(prompt: str, bundle: ModelBundle) -> np.ndarray:
    """Ablation: replace every visual slot with the prompt's own text-tower
    embedding, then run the usual fusion path."""
    tokens = textlm.tokenize(prompt, bundle.lm.vocab)
    t_vec = percept.text_joint(tokens, bundle.vision).data
    z_sub = Tensor(np.tile(t_vec, (world_mod.N_PATCHES, 1)))
    rows = fusion_mod.fuse_forward(tokens, z_sub, bundle.fusion, bundle.lm).data
    return _next_token_probs(rows)


def select_from_gallery(
    prompt: str,
    gallery: Sequence[ImageSample],
    bundle: ModelBundle,
    config: InferenceConfig,
) -> list[ImageSample]:
    """Top-k gallery images by alignment score; ties keep gallery order
    (stable sort). A gallery smaller than k warns and returns everything."""
    if not gallery:
        raise ValueError("empty gallery")
    scores = [image_confidence(prompt, s, bundle, config.alignment).raw for s in gallery]
    k = config.k
    if len(gallery) < k:
        warnings.warn(f"gallery has {len(gallery)} images for k={k}; using all of them")
        k = len(gallery)
    order = np.argsort(-np.asarray(scores), kind="stable")[:k]
    return [gallery[int(i)] for i in order]


def retrieval_predict(
    prompt: str,
    gallery: Sequence[ImageSample],
    bundle: ModelBundle,
    config: InferenceConfig,
) -> PredictionBundle:
    """Swap generation for gallery retrieval, then fuse as usual."""
    picked = select_from_gallery(prompt, gallery, bundle, config)
    return predict_distributions(prompt, picked, bundle, config)


def bundle_to_json(bundle: PredictionBundle, vocab: textlm.Vocabulary) -> dict:
    """Debug view: top tokens and confidences instead of raw vectors."""

    def top(p: np.ndarray) -> dict:
        i = int(np.argmax(p))
        return {"token": vocab.id_to_token[i], "p": float(p[i]), "entropy": entropy(p)}

    out = {
        "prompt": bundle.prompt,
        "strategy": bundle.strategy,
        "text": top(bundle.text_probs),
        "images": [
            {"index": im.index, "f": im.align.f, "raw": im.align.raw, **top(im.probs)}
            for im in bundle.images
        ],
    }
    if bundle.final is not None:
        out["final"] = top(bundle.final)
    return out
