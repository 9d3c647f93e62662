"""Synthetic attribute world: named objects, a tiny renderer, corpora.

Each object owns a (color, shape, size) bundle drawn from a seeded
permutation of the full 8x4x2 factorial, so at 64 objects the assignment
is a bijection: combos are distinct, marginals balanced, and every
attribute value covered. Images are 16x16 RGB float64 in [0,1] on a gray
background, with +/-2 px center jitter and optional per-attribute
corruption at rate epsilon. The corpus builder splits objects into
training and held-out sets; held-out objects appear in text only through
neutral mentions, never next to an attribute word.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GenerationError, TemplateError
from .seeding import derive_seed, rng_for

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.15),
    "blue": (0.15, 0.25, 0.9),
    "yellow": (0.95, 0.9, 0.1),
    "magenta": (0.9, 0.15, 0.85),
    "cyan": (0.1, 0.85, 0.9),
    "orange": (0.95, 0.55, 0.1),
    "white": (1.0, 1.0, 1.0),
}
SHAPES: tuple[str, ...] = ("square", "disc", "triangle", "bar")
SIZES: dict[str, int] = {"small": 6, "large": 12}

IMG_SIDE = 16
PATCH_SIDE = 4
N_PATCHES = (IMG_SIDE // PATCH_SIDE) ** 2
BACKGROUND = 0.5
JITTER_PX = 2

ATTRIBUTE_SLOTS = ("color", "shape", "size")
ATTRIBUTE_VALUES: dict[str, tuple[str, ...]] = {
    "color": tuple(COLORS),
    "shape": SHAPES,
    "size": tuple(SIZES),
}

CAPTION_TEMPLATES: tuple[str, ...] = (
    "the {object} is {color} .",
    "the {object} is a {size} {shape} .",
    "the {object} looks like a {color} {shape} .",
)
NEUTRAL_TEMPLATES: tuple[str, ...] = (
    "look at the {object} .",
    "here is the {object} .",
)
COLOR_QUESTION = "what is the color of the {object} ? it is"
SHAPE_QUESTION = "what is the shape of the {object} ? it is a"
SIZE_QUESTION = "is the {a} larger than the {b} ? answer :"

QA_TASKS = ("color", "shape", "size-yesno")

MIN_OBJECTS = 16
MIN_HELDOUT = 8


@dataclass(frozen=True)
class Attributes:
    color: str
    shape: str
    size: str

    def as_dict(self) -> dict[str, str]:
        return {"color": self.color, "shape": self.shape, "size": self.size}


@dataclass(frozen=True)
class WorldSpec:
    """Immutable object table: names mapped to attribute bundles."""

    seed: int
    objects: tuple[str, ...]
    attributes: tuple[Attributes, ...]
    _index: dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._index.update({name: i for i, name in enumerate(self.objects)})

    def attributes_of(self, name: str) -> Attributes:
        try:
            return self.attributes[self._index[name]]
        except KeyError:
            raise KeyError(f"unknown object {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._index


@dataclass
class ImageSample:
    """Rendered pixels plus the attributes actually drawn (post-corruption)."""

    pixels: np.ndarray  # (16, 16, 3) float64 in [0, 1]
    drawn: Attributes
    requested: Attributes
    render_seed: int

    @property
    def corrupted(self) -> bool:
        return self.drawn != self.requested


@dataclass(frozen=True)
class QaItem:
    prompt: str
    candidates: tuple[str, ...]
    gold: int
    task: str

    def __post_init__(self):
        if len(set(self.candidates)) != len(self.candidates) or len(self.candidates) < 2:
            raise ValueError(f"candidates must be >=2 and distinct, got {self.candidates}")
        if not 0 <= self.gold < len(self.candidates):
            raise ValueError(f"gold index {self.gold} out of range")


@dataclass(frozen=True)
class PairedExample:
    text: str
    image: ImageSample
    kind: str = "caption"  # caption | qa | neutral


@dataclass
class Corpora:
    lm_corpus: list[str]
    paired_set: list[PairedExample]
    heldout_objects: tuple[str, ...]
    training_objects: tuple[str, ...]


_RESERVED_WORDS = (
    set(COLORS)
    | set(SHAPES)
    | set(SIZES)
    | {"the", "is", "a", "look", "looks", "like", "at", "here", "what", "of", "it",
       "larger", "than", "answer", "yes", "no"}
)


def _make_names(rng: np.random.Generator, count: int) -> list[str]:
    """Distinct pronounceable pseudo-words avoiding every template word."""
    consonants = "bdfgjklmnprstvz"
    vowels = "aeiou"
    names: list[str] = []
    used = set(_RESERVED_WORDS)
    while len(names) < count:
        n_syll = 2 + int(rng.integers(0, 2))
        word = "".join(
            consonants[int(rng.integers(0, len(consonants)))] + vowels[int(rng.integers(0, len(vowels)))]
            for _ in range(n_syll)
        )
        if word not in used:
            used.add(word)
            names.append(word)
    return names


def _factorial_combos() -> list[Attributes]:
    return [
        Attributes(c, sh, sz)
        for c in COLORS
        for sh in SHAPES
        for sz in SIZES
    ]


def _attr_counts(chosen: list[Attributes]) -> dict[str, dict[str, int]]:
    counts = {slot: {v: 0 for v in ATTRIBUTE_VALUES[slot]} for slot in ATTRIBUTE_SLOTS}
    for a in chosen:
        d = a.as_dict()
        for slot in ATTRIBUTE_SLOTS:
            counts[slot][d[slot]] += 1
    return counts


def _first_deficit(counts) -> tuple[str, str] | None:
    for slot in ATTRIBUTE_SLOTS:
        for v in ATTRIBUTE_VALUES[slot]:
            if counts[slot][v] < 2:
                return slot, v
    return None


def _balanced_selection(rng: np.random.Generator, n: int) -> list[Attributes]:
    """Seeded permutation prefix of the factorial pool, swap-repaired until
    every attribute value appears at least twice."""
    combos = _factorial_combos()
    reps = -(-n // len(combos))  # ceil; n > 64 repeats the factorial
    pool = combos * reps
    order = rng.permutation(len(pool))
    chosen = [pool[i] for i in order[:n]]
    rest = [pool[i] for i in order[n:]]
    for _ in range(512):
        counts = _attr_counts(chosen)
        deficit = _first_deficit(counts)
        if deficit is None:
            return chosen
        slot, value = deficit
        swap_in = next(i for i, a in enumerate(rest) if a.as_dict()[slot] == value)

        def fully_surplus(a: Attributes) -> bool:
            d = a.as_dict()
            return all(counts[s][d[s]] > 2 for s in ATTRIBUTE_SLOTS)

        swap_out = next((i for i, a in enumerate(chosen) if fully_surplus(a)), None)
        if swap_out is None:
            swap_out = next(i for i, a in enumerate(chosen) if a.as_dict()[slot] != value)
        chosen[swap_out], rest[swap_in] = rest[swap_in], chosen[swap_out]
    raise RuntimeError(f"coverage repair did not converge for n={n}")  # pragma: no cover


def build_world(seed: int, n_objects: int = 64) -> WorldSpec:
    """Seeded world with full attribute coverage (every value used >= 2x).

    At n_objects=64 the assignment is a bijection onto the 8x4x2
    factorial, so attribute bundles are pairwise distinct.
    """
    if n_objects < MIN_OBJECTS:
        raise ValueError(f"world needs at least {MIN_OBJECTS} objects, got {n_objects}")
    rng = rng_for(seed, "world")
    chosen = _balanced_selection(rng, n_objects)
    names = _make_names(rng, n_objects)
    return WorldSpec(seed=seed, objects=tuple(names), attributes=tuple(chosen))


# ---------------------------------------------------------------------------
# renderer
# ---------------------------------------------------------------------------


def _shape_mask(shape: str, size_px: int, cx: float, cy: float) -> np.ndarray:
    ys, xs = np.mgrid[0:IMG_SIDE, 0:IMG_SIDE] + 0.5
    half = size_px / 2.0
    if shape == "square":
        return (np.abs(xs - cx) < half) & (np.abs(ys - cy) < half)
    if shape == "disc":
        return (xs - cx) ** 2 + (ys - cy) ** 2 < half**2
    if shape == "triangle":
        down = ys - (cy - half)
        return (down > 0) & (down < size_px) & (np.abs(xs - cx) < down / 2.0)
    if shape == "bar":
        return (np.abs(xs - cx) < half) & (np.abs(ys - cy) < size_px / 6.0)
    raise ValueError(f"unknown shape {shape!r}")


def render(attrs: Attributes, render_seed: int, noise_rate: float = 0.0) -> ImageSample:
    """Rasterize one object; pure function of (attrs, seed, rate).

    With probability noise_rate per attribute, the drawn value is replaced
    by a uniformly chosen different value. The returned meta records what
    was actually drawn.
    """
    if not 0.0 <= noise_rate <= 1.0:
        raise ValueError(f"noise_rate must be in [0,1], got {noise_rate}")
    rng = rng_for(render_seed, "render")
    drawn = {}
    for slot in ATTRIBUTE_SLOTS:
        value = getattr(attrs, slot)
        if noise_rate > 0.0 and rng.random() < noise_rate:
            others = [v for v in ATTRIBUTE_VALUES[slot] if v != value]
            value = others[int(rng.integers(0, len(others)))]
        drawn[slot] = value
    dx = int(rng.integers(-JITTER_PX, JITTER_PX + 1))
    dy = int(rng.integers(-JITTER_PX, JITTER_PX + 1))
    cx = IMG_SIDE / 2.0 + dx
    cy = IMG_SIDE / 2.0 + dy
    pixels = np.full((IMG_SIDE, IMG_SIDE, 3), BACKGROUND)
    mask = _shape_mask(drawn["shape"], SIZES[drawn["size"]], cx, cy)
    pixels[mask] = COLORS[drawn["color"]]
    return ImageSample(
        pixels=pixels,
        drawn=Attributes(**drawn),
        requested=attrs,
        render_seed=int(render_seed),
    )


def image_patches(pixels: np.ndarray) -> np.ndarray:
    """Flatten non-overlapping 4x4 RGB patches to a (16, 48) matrix."""
    if pixels.shape != (IMG_SIDE, IMG_SIDE, 3):
        raise ValueError(f"expected ({IMG_SIDE},{IMG_SIDE},3) pixels, got {pixels.shape}")
    n = IMG_SIDE // PATCH_SIDE
    patches = pixels.reshape(n, PATCH_SIDE, n, PATCH_SIDE, 3).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(patches.reshape(N_PATCHES, PATCH_SIDE * PATCH_SIDE * 3))


def write_ppm(sample: ImageSample, path) -> None:
    """Binary P6 dump for eyeballing renders."""
    data = np.clip(np.rint(sample.pixels * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{IMG_SIDE} {IMG_SIDE}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


# ---------------------------------------------------------------------------
# captions and parsing
# ---------------------------------------------------------------------------

_SLOT_RE = re.compile(r"\{(\w+)\}")
_KNOWN_SLOTS = {"object", "a", "b"} | set(ATTRIBUTE_SLOTS)


def fill_template(template: str, values: dict[str, str]) -> str:
    def sub(m: re.Match) -> str:
        slot = m.group(1)
        if slot not in _KNOWN_SLOTS:
            raise TemplateError(f"template slot {{{slot}}} unknown in {template!r}")
        if slot not in values:
            raise TemplateError(f"no value for slot {{{slot}}} in {template!r}")
        return values[slot]

    return _SLOT_RE.sub(sub, template)


def make_captions(world: WorldSpec, objects=None, templates=CAPTION_TEMPLATES) -> list[tuple[str, str]]:
    """(caption, object name) pairs; every template names its object, so
    captions are pairwise distinct across objects."""
    names = world.objects if objects is None else tuple(objects)
    out = []
    for name in names:
        attrs = world.attributes_of(name).as_dict()
        for tpl in templates:
            out.append((fill_template(tpl, {"object": name, **attrs}), name))
    return out


def _template_matcher(template: str):
    words = template.split()
    pattern = []
    slots = []
    for w in words:
        m = _SLOT_RE.fullmatch(w)
        if m:
            slots.append(m.group(1))
            pattern.append(None)
        else:
            pattern.append(w)
    return pattern, slots


_PARSE_TEMPLATES = CAPTION_TEMPLATES + (
    COLOR_QUESTION,
    SHAPE_QUESTION,
    SIZE_QUESTION,
) + NEUTRAL_TEMPLATES


def parse_prompt(text: str, world: WorldSpec) -> dict[str, str] | None:
    """Match text against the known templates (a trailing answer is fine).

    Returns slot values ({"object": ..., "color": ...}) with object slots
    validated against the world and attribute slots against their value
    sets, or None when nothing matches.
    """
    tokens = text.lower().split()
    for template in _PARSE_TEMPLATES:
        pattern, slots = _template_matcher(template)
        if len(tokens) < len(pattern):
            continue
        values: dict[str, str] = {}
        slot_iter = iter(slots)
        ok = True
        for want, have in zip(pattern, tokens):
            if want is None:
                slot = next(slot_iter)
                if slot in ("object", "a", "b"):
                    if have not in world:
                        ok = False
                        break
                elif have not in ATTRIBUTE_VALUES[slot]:
                    ok = False
                    break
                values[slot] = have
            elif want != have:
                ok = False
                break
        if ok:
            values["_template"] = template
            return values
    return None


def referenced_object(text: str, world: WorldSpec) -> str | None:
    """First world object named in the text, scanning left to right."""
    for token in text.lower().split():
        if token in world:
            return token
    return None


def expected_attributes(prompt: str, world: WorldSpec) -> dict[str, str] | None:
    """Ground-truth attributes a faithful image for this prompt must show.

    Captions contribute their literal attribute words; questions resolve
    the asked-about attribute of the referenced object from the world
    table. Size comparisons resolve the first object's size (that is the
    object the generator draws). Returns None for unparseable prompts.
    """
    parsed = parse_prompt(prompt, world)
    if parsed is None:
        return None
    template = parsed.pop("_template")
    if template == COLOR_QUESTION:
        return {"color": world.attributes_of(parsed["object"]).color}
    if template == SHAPE_QUESTION:
        return {"shape": world.attributes_of(parsed["object"]).shape}
    if template == SIZE_QUESTION:
        return {"size": world.attributes_of(parsed["a"]).size}
    if template in NEUTRAL_TEMPLATES:
        return world.attributes_of(parsed["object"]).as_dict()
    return {k: v for k, v in parsed.items() if k in ATTRIBUTE_SLOTS}


# ---------------------------------------------------------------------------
# corpora
# ---------------------------------------------------------------------------


def emit_corpora(
    world: WorldSpec,
    heldout_fraction: float,
    seed: int,
    epsilon: float = 0.0,
) -> Corpora:
    """Text corpus, paired (text, image) set, and the held-out object split.

    Held-out objects never co-occur with an attribute word in any corpus
    line; they appear only through neutral mentions. Every corpus line is
    paired with an image of the mentioned object's true attributes
    (epsilon-corrupted), standing in for a text-to-image generator that
    knows the world.
    """
    if not 0.0 < heldout_fraction < 1.0:
        raise ValueError(f"heldout_fraction must be in (0,1), got {heldout_fraction}")
    n = len(world.objects)
    n_held = round(n * heldout_fraction)
    if n_held < MIN_HELDOUT:
        raise ValueError(
            f"heldout_fraction={heldout_fraction} keeps only {n_held} of {n} objects; need >= {MIN_HELDOUT}"
        )
    rng = rng_for(seed, "corpora")
    held_idx = set(rng.choice(n, size=n_held, replace=False).tolist())
    heldout = tuple(world.objects[i] for i in sorted(held_idx))
    training = tuple(o for i, o in enumerate(world.objects) if i not in held_idx)

    tagged: list[tuple[str, str]] = []
    for caption, _name in make_captions(world, training):
        tagged.append((caption, "caption"))
    for name in training:
        attrs = world.attributes_of(name)
        tagged.append((fill_template(COLOR_QUESTION, {"object": name}) + f" {attrs.color} .", "qa"))
        tagged.append((fill_template(SHAPE_QUESTION, {"object": name}) + f" {attrs.shape} .", "qa"))
    # size comparisons: two seeded partners per training object, answers mixed
    partners = list(training)
    for name in training:
        order = rng.permutation(len(partners))
        picked = 0
        for j in order:
            other = partners[j]
            if other == name:
                continue
            if world.attributes_of(other).size == world.attributes_of(name).size:
                continue
            answer = "yes" if world.attributes_of(name).size == "large" else "no"
            tagged.append((fill_template(SIZE_QUESTION, {"a": name, "b": other}) + f" {answer} .", "qa"))
            picked += 1
            if picked == 2:
                break
    for name in world.objects:
        for tpl in NEUTRAL_TEMPLATES:
            tagged.append((fill_template(tpl, {"object": name}), "neutral"))

    paired: list[PairedExample] = []
    for i, (line, kind) in enumerate(tagged):
        target = referenced_object(line, world)
        if target is None:  # pragma: no cover - all templates name an object
            continue
        image = render(world.attributes_of(target), derive_seed(seed, "pair", i), epsilon)
        paired.append(PairedExample(text=line, image=image, kind=kind))

    return Corpora(
        lm_corpus=[line for line, _ in tagged],
        paired_set=paired,
        heldout_objects=heldout,
        training_objects=training,
    )


def make_qa(world: WorldSpec, heldout_objects, task: str) -> list[QaItem]:
    """Question items over held-out objects for one task."""
    if task not in QA_TASKS:
        raise ValueError(f"unknown task {task!r}; choices: {QA_TASKS}")
    held = tuple(heldout_objects)
    for name in held:
        if name not in world:
            raise KeyError(f"held-out object {name!r} not in world")
    items: list[QaItem] = []
    if task == "color":
        candidates = ATTRIBUTE_VALUES["color"]
        for name in held:
            gold = candidates.index(world.attributes_of(name).color)
            items.append(QaItem(fill_template(COLOR_QUESTION, {"object": name}), candidates, gold, task))
    elif task == "shape":
        candidates = ATTRIBUTE_VALUES["shape"]
        for name in held:
            gold = candidates.index(world.attributes_of(name).shape)
            items.append(QaItem(fill_template(SHAPE_QUESTION, {"object": name}), candidates, gold, task))
    else:
        candidates = ("yes", "no")
        for a in held:
            for b in held:
                if a == b:
                    continue
                size_a = world.attributes_of(a).size
                size_b = world.attributes_of(b).size
                if size_a == size_b:
                    continue  # no ground truth either way
                gold = 0 if size_a == "large" else 1
                items.append(QaItem(fill_template(SIZE_QUESTION, {"a": a, "b": b}), candidates, gold, task))
    return items


def generator_image(prompt: str, world: WorldSpec, render_seed: int, epsilon: float) -> ImageSample:
    """One image for a prompt, from the ground-truth-aware toy generator.

    The first recognized object name wins; failing that, literal attribute
    words in the prompt are rendered over defaults; otherwise
    GenerationError.
    """
    target = referenced_object(prompt, world)
    if target is not None:
        return render(world.attributes_of(target), render_seed, epsilon)
    tokens = prompt.lower().split()
    literal: dict[str, str] = {}
    for slot in ATTRIBUTE_SLOTS:
        for token in tokens:
            if token in ATTRIBUTE_VALUES[slot]:
                literal[slot] = token
                break
    if not literal:
        raise GenerationError(f"prompt names no known object or attribute: {prompt!r}")
    attrs = Attributes(
        color=literal.get("color", "white"),
        shape=literal.get("shape", "square"),
        size=literal.get("size", "large"),
    )
    return render(attrs, render_seed, epsilon)


def world_to_json(world: WorldSpec) -> str:
    rows = [
        {"name": name, **world.attributes_of(name).as_dict()}
        for name in world.objects
    ]
    return json.dumps({"seed": world.seed, "n_objects": len(rows), "objects": rows}, indent=2, sort_keys=True)


def dump_world_artifacts(world: WorldSpec, corpora: Corpora, out_dir, images: int = 0) -> list[Path]:
    """Write inspectable artifacts; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    p = out / "world.json"
    p.write_text(world_to_json(world))
    written.append(p)
    p = out / "corpus.txt"
    p.write_text("\n".join(corpora.lm_corpus) + "\n")
    written.append(p)
    p = out / "paired.jsonl"
    with open(p, "w") as fh:
        for ex in corpora.paired_set:
            fh.write(json.dumps({
                "text": ex.text,
                "drawn": ex.image.drawn.as_dict(),
                "render_seed": ex.image.render_seed,
            }, sort_keys=True) + "\n")
    written.append(p)
    for task in QA_TASKS:
        p = out / f"qa_{task.replace('-', '_')}.jsonl"
        with open(p, "w") as fh:
            for item in make_qa(world, corpora.heldout_objects, task):
                fh.write(json.dumps({
                    "prompt": item.prompt,
                    "candidates": list(item.candidates),
                    "gold": item.gold,
                    "task": item.task,
                }, sort_keys=True) + "\n")
        written.append(p)
    if images:
        img_dir = out / "images"
        img_dir.mkdir(exist_ok=True)
        for name in world.objects[:images]:
            seed = derive_seed(world.seed, "dump", name)
            sample = render(world.attributes_of(name), seed, 0.0)
            p = img_dir / f"{name}_{seed}.ppm"
            write_ppm(sample, p)
            written.append(p)
    return written
