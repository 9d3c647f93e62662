"""End-to-end build: world -> corpora -> LM -> encoder -> fusion -> QA.

One function materializes every trained artifact a RunConfig describes,
with per-stage wall times. The CLI runs the same stages one at a time
with checkpoint files in between; tests run this directly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from . import percept, textlm, world as world_mod
from .config import RunConfig
from .fusion import FusionParams, FusionVariant, train_fusion
from .infer import ModelBundle
from .percept import Calibration, DualEncoderCheckpoint, train_dual_encoder
from .seeding import derive_seed
from .textlm import LmCheckpoint, train_lm
from .world import Corpora, QaItem, WorldSpec, QA_TASKS


@dataclass
class PipelineArtifacts:
    config: RunConfig
    world: WorldSpec
    corpora: Corpora
    lm: LmCheckpoint
    vision: DualEncoderCheckpoint
    calibration: Calibration
    fusions: dict[str, FusionParams]
    qa: dict[str, list[QaItem]]
    stage_seconds: dict[str, float] = field(default_factory=dict)

    @property
    def build_seconds(self) -> float:
        return sum(self.stage_seconds.values())

    def bundle(self, placement: str = "late") -> ModelBundle:
        return ModelBundle(
            lm=self.lm,
            vision=self.vision,
            fusion=self.fusions[placement],
            calibration=self.calibration,
            world=self.world,
        )

    def bundles(self) -> dict[str, ModelBundle]:
        return {p: self.bundle(p) for p in self.fusions}


def calibration_from_pairs(cfg: RunConfig, corpora: Corpora, vision: DualEncoderCheckpoint) -> Calibration:
    """Config calibration if pinned, else the matched-pair percentile fit."""
    if cfg.calibration is not None:
        return cfg.calibration
    return percept.calibrate(vision, corpora.paired_set)


def build_world_stage(cfg: RunConfig) -> tuple[WorldSpec, Corpora]:
    world = world_mod.build_world(cfg.world.seed, cfg.world.n_objects)
    corpora = world_mod.emit_corpora(
        world,
        cfg.world.heldout_fraction,
        seed=derive_seed(cfg.world.seed, "corpora"),
        epsilon=cfg.world.epsilon_train,
    )
    return world, corpora


def build_pipeline(cfg: RunConfig, placements=("late",), progress: bool = False) -> PipelineArtifacts:
    """Train everything from scratch for the given fusion placements."""
    times: dict[str, float] = {}

    def stage(name: str, fn):
        t0 = time.perf_counter()
        result = fn()
        times[name] = time.perf_counter() - t0
        if progress:
            print(f"[pipeline] {name}: {times[name]:.1f}s")
        return result

    world, corpora = stage("world", lambda: build_world_stage(cfg))
    vocab = textlm.build_vocabulary(corpora.lm_corpus)
    lm = stage(
        "lm",
        lambda: train_lm(
            [textlm.tokenize(line, vocab) for line in corpora.lm_corpus],
            vocab,
            cfg.lm_arch,
            cfg.lm_train,
            seed=derive_seed(cfg.seed, "lm"),
        ),
    )
    vision, calibration = stage(
        "percept",
        lambda: train_dual_encoder(corpora.paired_set, vocab, cfg.percept, seed=derive_seed(cfg.seed, "dual")),
    )
    if cfg.calibration is not None:
        calibration = cfg.calibration
    fusions: dict[str, FusionParams] = {}
    for placement in placements:
        fusions[placement] = stage(
            f"fusion-{placement}",
            lambda p=placement: train_fusion(
                corpora.paired_set,
                lm,
                vision,
                cfg.fusion,
                seed=derive_seed(cfg.seed, "fusion"),
                variant=FusionVariant(placement=p),
            ),
        )
    qa = {task: world_mod.make_qa(world, corpora.heldout_objects, task) for task in QA_TASKS}
    return PipelineArtifacts(
        config=cfg,
        world=world,
        corpora=corpora,
        lm=lm,
        vision=vision,
        calibration=calibration,
        fusions=fusions,
        qa=qa,
        stage_seconds=times,
    )
