"""Command-line driver for every pipeline stage.

Exit code 0 means the stage ran and all its hard checks passed; any
contract violation (config errors, failed convergence checks, malformed
checkpoints) exits 1 with the reason on stderr.
"""

from __future__ import annotations

import os

# single-threaded BLAS keeps numbers bit-reproducible regardless of host
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import bench, kernels, percept, pipeline, textlm, world as world_mod
from .bench import load_checkpoint, save_checkpoint, write_report
from .config import RunConfig, load_config, save_config
from .fusion import PLACEMENTS, FusionVariant, train_fusion
from .infer import ModelBundle
from .seeding import derive_seed
from .world import QA_TASKS


def _base_parser(sub, name: str, help_text: str):
    p = sub.add_parser(name, help=help_text)
    p.add_argument("--config", type=Path, default=None, help="run config JSON (defaults used when omitted)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", type=Path, default=None, help="artifact directory (default from config)")
    return p


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or Path(cfg.out_dir or "runs/default")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_bundle(cfg: RunConfig, out: Path, placement: str = "late") -> tuple[ModelBundle, dict]:
    lm = load_checkpoint(out / "lm.lami", expected="lm")
    vision = load_checkpoint(out / "dual.lami", expected="dual")
    fusion = load_checkpoint(out / f"fusion_{placement}.lami", expected="fusion")
    world, corpora = pipeline.build_world_stage(cfg)
    calibration = pipeline.calibration_from_pairs(cfg, corpora, vision)
    bundle = ModelBundle(lm=lm, vision=vision, fusion=fusion, calibration=calibration, world=world)
    qa = {task: world_mod.make_qa(world, corpora.heldout_objects, task) for task in QA_TASKS}
    return bundle, {"world": world, "corpora": corpora, "qa": qa}


def cmd_gen_world(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    world, corpora = pipeline.build_world_stage(cfg)
    paths = world_mod.dump_world_artifacts(world, corpora, out, images=args.images)
    print(f"world seed={cfg.world.seed} objects={len(world.objects)} "
          f"heldout={len(corpora.heldout_objects)} corpus_lines={len(corpora.lm_corpus)} "
          f"pairs={len(corpora.paired_set)}")
    for p in paths[:8]:
        print(f"  wrote {p}")
    if len(paths) > 8:
        print(f"  ... and {len(paths) - 8} more")
    return 0


def cmd_pretrain_lm(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    _, corpora = pipeline.build_world_stage(cfg)
    vocab = textlm.build_vocabulary(corpora.lm_corpus)
    lm = textlm.train_lm(
        [textlm.tokenize(line, vocab) for line in corpora.lm_corpus],
        vocab,
        cfg.lm_arch,
        cfg.lm_train,
        seed=derive_seed(cfg.seed, "lm"),
    )
    save_checkpoint(lm, out / "lm.lami")
    print(f"trained lm: |V|={len(vocab)} params={sum(t.data.size for t in lm.params.values())} -> {out / 'lm.lami'}")
    return 0


def cmd_pretrain_percept(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    _, corpora = pipeline.build_world_stage(cfg)
    vocab = textlm.build_vocabulary(corpora.lm_corpus)
    vision, calibration = percept.train_dual_encoder(
        corpora.paired_set, vocab, cfg.percept, seed=derive_seed(cfg.seed, "dual")
    )
    save_checkpoint(vision, out / "dual.lami")
    effective = dataclasses.replace(cfg, calibration=calibration)
    save_config(effective, out / "effective-config.json")
    print(f"trained dual encoder; calibration s_lo={calibration.s_lo:.4f} s_hi={calibration.s_hi:.4f}")
    print(f"wrote {out / 'dual.lami'} and {out / 'effective-config.json'}")
    return 0


def cmd_train_fusion(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    lm = load_checkpoint(out / "lm.lami", expected="lm")
    vision = load_checkpoint(out / "dual.lami", expected="dual")
    _, corpora = pipeline.build_world_stage(cfg)
    placements = list(PLACEMENTS) if args.placement == "all" else [args.placement]
    for placement in placements:
        fusion = train_fusion(
            corpora.paired_set,
            lm,
            vision,
            cfg.fusion,
            seed=derive_seed(cfg.seed, "fusion"),
            variant=FusionVariant(placement=placement),
        )
        path = out / f"fusion_{placement}.lami"
        save_checkpoint(fusion, path)
        print(f"trained fusion [{placement}] -> {path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    icfg = cfg.inference
    overrides = {}
    if args.strategy:
        overrides["strategy"] = args.strategy
    if args.k is not None:
        overrides["k"] = args.k
    if args.epsilon is not None:
        overrides["epsilon"] = args.epsilon
    if args.alignment:
        overrides["alignment"] = args.alignment
    if args.n_samples is not None:
        overrides["n_samples"] = args.n_samples
    if overrides:
        icfg = icfg.replace(**overrides)
    bundle, extras = _load_bundle(cfg, out, placement=args.placement)
    tasks = list(QA_TASKS) if args.task == "all" else [args.task]
    rows = []
    for task in tasks:
        row = bench.run_task(
            extras["qa"][task], icfg, bundle, threads=cfg.threads, record_timing=cfg.record_timing
        )
        rows.append(row)
        print(f"{row.task}: method={row.method} k={row.k} eps={row.epsilon} "
              f"acc={row.accuracy:.3f} n={row.count} ms={row.ms:.1f}")
    paths = write_report(rows, out, stem=args.stem)
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    lm = load_checkpoint(out / "lm.lami", expected="lm")
    vision = load_checkpoint(out / "dual.lami", expected="dual")
    world, corpora = pipeline.build_world_stage(cfg)
    qa = {task: world_mod.make_qa(world, corpora.heldout_objects, task) for task in QA_TASKS}
    calibration = pipeline.calibration_from_pairs(cfg, corpora, vision)
    bundles = {}
    for placement in PLACEMENTS:
        path = out / f"fusion_{placement}.lami"
        if not path.exists():
            print(f"training missing fusion [{placement}]", file=sys.stderr)
            fusion = train_fusion(
                corpora.paired_set, lm, vision, cfg.fusion,
                seed=derive_seed(cfg.seed, "fusion"), variant=FusionVariant(placement=placement),
            )
            save_checkpoint(fusion, path)
        fusion = load_checkpoint(path, expected="fusion")
        bundles[placement] = ModelBundle(
            lm=lm, vision=vision, fusion=fusion, calibration=calibration, world=world
        )
    seeds = list(range(args.n_seeds))
    result = bench.ablation_matrix(qa, bundles, cfg.inference, seeds,
                                   threads=cfg.threads, record_timing=cfg.record_timing)
    write_report(result["rows"], out, stem="ablation")
    (out / "ablation-tables.txt").write_text(
        result["placement_table"] + "\n\n" + result["strategy_table"] + "\n"
    )
    print(result["placement_table"])
    print()
    print(result["strategy_table"])
    return 0


def cmd_sweep_k(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    bundle, extras = _load_bundle(cfg, out)
    k_values = [int(x) for x in args.k_values.split(",")]
    seeds = list(range(args.n_seeds))
    items = extras["qa"][args.task]
    rows, curve = bench.sweep_k(items, k_values, seeds, cfg.inference, bundle,
                                threads=cfg.threads, record_timing=cfg.record_timing)
    write_report(rows, out, stem="sweep")
    curve_path = out / "sweep-curve.csv"
    with open(curve_path, "w") as fh:
        fh.write("k,mean_accuracy,stderr\n")
        for point in curve:
            fh.write(f"{point['k']},{point['mean_accuracy']!r},{point['stderr']!r}\n")
    for point in curve:
        print(f"k={point['k']}: acc={point['mean_accuracy']:.3f} +/- {point['stderr']:.3f}")
    print(f"wrote {curve_path}")
    return 0


def cmd_budget(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    bundle, extras = _load_bundle(cfg, out)
    if args.task == "all":
        items = [it for task in QA_TASKS for it in extras["qa"][task]]
    else:
        items = extras["qa"][args.task]
    result = bench.compute_matched_budget(
        items,
        cfg.inference,
        bundle,
        repetitions=cfg.budget.repetitions,
        min_prompts=cfg.budget.min_prompts,
        sample_max_tokens=cfg.budget.sample_max_tokens,
    )
    payload = {
        "n_samples": result.n_samples,
        "target_ms_per_item": result.target_ms,
        "sample_ms_per_item": result.sample_ms,
    }
    (out / "budget.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"matched budget: N={result.n_samples} "
          f"(pipeline {result.target_ms:.2f} ms/item, sample {result.sample_ms:.2f} ms/item)")
    return 0


def cmd_report(args) -> int:
    data = json.loads(Path(args.rows).read_text())
    rows = [bench.ResultRow(**rec) for rec in data["rows"]]
    out = Path(args.out or Path(args.rows).parent)
    out.mkdir(parents=True, exist_ok=True)
    paths = write_report(rows, out, stem=args.stem)
    for p in paths:
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latefuse",
        description="Visual late-fusion toolkit: synthetic world, frozen LM, "
                    "fusion training and the multi-image evaluation harness "
                    f"(kernel backend: {kernels.backend_name()})",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = _base_parser(sub, "gen-world", "build the object world and dump corpora artifacts")
    p.add_argument("--images", type=int, default=0, help="also dump N object renders as .ppm")
    p.set_defaults(fn=cmd_gen_world)

    p = _base_parser(sub, "pretrain-lm", "train and freeze the text LM")
    p.set_defaults(fn=cmd_pretrain_lm)

    p = _base_parser(sub, "pretrain-percept", "train the dual encoder; records calibration")
    p.set_defaults(fn=cmd_pretrain_percept)

    p = _base_parser(sub, "train-fusion", "train projector + fusion layer over frozen parts")
    p.add_argument("--placement", choices=PLACEMENTS + ("all",), default="late")
    p.set_defaults(fn=cmd_train_fusion)

    p = _base_parser(sub, "eval", "run QA tasks and write the report")
    p.add_argument("--task", choices=QA_TASKS + ("all",), default="all")
    p.add_argument("--strategy", default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--alignment", choices=("learned", "oracle"), default=None)
    p.add_argument("--n-samples", type=int, default=None, help="best_of_n sample count")
    p.add_argument("--placement", choices=PLACEMENTS, default="late")
    p.add_argument("--stem", default="results", help="report file stem")
    p.set_defaults(fn=cmd_eval)

    p = _base_parser(sub, "ablate", "placement x strategy ablation matrix")
    p.add_argument("--n-seeds", type=int, default=5)
    p.set_defaults(fn=cmd_ablate)

    p = _base_parser(sub, "sweep-k", "accuracy vs image count")
    p.add_argument("--k-values", default="1,3,6")
    p.add_argument("--n-seeds", type=int, default=5)
    p.add_argument("--task", choices=QA_TASKS, default="color")
    p.set_defaults(fn=cmd_sweep_k)

    p = _base_parser(sub, "budget", "calibrate the best-of-N matched compute budget")
    p.add_argument("--task", choices=QA_TASKS + ("all",), default="all")
    p.set_defaults(fn=cmd_budget)

    p = sub.add_parser("report", help="re-emit a report from saved rows")
    p.add_argument("--rows", required=True, help="results.json produced by eval")
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--stem", default="results")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # contract failures exit nonzero with the reason
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
