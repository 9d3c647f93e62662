"""Benchmark harness: task runners, sweeps, ablations, budgets, reports.

Candidate scoring follows the evaluation protocol everywhere: a question
is answered by the candidate whose tokens get the highest mean
log-likelihood under the final (aggregated) distributions, recomputed at
every candidate position. Per-item randomness derives from
(config seed, item index), so results do not depend on thread count or
item order; reports are sorted and floats written with repr, making runs
byte-comparable when timing capture is off.
"""

from __future__ import annotations

import csv
import io
import json
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as container
from . import fusion as fusion_mod
from . import infer, percept, textlm
from .autodiff import Tensor
from .errors import ConfigError, MeasurementError, MissingCheckpointError
from .infer import InferenceConfig, ModelBundle
from .percept import Calibration, DualEncoderCheckpoint
from .seeding import derive_seed
from .textlm import LmCheckpoint, LmConfig, Vocabulary
from .world import QaItem

REPORT_COLUMNS = ("task", "method", "k", "epsilon", "seed", "accuracy", "count", "ms")


@dataclass(frozen=True)
class ResultRow:
    task: str
    method: str
    k: int
    epsilon: float
    seed: int
    accuracy: float
    count: int
    ms: float

    def as_record(self) -> dict:
        return {c: getattr(self, c) for c in REPORT_COLUMNS}


# ---------------------------------------------------------------------------
# single-item scoring
# ---------------------------------------------------------------------------


def _candidate_positions(prompt_len: int, seq_len: int) -> slice:
    # row p predicts token p+1; candidate tokens sit at seq positions
    # prompt_len .. seq_len-1, predicted by rows prompt_len-1 .. seq_len-2
    return slice(prompt_len - 1, seq_len - 1)


def _score_text_only(item: QaItem, bundle: ModelBundle) -> int:
    scores = textlm.score_candidates(item.prompt, item.candidates, bundle.lm)
    return int(np.argmax(scores))


def _fused_rows(run_tokens, u_v, bundle: ModelBundle, hidden=None, mid_state=None) -> np.ndarray:
    placement = bundle.fusion.variant.placement
    if placement == "late":
        return fusion_mod.lfal_forward(u_v, hidden, bundle.fusion, bundle.lm).data
    if placement == "intermediate":
        return fusion_mod.intermediate_from_mid(u_v, mid_state, bundle.fusion, bundle.lm).data
    full = fusion_mod.early_forward_full(run_tokens, u_v, bundle.fusion, bundle.lm)
    n_v = u_v.data.shape[0]
    return full.data[n_v : n_v + len(run_tokens)]


def _score_visual(item: QaItem, icfg: InferenceConfig, bundle: ModelBundle, item_seed: int, gallery) -> int:
    lm = bundle.lm
    if icfg.image_source == "retrieve":
        images = infer.select_from_gallery(item.prompt, gallery, bundle, icfg)
    else:
        images = infer.generate_images(item.prompt, icfg.k, item_seed, icfg.epsilon, bundle.world)
    f = [infer.image_confidence(item.prompt, im, bundle, icfg.alignment).f for im in images]
    u_list = [
        fusion_mod.vtp_forward(percept.encode_image(im, bundle.vision), bundle.fusion) for im in images
    ]
    prompt_ids = textlm.tokenize(item.prompt, lm.vocab)
    placement = bundle.fusion.variant.placement
    scores = []
    for cand in item.candidates:
        cand_ids = textlm.tokenize(cand, lm.vocab)[1:]
        seq = prompt_ids + cand_ids
        run = seq[:-1]
        states = textlm.lm_forward(run, lm)
        hidden = states.hidden
        mid_state = fusion_mod.text_mid_states(run, lm) if placement == "intermediate" else None
        pos = _candidate_positions(len(prompt_ids), len(seq))
        p0_rows = textlm.softmax_rows_np(states.logits.data)[pos]
        image_rows = [
            textlm.softmax_rows_np(_fused_rows(run, u, bundle, hidden=hidden, mid_state=mid_state))[pos]
            for u in u_list
        ]
        final_rows = infer.combine_rows(p0_rows, image_rows, f, icfg.strategy, icfg.tau)
        targets = np.asarray(cand_ids, dtype=np.int64)
        logp = np.log(np.clip(final_rows[np.arange(len(targets)), targets], 1e-300, None))
        scores.append(float(logp.mean()))
    return int(np.argmax(scores))


def _score_best_of_n(item: QaItem, icfg: InferenceConfig, bundle: ModelBundle, item_seed: int) -> int:
    if icfg.n_samples is None:
        raise ConfigError("best_of_n needs n_samples (run the budget calibration first)")
    completion = infer.best_of_n(
        item.prompt,
        icfg.n_samples,
        bundle.lm,
        seed=item_seed,
        temperature=1.0,
        max_tokens=icfg.sample_max_tokens,
    )
    first = textlm.tokenize(completion, bundle.lm.vocab)[1:]
    if first:
        for c_idx, cand in enumerate(item.candidates):
            cand_first = textlm.tokenize(cand, bundle.lm.vocab)[1:]
            if cand_first and cand_first[0] == first[0]:
                return c_idx
    return _score_text_only(item, bundle)  # completion matched no candidate


def evaluate_item(item: QaItem, icfg: InferenceConfig, bundle: ModelBundle, item_index: int, gallery=None) -> bool:
    item_seed = derive_seed(icfg.seed, "item", item_index)
    if icfg.strategy == "text_only":
        predicted = _score_text_only(item, bundle)
    elif icfg.strategy == "best_of_n":
        predicted = _score_best_of_n(item, icfg, bundle, item_seed)
    else:
        predicted = _score_visual(item, icfg, bundle, item_seed, gallery)
    return predicted == item.gold


# ---------------------------------------------------------------------------
# task runner
# ---------------------------------------------------------------------------


def run_task(
    items: Sequence[QaItem],
    icfg: InferenceConfig,
    bundle: ModelBundle,
    threads: int = 1,
    record_timing: bool = True,
    gallery=None,
    method_tag: str | None = None,
) -> ResultRow:
    """Evaluate one QA task; returns an accuracy row.

    Thread count never changes the numbers: per-item work is pure given
    the derived per-item seed, and the merge is index-ordered.
    """
    items = list(items)
    if not items:
        raise ValueError("no items to evaluate")
    task = items[0].task
    t0 = time.perf_counter()
    if threads <= 1:
        outcomes = [evaluate_item(it, icfg, bundle, i, gallery) for i, it in enumerate(items)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(
                pool.map(lambda pair: evaluate_item(pair[1], icfg, bundle, pair[0], gallery), enumerate(items))
            )
    elapsed_ms = (time.perf_counter() - t0) * 1000.0
    return ResultRow(
        task=task,
        method=method_tag or icfg.strategy,
        k=icfg.k,
        epsilon=icfg.epsilon,
        seed=icfg.seed,
        accuracy=float(sum(outcomes) / len(items)),
        count=len(items),
        ms=elapsed_ms if record_timing else 0.0,
    )


def sweep_k(
    items: Sequence[QaItem],
    k_values: Sequence[int],
    seeds: Sequence[int],
    icfg: InferenceConfig,
    bundle: ModelBundle,
    threads: int = 1,
    record_timing: bool = True,
) -> tuple[list[ResultRow], list[dict]]:
    """Accuracy-vs-k rows plus a (k, mean, stderr) curve.

    k=1 cells run the single_image strategy (the one-image special case of
    every image strategy); larger k keep the configured strategy.
    """
    rows: list[ResultRow] = []
    for k in k_values:
        for seed in seeds:
            strategy = icfg.strategy
            if k == 1 and strategy not in ("text_only", "best_of_n"):
                strategy = "single_image"
            cell = icfg.replace(k=k, seed=seed, strategy=strategy)
            rows.append(run_task(items, cell, bundle, threads=threads, record_timing=record_timing))
    curve = []
    for k in k_values:
        accs = [r.accuracy for r in rows if r.k == k]
        stderr = statistics.stdev(accs) / len(accs) ** 0.5 if len(accs) > 1 else 0.0
        curve.append({"k": int(k), "mean_accuracy": float(np.mean(accs)), "stderr": float(stderr)})
    return rows, curve


def ablation_matrix(
    qa_sets: dict[str, Sequence[QaItem]],
    bundles: dict[str, ModelBundle],
    icfg: InferenceConfig,
    seeds: Sequence[int],
    strategies: Sequence[str] = ("single_image", "average_logits", "max_confidence", "clip_fusion"),
    threads: int = 1,
    record_timing: bool = True,
) -> dict:
    """Placement x multi-image matrix plus the strategy comparison table.

    bundles maps placement -> ModelBundle with that placement's trained
    fusion params; a missing placement raises MissingCheckpointError
    naming the cell. Returns rows, per-cell means and rendered tables.
    """
    rows: list[ResultRow] = []
    cell_means: dict[tuple, float] = {}
    for placement in fusion_mod.PLACEMENTS:
        if placement not in bundles or bundles[placement].fusion is None:
            raise MissingCheckpointError(f"no trained fusion for cell placement={placement}")
        if bundles[placement].fusion.variant.placement != placement:
            raise MissingCheckpointError(
                f"bundle for {placement} holds {bundles[placement].fusion.variant.placement} params"
            )
    for placement in fusion_mod.PLACEMENTS:
        bundle = bundles[placement]
        for multi in (True, False):
            cell_cfg = icfg.replace(
                k=icfg.k if multi else 1,
                strategy=icfg.strategy if multi else "single_image",
            )
            for task, items in qa_sets.items():
                accs = []
                for seed in seeds:
                    row = run_task(
                        items,
                        cell_cfg.replace(seed=seed),
                        bundle,
                        threads=threads,
                        record_timing=record_timing,
                        method_tag=f"{placement}/{cell_cfg.strategy}",
                    )
                    rows.append(row)
                    accs.append(row.accuracy)
                cell_means[(placement, multi, task)] = float(np.mean(accs))
    late = bundles["late"]
    for strategy in strategies:
        strat_cfg = icfg.replace(strategy=strategy, k=1 if strategy == "single_image" else icfg.k)
        for task, items in qa_sets.items():
            accs = []
            for seed in seeds:
                row = run_task(items, strat_cfg.replace(seed=seed), late, threads=threads, record_timing=record_timing)
                rows.append(row)
                accs.append(row.accuracy)
            cell_means[("late", strategy, task)] = float(np.mean(accs))
    tasks = list(qa_sets)
    return {
        "rows": rows,
        "cell_means": cell_means,
        "placement_table": _format_placement_table(cell_means, tasks),
        "strategy_table": _format_strategy_table(cell_means, tasks, strategies),
    }


def _format_placement_table(cell_means, tasks) -> str:
    lines = ["placement  images  " + "  ".join(f"{t:>12}" for t in tasks)]
    for placement in fusion_mod.PLACEMENTS:
        for multi in (False, True):
            cells = "  ".join(f"{cell_means[(placement, multi, t)]:>12.3f}" for t in tasks)
            lines.append(f"{placement:<9}  {'multi' if multi else 'single':<6}  {cells}")
    return "\n".join(lines)


def _format_strategy_table(cell_means, tasks, strategies) -> str:
    lines = ["strategy          " + "  ".join(f"{t:>12}" for t in tasks)]
    for strategy in strategies:
        cells = "  ".join(f"{cell_means[('late', strategy, t)]:>12.3f}" for t in tasks)
        lines.append(f"{strategy:<16}  {cells}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# matched-compute budget
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BudgetResult:
    n_samples: int
    target_ms: float
    sample_ms: float


def compute_matched_budget(
    items: Sequence[QaItem],
    icfg: InferenceConfig,
    bundle: ModelBundle,
    repetitions: int = 7,
    min_prompts: int = 20,
    sample_max_tokens: int = 3,
) -> BudgetResult:
    """Calibrate the best-of-N sample count to the visual pipeline's cost.

    Measures the median per-item wall time of (a) the full k-image scored
    pipeline and (b) one temperature-1 completion including its own
    scoring (best-of-N's unit of work), both single-threaded, then sets
    N = max(1, round(a/b)). Degenerate timings raise MeasurementError.
    """
    items = list(items)
    if len(items) < min_prompts:
        raise ValueError(f"need at least {min_prompts} calibration prompts, got {len(items)}")
    if repetitions < 3:
        raise ValueError(f"need at least 3 repetitions, got {repetitions}")

    def one_pipeline(idx: int, item: QaItem) -> None:
        _score_visual(item, icfg, bundle, derive_seed(icfg.seed, "item", idx), None)

    def one_sample(idx: int, item: QaItem) -> None:
        prompt_ids = textlm.tokenize(item.prompt, bundle.lm.vocab)
        text = textlm.sample(
            item.prompt,
            bundle.lm,
            temperature=1.0,
            seed=derive_seed(icfg.seed, "budget-sample", idx),
            max_tokens=sample_max_tokens,
        )
        ids = textlm.tokenize(text, bundle.lm.vocab)[1:]
        textlm.mean_logprob_of_tokens(prompt_ids, ids, bundle.lm)

    one_pipeline(0, items[0])  # warm caches and JIT before timing
    one_sample(0, items[0])
    target_times = []
    sample_times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for i, item in enumerate(items):
            one_pipeline(i, item)
        target_times.append((time.perf_counter() - t0) / len(items))
        t0 = time.perf_counter()
        for i, item in enumerate(items):
            one_sample(i, item)
        sample_times.append((time.perf_counter() - t0) / len(items))
    target = statistics.median(target_times)
    sample_t = statistics.median(sample_times)
    if target <= 0.0 or sample_t <= 0.0:
        raise MeasurementError(f"degenerate timings: target {target}, sample {sample_t}")
    n = max(1, round(target / sample_t))
    return BudgetResult(n_samples=n, target_ms=target * 1000.0, sample_ms=sample_t * 1000.0)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def sort_rows(rows: Sequence[ResultRow]) -> list[ResultRow]:
    return sorted(rows, key=lambda r: (r.task, r.method, r.k, r.seed))


def rows_to_csv(rows: Sequence[ResultRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in sort_rows(rows):
        rec = r.as_record()
        writer.writerow([_fmt(rec[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_json(rows: Sequence[ResultRow]) -> str:
    return json.dumps({"rows": [r.as_record() for r in sort_rows(rows)]}, indent=2, sort_keys=True) + "\n"


def write_report(rows: Sequence[ResultRow], out_dir, stem: str = "results") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    p = out / f"{stem}.csv"
    p.write_text(rows_to_csv(rows))
    paths.append(p)
    p = out / f"{stem}.json"
    p.write_text(rows_to_json(rows))
    paths.append(p)
    return paths


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(r) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# typed checkpoint save/load
# ---------------------------------------------------------------------------


def save_checkpoint(obj, path) -> None:
    """Serialize a trained component to the binary container."""
    if isinstance(obj, LmCheckpoint):
        meta = {"config": obj.config.as_dict(), "vocab": list(obj.vocab.id_to_token)}
        container.write_container(path, "lm", meta, {k: t.data for k, t in obj.params.items()})
    elif isinstance(obj, DualEncoderCheckpoint):
        meta = {"vocab": list(obj.vocab.id_to_token)}
        container.write_container(path, "dual", meta, {k: t.data for k, t in obj.params.items()})
    elif isinstance(obj, fusion_mod.FusionParams):
        meta = {
            "variant": {"placement": obj.variant.placement, "multi_image": obj.variant.multi_image}
        }
        container.write_container(path, "fusion", meta, {k: t.data for k, t in obj.params.items()})
    else:
        raise TypeError(f"cannot checkpoint object of type {type(obj).__name__}")


def load_checkpoint(path, expected: str | None = None):
    """Load and freeze a component; expected pins the component tag."""
    tag, meta, tensors = container.read_container(path, expected)
    params = {k: Tensor(v) for k, v in tensors.items()}
    if tag == "lm":
        ckpt = LmCheckpoint(
            config=LmConfig(**meta["config"]),
            vocab=Vocabulary(id_to_token=tuple(meta["vocab"])),
            params=params,
        )
        return ckpt.freeze()
    if tag == "dual":
        return DualEncoderCheckpoint(vocab=Vocabulary(id_to_token=tuple(meta["vocab"])), params=params).freeze()
    variant = fusion_mod.FusionVariant(
        placement=meta["variant"]["placement"], multi_image=meta["variant"]["multi_image"]
    )
    return fusion_mod.FusionParams(variant=variant, params=params).freeze()
