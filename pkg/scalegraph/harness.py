"""
Few-shot experiment orchestration.

Splits, the fit loop with early stopping, seeded runs of the graph model
and the pooling baselines, checkpoint evaluation and the ablation matrix.
Every source of randomness is derived from the per-run seed.
"""

import copy
import itertools
import time
import traceback
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .baselines import PoolingClassifier
from .evalkit import (
    classification_metrics,
    hit_ratio_at_k,
    interpretability_triplets,
    summarize_metrics,
)
from .metrics import (
    METRIC_COLUMNS,
    MetricsWriter,
    log_cell_failure,
    log_early_stop,
    log_epoch,
    log_seed_complete,
    record_row,
    write_metrics_csv,
    write_summary,
)
from .model import BagClassifier, BagOutput, ScaleGraphModel
from .storage import (
    graph_to_json,
    load_checkpoint,
    load_dataset,
    masks_to_json,
    save_checkpoint,
    write_json,
)
from .synthgen import SynthConfig, generate_dataset
from .types import (
    ConfigurationError,
    DivergenceError,
    FeatureBag,
    RunConfig,
    RunMetrics,
    TextHierarchy,
)


MODEL_NAME = "scalegraph"

# Adam constants not exposed in RunConfig; recorded in every run manifest
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# Module ablation rows: (a) plain top-k scoring ... (d) full model
MODULE_ROWS: Dict[str, Dict[str, bool]] = {
    "a": {"use_tgdf": False, "use_hhg": False, "use_htcl": False},
    "b": {"use_tgdf": True, "use_hhg": False, "use_htcl": False},
    "c": {"use_tgdf": True, "use_hhg": True, "use_htcl": False},
    "d": {"use_tgdf": True, "use_hhg": True, "use_htcl": True},
}

# Settings eval takes from the caller rather than the checkpoint
CALLER_FIELDS = ("dataset_path", "output_dir", "workers", "time", "quiet")

# Matrix axes that are not RunConfig fields
EXTRA_AXES = ("modules", "model")


def _say(config: RunConfig, message: str) -> None:
    if not config.quiet:
        print(message)


# Splits

@dataclass
class Split:
    train: List[FeatureBag]
    val: List[FeatureBag]
    test: List[FeatureBag]


def few_shot_split(bags: Sequence[FeatureBag], shots: int, seed: int) -> Split:
    """
    Per class 4:3:3 partition (floor for train and val, rest to test),
    then `shots` bags per class from the train part. The test part is
    truncated to the smallest class so it stays balanced.
    """
    by_class: Dict[int, List[FeatureBag]] = defaultdict(list)
    for bag in sorted(bags, key=lambda b: b.bag_id):
        by_class[bag.label].append(bag)
    if len(by_class) < 2:
        raise ConfigurationError("a few-shot split needs at least two classes")

    train, val = [], []
    tests: Dict[int, List[FeatureBag]] = {}
    for c in sorted(by_class):
        members = by_class[c]
        order = np.random.default_rng([seed, c]).permutation(len(members))
        shuffled = [members[i] for i in order]
        n_train = len(members) * 4 // 10
        n_val = len(members) * 3 // 10
        if n_train < shots:
            raise ConfigurationError(
                f"class {c} has {len(members)} bags: {n_train} for training, fewer than {shots} shots"
            )
        if n_val < 1 or len(members) - n_train - n_val < 1:
            raise ConfigurationError(f"class {c} has too few bags for validation and test parts")
        train += shuffled[:shots]
        val += shuffled[n_train:n_train + n_val]
        tests[c] = shuffled[n_train + n_val:]

    per_class = min(len(t) for t in tests.values())
    test = [bag for c in sorted(tests) for bag in tests[c][:per_class]]
    return Split(train=train, val=val, test=test)


# Data

def resolve_synth(config: RunConfig, synth: Optional[SynthConfig] = None) -> SynthConfig:
    """Synthetic config with the text hierarchy shape taken from the run config."""
    return replace(
        synth or SynthConfig(),
        parents_per_class=config.parents_per_class,
        children_per_parent=config.children_per_parent,
        context_tokens=config.context_tokens,
    )


def check_compatible(config: RunConfig, hierarchy: TextHierarchy) -> None:
    if hierarchy.num_classes < 2:
        raise ConfigurationError("training needs at least two classes")
    expected = (config.parents_per_class, config.children_per_parent, config.context_tokens)
    actual = (hierarchy.parents_per_class, hierarchy.children_per_parent, hierarchy.context_length)
    if expected != actual:
        raise ConfigurationError(
            f"text hierarchy has (O, K, L) = {actual} but the run config asks for {expected}"
        )


def load_data(
    config: RunConfig,
    synth: Optional[SynthConfig] = None,
) -> Tuple[List[FeatureBag], TextHierarchy]:
    """Dataset from config.dataset_path, or freshly generated synthetic bags."""
    if config.dataset_path:
        bags, hierarchy = load_dataset(config.dataset_path)
    else:
        bags, hierarchy = generate_dataset(resolve_synth(config, synth))
    check_compatible(config, hierarchy)
    return bags, hierarchy


def build_model(kind: str, config: RunConfig, hierarchy: TextHierarchy, dim: int) -> BagClassifier:
    if kind == MODEL_NAME:
        return ScaleGraphModel(hierarchy, config, dim)
    return PoolingClassifier(kind, dim, hierarchy.num_classes).to(config.dtype)


# Fit / evaluate

@dataclass
class FitResult:
    best_val_f1: float
    epochs: int
    losses: List[float] = field(default_factory=list)


def _check_finite(out: BagOutput, seed: int, epoch: int, step: int, bag: FeatureBag) -> None:
    if not bool(torch.isfinite(out.loss)):
        raise DivergenceError(
            f"non-finite loss {float(out.loss)} at seed={seed} epoch={epoch} step={step} bag={bag.bag_id}"
        )


def fit(
    model: BagClassifier,
    train: Sequence[FeatureBag],
    val: Sequence[FeatureBag],
    config: RunConfig,
    seed: int,
    events: Optional[MetricsWriter] = None,
    cell: str = "",
) -> FitResult:
    """
    Adam over single bags, early stopping on validation macro-F1.

    The state with the best validation F1 (strict improvement) is restored
    before returning.
    """
    optimizer = torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad],
        lr=config.lr,
        weight_decay=config.weight_decay,
        betas=ADAM_BETAS,
        eps=ADAM_EPS,
    )
    rng = np.random.default_rng(seed)
    best_f1 = -1.0
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    epoch = 0
    epoch_losses: List[float] = []

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        losses = []
        for step, i in enumerate(rng.permutation(len(train))):
            bag = train[i]
            out = model.score_bag(bag)
            _check_finite(out, seed, epoch, step, bag)
            optimizer.zero_grad()
            out.loss.backward()
            optimizer.step()
            losses.append(float(out.loss.detach()))

        mean_loss = float(np.mean(losses))
        epoch_losses.append(mean_loss)
        val_f1 = evaluate(model, val, config)["macro_f1"]
        log_epoch(events, seed, epoch, mean_loss, val_f1, cell=cell)
        _say(config, f"[Train] {cell or MODEL_NAME} seed={seed} epoch={epoch} loss={mean_loss:.4f} val_f1={val_f1:.4f}")

        if val_f1 > best_f1:
            best_f1 = val_f1
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                log_early_stop(events, seed, epoch, best_f1, cell=cell)
                _say(config, f"[Train] early stop at epoch {epoch} (best val_f1={best_f1:.4f})")
                break

    model.load_state_dict(best_state)
    return FitResult(best_val_f1=best_f1, epochs=epoch, losses=epoch_losses)


def bag_hit_ratio(model: ScaleGraphModel, bag: FeatureBag, out: BagOutput, config: RunConfig) -> float:
    K = model.hierarchy.children_per_parent
    if config.hit_ratio_source == "raw":
        return hit_ratio_at_k(
            bag,
            out.texts.low.detach().cpu().numpy(),
            out.texts.high.detach().cpu().numpy(),
            K,
            topk=config.hit_ratio_topk,
        )
    states = out.states
    return hit_ratio_at_k(
        bag,
        states["text_low"].detach().cpu().numpy(),
        states["text_high"].detach().cpu().numpy(),
        K,
        topk=config.hit_ratio_topk,
        low_feats=states["img_low"].detach().cpu().numpy(),
        high_feats=model.high_states_full(out.graph, states, bag.num_high),
    )


@torch.no_grad()
def evaluate(
    model: BagClassifier,
    bags: Sequence[FeatureBag],
    config: RunConfig,
    with_hit_ratio: bool = False,
) -> Dict[str, Optional[float]]:
    """Accuracy / AUC / macro-F1 over bags, plus the mean hit ratio for the graph model."""
    model.eval()
    probs, preds, labels, hits = [], [], [], []
    for bag in bags:
        out = model.score_bag(bag)
        p = F.softmax(out.fused.double(), dim=0).cpu().numpy()
        probs.append(p)
        preds.append(int(np.argmax(p)))
        labels.append(bag.label)
        if with_hit_ratio and isinstance(model, ScaleGraphModel):
            hits.append(bag_hit_ratio(model, bag, out, config))

    metrics = classification_metrics(preds, np.stack(probs), labels, model.num_classes)
    metrics["hit_ratio_at_2"] = float(np.mean(hits)) if hits else None
    return metrics


# Runs

def run_seed(
    config: RunConfig,
    bags: Sequence[FeatureBag],
    hierarchy: TextHierarchy,
    seed: int,
    kind: str = MODEL_NAME,
    events: Optional[MetricsWriter] = None,
    cell: str = "",
    run_dir: Optional[Path] = None,
) -> RunMetrics:
    """Split, build, fit and test one seed. Saves a checkpoint when run_dir is given."""
    start = time.perf_counter()
    split = few_shot_split(bags, config.shots, seed)
    torch.manual_seed(seed)
    model = build_model(kind, config, hierarchy, bags[0].dim)

    result = fit(model, split.train, split.val, config, seed, events=events, cell=cell)
    test = evaluate(model, split.test, config, with_hit_ratio=True)
    record = RunMetrics(
        seed=seed,
        accuracy=test["accuracy"],
        auc=test["auc"],
        macro_f1=test["macro_f1"],
        hit_ratio_at_2=test["hit_ratio_at_2"],
        best_val_f1=result.best_val_f1,
        epochs=result.epochs,
    )
    if run_dir is not None:
        save_checkpoint(
            Path(run_dir) / f"seed{seed}" / "checkpoint",
            model.state_dict(),
            extra={
                "seed": seed,
                "model": kind,
                "best_val_f1": result.best_val_f1,
                "epochs": result.epochs,
                "config": config.to_dict(),
            },
        )

    elapsed = time.perf_counter() - start
    log_seed_complete(events, record, elapsed, cell=cell)
    if config.time:
        print(f"[Time] {cell or kind} seed={seed} {elapsed:.2f}s")
    _say(config, f"[Train] {cell or kind} seed={seed} test macro_f1={record.macro_f1:.4f} acc={record.accuracy:.4f}")
    return record


def run_manifest(
    config: RunConfig,
    kind: str,
    synth: Optional[SynthConfig] = None,
    grid: Optional[Dict[str, List[Any]]] = None,
) -> Dict[str, Any]:
    return {
        "version": __version__,
        "model": kind,
        "config": config.to_dict(),
        "synth": synth.to_dict() if synth and not config.dataset_path else None,
        "grid": grid,
        "optimizer": {
            "name": "adam",
            "lr": config.lr,
            "weight_decay": config.weight_decay,
            "betas": list(ADAM_BETAS),
            "eps": ADAM_EPS,
            "schedule": "constant",
        },
        "early_stopping": {"monitor": "val_macro_f1", "mode": "max", "patience": config.patience},
        "decisions": {
            "split": "per class floor(0.4n) train pool / floor(0.3n) val / rest test, test balanced",
            "init": "near-identity projections, scale embeddings 0.02 * randn",
            "module_bypass": "no TGDF and no HHG skips message passing",
            "hit_ratio_source": config.hit_ratio_source,
        },
    }


@dataclass
class TrainResult:
    records: List[RunMetrics]
    run_dir: Path
    summary: Dict[str, Any]


def train(
    config: RunConfig,
    bags: Sequence[FeatureBag],
    hierarchy: TextHierarchy,
    kind: str = MODEL_NAME,
    run_name: Optional[str] = None,
    synth: Optional[SynthConfig] = None,
) -> TrainResult:
    """
    All seeds of one configuration; writes checkpoints, metrics.csv,
    summary.json, run_manifest.json and events.jsonl under the run dir.
    """
    config.validate()
    check_compatible(config, hierarchy)
    run_dir = Path(config.output_dir) / (run_name or kind)

    with MetricsWriter(run_dir / "events.jsonl") as events:
        records = [
            run_seed(config, bags, hierarchy, seed, kind=kind, events=events, run_dir=run_dir)
            for seed in config.seeds
        ]

    write_metrics_csv(run_dir / "metrics.csv", [record_row(r, model=kind) for r in records])
    summary = write_summary(run_dir / "summary.json", records, model=kind)
    write_json(run_dir / "run_manifest.json", run_manifest(config, kind, synth))
    _print_summary(config, kind, summary)
    return TrainResult(records=records, run_dir=run_dir, summary=summary)


def run_baseline(
    kind: str,
    config: RunConfig,
    bags: Sequence[FeatureBag],
    hierarchy: TextHierarchy,
    run_name: Optional[str] = None,
    synth: Optional[SynthConfig] = None,
) -> TrainResult:
    """Pooling baseline under the same splits, seeds and fit loop as train()."""
    if kind == MODEL_NAME:
        raise ConfigurationError(f"{MODEL_NAME} is not a baseline")
    return train(config, bags, hierarchy, kind=kind, run_name=run_name, synth=synth)


def _print_summary(config: RunConfig, label: str, summary: Dict[str, Any]) -> None:
    for metric, stats in summary["metrics"].items():
        if stats["mean"] is not None:
            _say(config, f"[Summary] {label} {metric}: {stats['mean']:.4f} ± {stats['std']:.4f}")


# Checkpoint evaluation

def evaluate_checkpoint(
    config: RunConfig,
    bags: Sequence[FeatureBag],
    hierarchy: TextHierarchy,
    checkpoint: Path,
    dump_bag: Optional[str] = None,
    class_of_interest: Optional[int] = None,
) -> Dict[str, Any]:
    """
    Reload a checkpoint, recompute its test metrics on the seed's split and
    optionally dump masks, graph and triplets for one bag.

    The model is rebuilt from the run config stored with the checkpoint;
    only the caller's data and output settings are used.
    """
    state, extra = load_checkpoint(checkpoint)
    if "config" not in extra:
        raise ConfigurationError(f"checkpoint {checkpoint} carries no run config")
    seed = int(extra.get("seed", config.seeds[0]))
    kind = str(extra.get("model", MODEL_NAME))
    caller = config
    config = replace(
        RunConfig.from_dict(extra["config"]),
        **{name: getattr(caller, name) for name in CALLER_FIELDS},
    )
    config.validate()
    ignored = sorted(
        f.name for f in fields(RunConfig)
        if f.name not in CALLER_FIELDS and f.name != "seeds"
        and getattr(caller, f.name) != getattr(config, f.name)
    )
    if ignored:
        _say(caller, f"[Eval] using the checkpoint's values for: {', '.join(ignored)}")
    check_compatible(config, hierarchy)

    model = build_model(kind, config, hierarchy, bags[0].dim)
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise ConfigurationError(f"checkpoint {checkpoint} does not fit a {kind} model: {e}") from None

    split = few_shot_split(bags, config.shots, seed)
    report: Dict[str, Any] = {"seed": seed, "model": kind, "ignored_settings": ignored}
    report["test"] = evaluate(model, split.test, config, with_hit_ratio=True)

    if dump_bag is not None:
        if not isinstance(model, ScaleGraphModel):
            raise ConfigurationError("bag dumps need a graph model checkpoint")
        matches = [b for b in bags if b.bag_id == dump_bag]
        if not matches:
            raise ValueError(f"unknown bag id: {dump_bag}")
        bag = matches[0]
        with torch.no_grad():
            out = model.score_bag(bag)
        target = bag.label if class_of_interest is None else class_of_interest
        triplets = interpretability_triplets(
            out.graph, out.states, target,
            hierarchy.parents_per_class, hierarchy.children_per_parent,
        )
        report["bag"] = {
            "masks": masks_to_json(bag.bag_id, out.masks),
            "graph": graph_to_json(out.graph),
            "triplets": {scale: vars(t) for scale, t in triplets.items()},
            "contributions": {str(c): v for c, v in out.logits.contributions.items()},
        }
    return report


# Ablation matrix

def expand_grid(grid: Dict[str, Sequence[Any]]) -> List[Dict[str, Any]]:
    """Cartesian product of the axes, in axis insertion order."""
    if not grid:
        raise ConfigurationError("the matrix grid is empty")
    allowed = {f.name for f in fields(RunConfig)} - {"seeds"}
    for axis, values in grid.items():
        if axis not in allowed and axis not in EXTRA_AXES:
            raise ConfigurationError(f"unknown matrix axis: {axis}")
        if not values:
            raise ConfigurationError(f"matrix axis {axis} has no values")
    axes = list(grid)
    return [dict(zip(axes, combo)) for combo in itertools.product(*(grid[a] for a in axes))]


def cell_label(overrides: Dict[str, Any]) -> str:
    return ",".join(f"{k}={v}" for k, v in overrides.items())


def cell_config(config: RunConfig, overrides: Dict[str, Any]) -> Tuple[RunConfig, str]:
    """RunConfig and model kind for one matrix cell."""
    values = dict(overrides)
    kind = str(values.pop("model", MODEL_NAME))
    row = values.pop("modules", None)
    if row is not None:
        if row not in MODULE_ROWS:
            raise ConfigurationError(f"unknown module row: {row!r} (expected one of a, b, c, d)")
        values.update(MODULE_ROWS[row])
    cfg = replace(config, **values)
    cfg.validate()
    return cfg, kind


def _failure_rows(label: str, overrides: Dict[str, Any], seeds: Sequence[int], error: str) -> List[Dict]:
    rows = []
    for seed in seeds:
        row: Dict[str, Any] = {"cell": label, **overrides, "seed": seed}
        row.update({column: None for column in METRIC_COLUMNS})
        row["error"] = error
        rows.append(row)
    return rows


def _run_cell(
    index: int,
    config: RunConfig,
    overrides: Dict[str, Any],
    bags: Sequence[FeatureBag],
    hierarchy: TextHierarchy,
    events: Optional[MetricsWriter] = None,
) -> Tuple[int, List[Dict[str, Any]]]:
    label = cell_label(overrides)
    start = time.perf_counter()
    try:
        cfg, kind = cell_config(config, overrides)
        check_compatible(cfg, hierarchy)
        rows = [
            record_row(run_seed(cfg, bags, hierarchy, seed, kind=kind, events=events, cell=label),
                       cell=label, **overrides)
            for seed in cfg.seeds
        ]
    except Exception as e:
        message = f"{type(e).__name__}: {e}"
        print(f"[Matrix] cell {index + 1} ({label}) failed: {message}")
        if not config.quiet:
            traceback.print_exc()
        rows = _failure_rows(label, overrides, config.seeds, message)
    if config.time:
        print(f"[Time] cell {label} {time.perf_counter() - start:.2f}s")
    return index, rows


def run_matrix(
    config: RunConfig,
    grid: Dict[str, Sequence[Any]],
    bags: Sequence[FeatureBag],
    hierarchy: TextHierarchy,
    run_name: str = "matrix",
    synth: Optional[SynthConfig] = None,
):
    """
    Run every grid cell for every seed; one CSV row per cell per seed.

    Cells run in worker processes when config.workers > 1. A failing cell
    fills its rows with the error message and the matrix continues.
    """
    config.validate()
    cells = expand_grid(grid)
    run_dir = Path(config.output_dir) / run_name
    results: Dict[int, List[Dict[str, Any]]] = {}

    with MetricsWriter(run_dir / "events.jsonl") as events:
        if config.workers > 1:
            worker_config = replace(config, quiet=True)
            with ProcessPoolExecutor(max_workers=config.workers) as executor:
                futures = [
                    executor.submit(_run_cell, i, worker_config, cell, bags, hierarchy)
                    for i, cell in enumerate(cells)
                ]
                for future in as_completed(futures):
                    index, rows = future.result()
                    results[index] = rows
                    _say(config, f"[Matrix] cell {index + 1}/{len(cells)} done")
        else:
            for i, cell in enumerate(cells):
                _say(config, f"[Matrix] cell {i + 1}/{len(cells)}: {cell_label(cell)}")
                results[i] = _run_cell(i, config, cell, bags, hierarchy, events=events)[1]

        rows = [row for i in range(len(cells)) for row in results[i]]
        for row in rows:
            if row["error"] and row["seed"] == config.seeds[0]:
                log_cell_failure(events, row["cell"], row["error"])

    frame = write_metrics_csv(run_dir / "metrics.csv", rows)
    summary = {"cells": {}}
    for i, cell in enumerate(cells):
        ok = [r for r in results[i] if not r["error"]]
        records = [RunMetrics(**{k: r[k] for k in ("seed", *METRIC_COLUMNS)}) for r in ok]
        summary["cells"][cell_label(cell)] = summarize_metrics(records) if records else None
    write_json(run_dir / "summary.json", summary)
    write_json(run_dir / "run_manifest.json", run_manifest(config, MODEL_NAME, synth, grid=dict(grid)))
    return frame
