"""Run orchestration: config in, trained model + JSON-lines report out.

A report is a list of JSON records — one per epoch, an optional abort
marker, then a summary. Every wall-clock field ends in ``_ns`` so reports
from identical configs can be compared bitwise after masking exactly those
keys.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from gnmlab.autodiff import ParamSet, softmax_cross_entropy
from gnmlab.config import RunConfig, config_to_dict, validate_config
from gnmlab.data import Dataset, LongTailSpec, synth_dataset
from gnmlab.estimator import GNMClassifier, STREAM_INIT, STREAM_LANDSCAPE, evaluate_model, stream
from gnmlab.landscape import LandscapeGrid, filter_normalized_directions, landscape_grid
from gnmlab.models import (
    MLPConfig,
    ModelState,
    PromptedNetConfig,
    init_mlp,
    init_prompted,
    model_logits,
)

__all__ = [
    "RunReport",
    "classifier_from_config",
    "dataset_from_config",
    "initial_state",
    "execute_run",
    "run_experiment",
    "compare_runs",
    "Comparison",
    "balanced_train_subset",
    "eval_loss_fn",
    "run_landscape",
]


def _mask(value, mask_ns: bool):
    if isinstance(value, dict):
        return {k: (0 if (mask_ns and k.endswith("_ns")) else _mask(v, mask_ns))
                for k, v in value.items()}
    if isinstance(value, list):
        return [_mask(v, mask_ns) for v in value]
    return value


@dataclass
class RunReport:
    """Ordered JSON records for one run: epochs, optional abort, summary."""

    records: list = field(default_factory=list)

    @property
    def summary(self) -> dict:
        for rec in reversed(self.records):
            if rec.get("type") == "summary":
                return rec
        raise ValueError("report has no summary record")

    def epochs(self) -> list:
        return [r for r in self.records if r.get("type") == "epoch"]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.records)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "RunReport":
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])

    @classmethod
    def read(cls, path) -> "RunReport":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_jsonl(fh.read())

    def canonical(self, mask_ns: bool = True, mask_identity: bool = False) -> str:
        """Serialized records with volatile fields zeroed, for equality checks.

        ``mask_ns`` zeroes every key ending in ``_ns`` (all wall-clock fields).
        ``mask_identity`` additionally blanks the optimizer name and the config
        echo, for comparing runs that are numerically identical by construction
        but were launched under different optimizer settings.
        """
        records = [_mask(rec, mask_ns) for rec in self.records]
        if mask_identity:
            for rec in records:
                if rec.get("type") == "summary":
                    rec["optimizer"] = ""
                    rec["config"] = {}
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in records)


def dataset_from_config(cfg: RunConfig) -> Dataset:
    spec = LongTailSpec(n_classes=cfg.data.classes, n_max=cfg.data.n_max,
                        imbalance_ratio=cfg.data.imbalance_ratio, dim=cfg.data.dim,
                        separation=cfg.data.separation, noise_std=cfg.data.noise_std,
                        test_per_class=cfg.data.test_per_class, seed=cfg.run.seed)
    return synth_dataset(spec)


def initial_state(cfg: RunConfig) -> ModelState:
    """Freshly initialized model for the config's seed and geometry.

    Identical to the state a training run starts from, so pairing it with a
    checkpoint via ``with_trainable`` reconstructs a trained model exactly.
    """
    rng = stream(cfg.run.seed, STREAM_INIT)
    if cfg.model.kind == "mlp":
        mcfg = MLPConfig(input_dim=cfg.data.dim,
                         hidden_dims=tuple(int(h) for h in cfg.model.hidden_dims),
                         n_classes=cfg.data.classes)
        return init_mlp(mcfg, rng)
    mcfg = PromptedNetConfig(input_dim=cfg.data.dim, token_dim=cfg.model.token_dim,
                             n_patch_tokens=cfg.model.patch_tokens, n_layers=cfg.model.layers,
                             n_prompts=cfg.model.prompts, n_classes=cfg.data.classes,
                             merge_w_prompt=cfg.model.merge_w_prompt,
                             merge_w_cls=cfg.model.merge_w_cls)
    return init_prompted(mcfg, rng)


def classifier_from_config(cfg: RunConfig) -> GNMClassifier:
    return GNMClassifier(
        model=cfg.model.kind, hidden_dims=cfg.model.hidden_dims,
        token_dim=cfg.model.token_dim, patch_tokens=cfg.model.patch_tokens,
        prompts=cfg.model.prompts, layers=cfg.model.layers,
        merge_w_prompt=cfg.model.merge_w_prompt, merge_w_cls=cfg.model.merge_w_cls,
        optimizer=cfg.optim.kind, lr=cfg.optim.lr, schedule=cfg.optim.schedule,
        weight_decay=cfg.optim.weight_decay, rho_sam=cfg.optim.rho_sam,
        amplitude=cfg.optim.amplitude, sigma=cfg.optim.sigma, clamp=cfg.optim.clamp,
        loss=cfg.loss.kind, drw_beta=cfg.loss.drw_beta,
        epochs=cfg.train.t2, stage1_epochs=cfg.train.t1, batch_size=cfg.train.batch_size,
        head_threshold=cfg.data.head_threshold, tail_threshold=cfg.data.tail_threshold,
        random_state=cfg.run.seed,
    )


def execute_run(cfg: RunConfig):
    """Train per config; returns (report, fitted classifier, dataset)."""
    validate_config(cfg)
    ds = dataset_from_config(cfg)
    clf = classifier_from_config(cfg)
    fit_start = time.perf_counter_ns()
    clf.fit(ds.train_x, ds.train_y, eval_set=(ds.test_x, ds.test_y))
    fit_wall_ns = time.perf_counter_ns() - fit_start

    records: list[dict] = list(clf.history_)
    if clf.aborted_ is not None:
        records.append({"type": "abort", **clf.aborted_})

    walls = clf.pass_counter_.step_wall_ns
    final = evaluate_model(clf.model_state_, clf.params_, ds.test_x, ds.test_y,
                           clf.class_split_)
    summary = {
        "type": "summary",
        "seed": cfg.run.seed,
        "optimizer": cfg.optim.kind,
        "config": config_to_dict(cfg),
        "class_counts": clf.class_counts_.tolist(),
        "class_split": {name: list(classes)
                        for name, classes in clf.class_split_.groups().items()},
        "epochs_completed": len(clf.history_),
        "steps": clf.pass_counter_.steps,
        "forwards": clf.pass_counter_.forwards,
        "backwards": clf.pass_counter_.backwards,
        "aborted": clf.aborted_ is not None,
        "steps_wall_ns": int(sum(walls)),
        "step_wall_mean_ns": int(np.mean(walls)) if walls else 0,
        "step_wall_median_ns": int(np.median(walls)) if walls else 0,
        "setup_wall_ns": int(clf.setup_wall_ns_),
        "fit_wall_ns": int(fit_wall_ns),
        **final,
    }
    records.append(summary)
    return RunReport(records), clf, ds


def run_experiment(cfg: RunConfig) -> RunReport:
    """Train per config and return just the report."""
    report, _, _ = execute_run(cfg)
    return report


# ---------------------------------------------------------------------------
# Comparison across runs.


@dataclass
class Comparison:
    rows: list
    notes: list
    table: str


_COLUMNS = [
    ("optimizer", "{}"),
    ("seed", "{}"),
    ("steps", "{}"),
    ("fwd/step", "{:.3f}"),
    ("bwd/step", "{:.3f}"),
    ("step_us", "{:.1f}"),
    ("wall_ratio", "{:.3f}"),
    ("test_acc", "{:.4f}"),
    ("tail_acc", "{}"),
]


def compare_runs(reports: list) -> Comparison:
    """Side-by-side pass counts, per-step wall times, and accuracies.

    Wall ratios are each run's mean step time over the first report's. Notes
    flag non-comparable inputs (different data or seeds) rather than erroring,
    since eyeballing mismatched runs is still useful.
    """
    if not reports:
        raise ValueError("compare_runs needs at least one report")
    summaries = [rep.summary for rep in reports]
    notes: list[str] = []
    counts0 = summaries[0].get("class_counts")
    if any(s.get("class_counts") != counts0 for s in summaries):
        notes.append("class counts differ across runs; accuracies are not comparable")
    seeds = {s.get("seed") for s in summaries}
    if len(seeds) > 1:
        notes.append(f"seeds differ across runs: {sorted(seeds)}")
    if any(s.get("aborted") for s in summaries):
        notes.append("some runs aborted early; their counts cover only completed steps")

    base_mean = summaries[0].get("step_wall_mean_ns") or 0
    rows = []
    for s in summaries:
        steps = s.get("steps") or 0
        mean_ns = s.get("step_wall_mean_ns") or 0
        tail = s.get("test_acc_tail")
        rows.append({
            "optimizer": s.get("optimizer"),
            "seed": s.get("seed"),
            "steps": steps,
            "fwd/step": (s.get("forwards", 0) / steps) if steps else 0.0,
            "bwd/step": (s.get("backwards", 0) / steps) if steps else 0.0,
            "step_us": mean_ns / 1000.0,
            "wall_ratio": (mean_ns / base_mean) if base_mean else 0.0,
            "test_acc": s.get("test_acc", float("nan")),
            "tail_acc": f"{tail:.4f}" if isinstance(tail, float) else "-",
        })

    cells = [[fmt.format(row[name]) for name, fmt in _COLUMNS] for row in rows]
    headers = [name for name, _ in _COLUMNS]
    widths = [max(len(h), *(len(line[i]) for line in cells)) for i, h in enumerate(headers)]
    render = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
        "  ".join("-" * w for w in widths),
    ]
    render += ["  ".join(line[i].ljust(widths[i]) for i in range(len(headers))) for line in cells]
    render += [f"note: {n}" for n in notes]
    return Comparison(rows=rows, notes=notes, table="\n".join(render) + "\n")


# ---------------------------------------------------------------------------
# Landscape support.


def balanced_train_subset(ds: Dataset, size: int):
    """Class-balanced training slice: floor(size / C) per class, capped by counts.

    Deterministic — training data is class-ordered, so the first samples of
    each class are taken.
    """
    n_classes = ds.n_classes
    quota = max(1, size // n_classes)
    xs, ys = [], []
    offset = 0
    for c, n_c in enumerate(ds.counts):
        take = min(quota, int(n_c))
        xs.append(ds.train_x[offset:offset + take])
        ys.append(ds.train_y[offset:offset + take])
        offset += int(n_c)
    return np.concatenate(xs, axis=0), np.concatenate(ys, axis=0)


def eval_loss_fn(state: ModelState):
    """Unweighted, unadjusted mean cross-entropy on raw logits.

    Landscape slices always measure this quantity so grids from runs with
    different training objectives stay comparable.
    """
    def loss_fn(params: ParamSet, batch):
        xb, yb = batch
        return softmax_cross_entropy(model_logits(state, xb, params), yb)

    return loss_fn


def run_landscape(cfg: RunConfig, state: ModelState, params: ParamSet,
                  ds: Dataset) -> LandscapeGrid:
    """Slice the loss around ``params`` along two filter-normalized directions.

    Directions come from the run seed's dedicated sub-stream, so two runs with
    the same seed and shapes probe along identical raw directions.
    """
    rng = stream(cfg.run.seed, STREAM_LANDSCAPE)
    directions = filter_normalized_directions(params, rng)
    batch = balanced_train_subset(ds, cfg.landscape.batch)
    return landscape_grid(params, eval_loss_fn(state), batch, directions,
                          r=cfg.landscape.range, resolution=cfg.landscape.resolution)
