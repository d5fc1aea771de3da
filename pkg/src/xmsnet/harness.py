"""Run configuration and the work behind each CLI command."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from . import metrics
from . import tensor as T
from .checkpoint import load_model, save_checkpoint
from .config import ModelConfig
from .data import (DegradationSpec, Sample, SceneSpec, generate_sample, load_dataset, load_sample, read_index,
                   save_sample, stack, write_index)
from .losses import total_loss
from .model import XMSNet
from .optim import Adam, StepDecay

log = logging.getLogger("xmsnet")

METRIC_FIELDS = ("mae", "fmax", "smeasure", "emeasure")


class ValidationError(ValueError):
    """Bad configuration or inputs (CLI exit code 1)."""


# ---------------------------------------------------------------- configuration


@dataclass
class DataSection:
    root: str = "data"
    n_per_cell: int = 8
    seed: int = 0
    scene: dict = field(default_factory=dict)
    # explicit cells: [{"name": ..., "degradation": {...}}]; otherwise the product grid below
    cells: list | None = None
    noise_sigma: list = field(default_factory=lambda: [0.0])
    affine: list = field(default_factory=lambda: [[0.0, 0.0, 0.0, 1.0]])


@dataclass
class TrainSection:
    dataset: str = "data"
    cells: list | None = None
    steps: int = 500
    lr: float = 1e-3
    batch_size: int = 8
    decay_interval: int = 0
    decay_factor: float = 0.1
    checkpoint_every: int = 0
    resume: str | None = None


@dataclass
class EvalSection:
    checkpoint: str = "run/final.xmsc"
    dataset: str = "data"
    cells: list | None = None
    dump_predictions: bool = False


@dataclass
class GradcheckSection:
    selector: str = "all"
    eps: float = 1e-5
    max_coords: int = 12


@dataclass
class SweepSection:
    checkpoint: str = "run/final.xmsc"
    cells: list = field(default_factory=lambda: [{"name": "clean", "degradation": {}}])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    n_samples: int = 100
    scene: dict = field(default_factory=dict)
    batch_size: int = 25


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    seed: int = 0
    out: str = "run"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        sections = {"data": DataSection, "train": TrainSection, "eval": EvalSection,
                    "gradcheck": GradcheckSection, "sweep": SweepSection}
        kwargs = {}
        for key, typ in sections.items():
            try:
                kwargs[key] = typ(**d.pop(key, {}))
            except TypeError as exc:
                raise ValidationError(f"bad '{key}' section: {exc}") from exc
        unknown = set(d) - {"model", "seed", "out"}
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**kwargs, **d)
        cfg.model_config()  # validates
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig.from_dict(self.model)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"bad model config: {exc}") from exc


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``key.sub=value`` overrides; values parse as JSON when they can."""
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override '{item}' is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return d


def persist_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


def sample_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# ---------------------------------------------------------------- gen-data


def data_cells(sec: DataSection) -> list[dict]:
    if sec.cells:
        return [{"name": c["name"], "degradation": dict(c.get("degradation", {}))} for c in sec.cells]
    cells = []
    for (i, sigma), (j, aff) in itertools.product(enumerate(sec.noise_sigma), enumerate(sec.affine)):
        dx, dy, rot, scale = aff
        cells.append({"name": f"noise{i}_affine{j}",
                      "degradation": {"noise_sigma": sigma, "dx": dx, "dy": dy, "rotation": rot, "scale": scale}})
    return cells


def generate_dataset(sec: DataSection, root: Path) -> dict:
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create dataset directory {root}: {exc}") from exc
    scene = SceneSpec(**sec.scene)
    entries, cells = [], data_cells(sec)
    for ci, cell in enumerate(cells):
        degr = DegradationSpec(**cell["degradation"])
        for k in range(sec.n_per_cell):
            seed = sample_seed(sec.seed, ci, k)
            name = f"sample_{len(entries):05d}"
            save_sample(generate_sample(seed, scene, degr), root / name, scene, cell["name"])
            entries.append({"dir": name, "cell": cell["name"], "seed": seed})
    write_index(root, entries, cells)
    return {"samples": len(entries), "cells": len(cells)}


# ---------------------------------------------------------------- training


def batches(n: int, batch_size: int, seed: int):
    """Endless deterministic stream of index batches, reshuffled every epoch."""
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield perm[i:i + batch_size]


def train_model(model: XMSNet, samples: list[Sample], steps: int, lr: float = 1e-3, batch_size: int = 8,
                decay_interval: int = 0, decay_factor: float = 0.1, seed: int = 0,
                optimizer: Adam | None = None, on_step: Callable | None = None,
                on_checkpoint: Callable | None = None, checkpoint_every: int = 0) -> list[dict]:
    """Adam training with step decay. Returns one log row per step."""
    if not samples:
        raise ValidationError("training set is empty")
    rgb, aux, gt = stack(samples)
    opt = optimizer or Adam(model.parameters(), lr=lr, schedule=StepDecay(lr, decay_interval, decay_factor))
    stream = batches(len(samples), batch_size, seed)
    # skip the batches already consumed when resuming
    for _ in range(opt.state.step):
        next(stream)
    rows = []
    params = model.parameters()
    for _ in range(steps):
        idx = next(stream)
        out = model(rgb[idx], aux[idx])
        report = total_loss(out, gt[idx], model.cfg.loss)
        opt.zero_grad()
        T.backward(report.total, params=params)
        bad = [p.name for p in params if not np.isfinite(p.grad).all()]
        if bad:
            raise T.NumericalError(f"non-finite gradient at step {opt.state.step + 1} for {bad[0]}")
        opt.step()
        row = {"step": opt.state.step, "lr": opt.state.lr, **report.row()}
        rows.append(row)
        if on_step:
            on_step(row)
        if on_checkpoint and checkpoint_every and opt.state.step % checkpoint_every == 0:
            on_checkpoint(opt)
    model.optimizer = opt
    return rows


def run_train(cfg: RunConfig, out: Path) -> dict:
    sec = cfg.train
    samples = load_dataset(Path(sec.dataset)) if not sec.cells else [
        s for c in sec.cells for s in load_dataset(Path(sec.dataset), c)]
    if not samples:
        raise ValidationError(f"no training samples in {sec.dataset}")
    if sec.resume:
        model, opt = load_model(sec.resume, cfg.model_config())
    else:
        model, opt = XMSNet(cfg.model_config()), None
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "initial.xmsc", model)
    header = None
    t0 = time.time()
    with open(out / "train_log.csv", "w", newline="") as fh:
        writer = None

        def on_step(row):
            nonlocal writer, header
            row = {"config_hash": model.cfg.hexhash(), "seed": cfg.seed, **row}
            if writer is None:
                header = list(row)
                writer = csv.DictWriter(fh, fieldnames=header)
                writer.writeheader()
            writer.writerow(row)
            if row["step"] % 50 == 0:
                log.info("step %d loss %.4f (%.1fs)", row["step"], row["total"], time.time() - t0)

        rows = train_model(model, samples, sec.steps, sec.lr, sec.batch_size, sec.decay_interval,
                           sec.decay_factor, cfg.seed, optimizer=opt, on_step=on_step,
                           on_checkpoint=lambda o: save_checkpoint(out / f"step{o.state.step:06d}.xmsc", model, o),
                           checkpoint_every=sec.checkpoint_every)
    if sec.steps:
        save_checkpoint(out / "final.xmsc", model, model.optimizer)
    return {"steps": len(rows), "final_loss": rows[-1]["total"] if rows else None}


# ---------------------------------------------------------------- evaluation


def predict(model: XMSNet, rgb, aux) -> np.ndarray:
    """Foreground probabilities at input resolution."""
    with T.no_grad():
        out = model(rgb, aux)
        logits = T.bilinear_upsample(out.final, *np.shape(rgb)[-2:])
        return T.sigmoid(logits).data


def model_predictor(model: XMSNet, batch_size: int = 16):
    def run(samples: list[Sample]) -> list[np.ndarray]:
        preds = []
        for i in range(0, len(samples), batch_size):
            rgb, aux, _ = stack(samples[i:i + batch_size])
            preds.extend(predict(model, rgb, aux).astype(np.float64))
        return preds

    return run


def gt_predictor(samples: list[Sample]) -> list[np.ndarray]:
    """Stub predictor returning the ground truth."""
    return [s.gt.astype(np.float64) for s in samples]


def evaluate_samples(samples: list[Sample], predictor) -> list[dict]:
    if not samples:
        raise ValidationError("cannot evaluate an empty dataset")
    preds = predictor(samples)
    return [metrics.evaluate(np.clip(p, 0.0, 1.0), s.gt) for p, s in zip(preds, samples)]


def write_metrics_csv(path: Path, names: list[str], rows: list[dict]) -> dict:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("sample",) + METRIC_FIELDS)
        for name, r in zip(names, rows):
            w.writerow([name] + [repr(float(r[k])) for k in METRIC_FIELDS])
    return {k: float(np.mean([r[k] for r in rows])) for k in METRIC_FIELDS}


def run_eval(cfg: RunConfig, out: Path, predictor=None) -> dict:
    sec = cfg.eval
    root = Path(sec.dataset)
    index = read_index(root)
    entries = [e for e in index["samples"] if not sec.cells or e.get("cell") in sec.cells]
    if not entries:
        raise ValidationError(f"dataset {root} has no samples to evaluate")
    samples = [load_sample(root / e["dir"]) for e in entries]
    if predictor is None:
        expected = cfg.model_config() if cfg.model else None
        model, _ = load_model(sec.checkpoint, expected)
        predictor = model_predictor(model)
    preds = predictor(samples)
    rows = [metrics.evaluate(np.clip(p, 0.0, 1.0), s.gt) for p, s in zip(preds, samples)]
    out.mkdir(parents=True, exist_ok=True)
    names = [e["dir"] for e in entries]
    summary = write_metrics_csv(out / "metrics.csv", names, rows)
    summary["n"] = len(rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    if sec.dump_predictions:
        pdir = out / "predictions"
        pdir.mkdir(exist_ok=True)
        for name, p in zip(names, preds):
            Image.fromarray(np.clip(np.rint(np.squeeze(p) * 255), 0, 255).astype(np.uint8), mode="L").save(pdir / f"{name}.pgm")
    return summary


# ---------------------------------------------------------------- sweeps


def alpha_per_layer(model: XMSNet, samples: list[Sample], batch_size: int = 25) -> np.ndarray:
    """(n_samples, 4) modal proportions; NaN when the proportion is ablated."""
    rows = []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            rgb, aux, _ = stack(samples[i:i + batch_size])
            out = model(rgb, aux)
            cols = [s.alpha.data if s.alpha is not None else np.full(len(rgb), np.nan) for s in out.states]
            rows.append(np.stack(cols, axis=1))
    return np.concatenate(rows).astype(np.float64)


SWEEP_FIELDS = ("cell", "seed", "n", "alpha_l1", "alpha_l2", "alpha_l3", "alpha_l4", "alpha_mean",
                "frac_alpha_gt_half", "mae", "fmax")


def sweep_cell(model: XMSNet, cell: dict, seed: int, n: int, scene: SceneSpec, batch_size: int = 25) -> dict:
    degr = DegradationSpec(**cell.get("degradation", {}))
    samples = [generate_sample(sample_seed(seed, 7919, k), scene, degr) for k in range(n)]
    alphas = alpha_per_layer(model, samples, batch_size)
    per_sample = alphas.mean(axis=1)
    m = evaluate_samples(samples, model_predictor(model, batch_size))
    row = {"cell": cell["name"], "seed": seed, "n": n}
    for i in range(4):
        row[f"alpha_l{i + 1}"] = float(alphas[:, i].mean())
    row["alpha_mean"] = float(per_sample.mean())
    row["frac_alpha_gt_half"] = float((per_sample > 0.5).mean())
    row["mae"] = float(np.mean([r["mae"] for r in m]))
    row["fmax"] = float(np.mean([r["fmax"] for r in m]))
    return row


def run_sweep(cfg: RunConfig, out: Path, model: XMSNet | None = None) -> list[dict]:
    sec = cfg.sweep
    if model is None:
        if not Path(sec.checkpoint).exists():
            raise ValidationError(f"sweep checkpoint {sec.checkpoint} not found")
        model, _ = load_model(sec.checkpoint)
    scene = SceneSpec(**sec.scene)
    rows = [sweep_cell(model, cell, seed, sec.n_samples, scene, sec.batch_size)
            for cell in sec.cells for seed in sec.seeds]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        w.writerows(rows)
    return rows
