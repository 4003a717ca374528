"""Desk-scale experiments shared by scripts/ and the acceptance suite."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import ModelConfig, desk_config, paper_config
from .data import make_dataset, split_ids
from .metrics import complexity_report
from .pipeline import (
    AblationRun, ablation_tables, build_model, checkpoint_digest, evaluate_model, run_ablation,
    train_on_samples,
)

OVERFIT_THRESHOLD = 0.85


@dataclass
class OverfitResult:
    train_iou: float
    train_ap: float
    final_loss: float
    checkpoint_sha256: str
    seconds: float
    steps: int
    losses: list[float]

    def summary(self) -> dict:
        d = asdict(self)
        d["losses"] = self.losses[::25] + [self.losses[-1]]
        return d


def overfit_sanity(config: ModelConfig | None = None, n: int = 16, steps: int = 300, seed: int = 42,
                   out_dir: str | Path = "overfit_run") -> OverfitResult:
    """Train on ``n`` synthetic images and score the final mask on those same images."""
    config = (config or desk_config()).with_overrides(seed=seed)
    samples = make_dataset(seed, n)
    t0 = time.perf_counter()
    res = train_on_samples(config, samples, max_steps=steps, out_dir=out_dir)
    seconds = time.perf_counter() - t0
    rep = evaluate_model(res.model, {str(i): s for i, s in enumerate(samples)})["m_fnl"]
    return OverfitResult(rep.iou_percent / 100, rep.ap_percent, res.log[-1]["total"],
                         checkpoint_digest(res.checkpoint_path), seconds, len(res.log),
                         [r["total"] for r in res.log])


def direction_data(n_train: int = 800, n_test: int = 200, data_seed: int = 42):
    samples = make_dataset(data_seed, n_train + n_test)
    ids = [f"{i:05d}" for i in range(len(samples))]
    train_ids, test_ids = split_ids(ids, data_seed, n_test / (n_train + n_test))
    by_id = dict(zip(ids, samples))
    return {i: by_id[i] for i in train_ids}, {i: by_id[i] for i in test_ids}


@dataclass
class DirectionResult:
    runs: list[AblationRun]
    table: str
    breakdown: str

    def mean_ap(self, row: int, key: str = "m_fnl") -> float:
        return float(np.mean([r.reports[key].ap_percent for r in self.runs if r.row == row]))

    def fnl_beats_components(self) -> list[bool]:
        """Per seed of the full model: is m_fnl's AP at least that of m_rsr and m_dec?"""
        out = []
        for r in self.runs:
            if r.row == 9:
                rep = r.reports
                out.append(rep["m_fnl"].ap_percent >= max(rep["m_rsr"].ap_percent, rep["m_dec"].ap_percent))
        return out

    def records(self) -> list[dict]:
        return [{"row": r.row, "seed": r.seed, "final_loss": r.final_loss, "seconds": round(r.seconds, 1),
                 **{k: v.as_row() for k, v in r.reports.items()}} for r in self.runs]


def ablation_direction(steps: int, seeds=(0, 1, 2), rows=(1, 9), n_train: int = 800, n_test: int = 200,
                       config: ModelConfig | None = None, out_dir: str | Path | None = None,
                       progress: bool = False) -> DirectionResult:
    train_set, test_set = direction_data(n_train, n_test)
    runs = run_ablation(config or desk_config(), train_set, test_set, list(rows), list(seeds), steps,
                        out_dir, progress)
    table, breakdown = ablation_tables(runs)
    return DirectionResult(runs, table, breakdown)


def complexity_summary(n_timing_runs: int = 3) -> dict[str, dict]:
    """Parameter and FLOP split for the desk and paper presets."""
    out = {}
    for name, cfg in (("desk", desk_config()), ("paper", paper_config())):
        rep = complexity_report(build_model(cfg), cfg.input_size, n_timing_runs=n_timing_runs)
        out[name] = {"parameters": rep.parameter_count, "per_module": rep.per_module_parameters,
                     "flops": rep.flop_estimate, "per_module_flops": rep.per_module_flops,
                     "inference_ms": rep.inference_time_ms, "table": rep.table()}
    return out


def write_json(obj, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, default=str) + "\n")
