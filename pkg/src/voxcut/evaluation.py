"""Task metrics, multi-seed campaigns and report files."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .scenes import ArrangementDistribution, sample_scene
from .sim import EpisodeConfig, EpisodeRecord, IntegrityError, Planner, Scene, run_episode, step_seed
from .voxel import CutAction, apply_cut

CSV_COLUMNS = ["method", "eta", "scene", "seed", "cut_error_volume", "remaining_rate", "occupancy_rate"]


@dataclass(frozen=True)
class TaskMetrics:
    cut_error_volume: int
    part_remaining_rate: float
    part_occupancy_rate: float

    def as_tuple(self) -> tuple[int, float, float]:
        return self.cut_error_volume, self.part_remaining_rate, self.part_occupancy_rate


def metrics_from_grids(initial, kept, target_part_id: int) -> TaskMetrics:
    before = initial.count(target_part_id)
    after = kept.count(target_part_id)
    total = kept.count()
    return TaskMetrics(before - after,
                       100.0 * after / before if before else 0.0,
                       100.0 * after / total if total else 0.0)


def compute_metrics(record: EpisodeRecord, scene: Scene) -> TaskMetrics:
    """Replay the recorded cuts on the scene and cross-check the discard ledger."""
    kept = scene.grid
    ledger: dict[int, int] = {}
    for row in record.steps:
        if row["action"] is None:
            continue
        removed, kept = apply_cut(kept, CutAction.from_dict(row["action"]))
        replayed = removed.counts_by_part()
        logged = {int(k): int(v) for k, v in row["removed_counts"].items()}
        if replayed != logged:
            raise IntegrityError(f"step t={row['t']}: ledger {logged} disagrees with replay {replayed}")
        for pid, n in logged.items():
            ledger[pid] = ledger.get(pid, 0) + n
    m = metrics_from_grids(scene.grid, kept, scene.target_part_id)
    if m.cut_error_volume != ledger.get(scene.target_part_id, 0):
        raise IntegrityError("target ledger disagrees with the final kept grid")
    return m


# --- campaigns ---------------------------------------------------------------

def evaluation_scenes(dists: Sequence[ArrangementDistribution], scene_seed: int, per_mode: int = 1) -> list[Scene]:
    """Fresh scenes from each arrangement mode, seeded apart from any training draw."""
    scenes = []
    for d in dists:
        for j in range(per_mode):
            grid = sample_scene(d, np.random.default_rng([scene_seed, 1, d.mode_id, j]))
            name = f"mode{d.mode_id}" if per_mode == 1 else f"mode{d.mode_id}-{j}"
            scenes.append(Scene(grid, d.part_table(), d.target_part_id, name))
    return scenes


def repetition_seeds(campaign_seed: int, reps: int) -> list[int]:
    return [step_seed(campaign_seed, r) for r in range(reps)]


@dataclass
class CampaignReport:
    rows: list[dict]
    fingerprint: str
    records: list[EpisodeRecord] = field(default_factory=list, repr=False)

    def aggregates(self) -> list[dict]:
        """Mean and population std per (method, eta, scene), in first-seen order."""
        groups: dict[tuple, list[dict]] = {}
        for r in self.rows:
            groups.setdefault((r["method"], r["eta"], r["scene"]), []).append(r)
        out = []
        for (method, eta, scene), rows in groups.items():
            agg = {"method": method, "eta": eta, "scene": scene, "n": len(rows)}
            for col in CSV_COLUMNS[4:]:
                vals = np.array([float(r[col]) for r in rows])
                agg[col] = float(vals.mean())
                agg[col + "_std"] = float(vals.std())
            out.append(agg)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _fmt(r[k]) for k in CSV_COLUMNS})
        return buf.getvalue()

    def to_text(self) -> str:
        head = f"{'Method':<16}{'eta':>6}  {'Scene':<12}{'Cut Err. Vol.':>22}{'Part Remain. Rate':>24}{'Part Occ. Rate':>22}"
        lines = [f"# config {self.fingerprint}", head, "-" * len(head)]
        for a in self.aggregates():
            cells = [f"{a[c]:.2f} +-{a[c + '_std']:.2f}" for c in CSV_COLUMNS[4:]]
            lines.append(f"{a['method']:<16}{a['eta']:>6.2f}  {a['scene']:<12}{cells[0]:>22}{cells[1]:>24}{cells[2]:>22}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | os.PathLike) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.csv"), "w") as fh:
            fh.write(self.to_csv())
        with open(os.path.join(out_dir, "report.txt"), "w") as fh:
            fh.write(self.to_text())

    def merge_csv(self, path: str | os.PathLike) -> None:
        """Append rows from an external metrics CSV with the same columns."""
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                missing = set(CSV_COLUMNS) - set(r)
                if missing:
                    raise ValueError(f"{path}: missing columns {sorted(missing)}")
                self.rows.append({"method": r["method"], "eta": float(r["eta"]), "scene": r["scene"],
                                  "seed": int(r["seed"]), "cut_error_volume": float(r["cut_error_volume"]),
                                  "remaining_rate": float(r["remaining_rate"]),
                                  "occupancy_rate": float(r["occupancy_rate"])})


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def config_fingerprint(config: Mapping) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


PlannerFactory = Callable[[float], Planner]


def run_campaign(methods: Mapping[str, PlannerFactory], scenes: Sequence[Scene], seeds: Sequence[int],
                 etas: Sequence[float], episode: EpisodeConfig = EpisodeConfig(),
                 config: Mapping | None = None, keep_records: bool = False,
                 on_row: Callable[[dict], None] | None = None) -> CampaignReport:
    """Run every (method, eta, scene, seed) cell and collect per-episode metric rows."""
    rows, records = [], []
    for name, factory in methods.items():
        for eta in etas:
            planner = factory(eta)
            for scene in scenes:
                for seed in seeds:
                    cfg = EpisodeConfig(episode.T, episode.initial_action, seed)
                    rec = run_episode(scene, planner, cfg, {"eta": eta, "method": name})
                    m = compute_metrics(rec, scene)
                    row = {"method": name, "eta": float(eta), "scene": scene.name, "seed": int(seed),
                           "cut_error_volume": m.cut_error_volume, "remaining_rate": m.part_remaining_rate,
                           "occupancy_rate": m.part_occupancy_rate}
                    rows.append(row)
                    if on_row:
                        on_row(row)
                    if keep_records:
                        records.append(rec)
    fp = config_fingerprint({"methods": list(methods), "scenes": [s.name for s in scenes], "seeds": list(seeds),
                             "etas": list(etas), "T": episode.T, "initial": str(episode.initial_action),
                             **(config or {})})
    return CampaignReport(rows, fp, records)
