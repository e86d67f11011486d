"""Procedural scenes: a cuboid shell enclosing jittered cuboid parts.

Each :class:`ArrangementDistribution` is one mode of the multi-modal
internal-structure prior. Part placements are drawn uniformly around a
reference centre and rejected until they fit the shell interior without
overlapping.
"""
from __future__ import annotations

import configparser
import json
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .io import load_vxdc, save_vxdc
from .voxel import SHELL_ID, AttributedVoxelGrid, ConfigError, quantize_to_grid, voxelize_to_tensor

SHELL_COLOR = (0.5, 0.5, 0.5)
TARGET_ID = 2

# part id -> (name, colour); the target is the blue "battery"
DEFAULT_PARTS = {
    2: ("battery", (0.0, 0.0, 1.0)),
    3: ("board", (0.0, 1.0, 0.0)),
    4: ("motor", (1.0, 0.0, 0.0)),
}


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ShellSpec:
    lo: tuple[int, int, int]  # 1-based inclusive outer extent, x y z
    hi: tuple[int, int, int]
    thickness: int = 1
    color: tuple[float, float, float] = SHELL_COLOR
    fill: bool = True

    def interior(self) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
        t = self.thickness
        return tuple(v + t for v in self.lo), tuple(v - t for v in self.hi)


@dataclass(frozen=True)
class PartSpec:
    part_id: int
    color: tuple[float, float, float]
    size: tuple[int, int, int]
    center: tuple[int, int, int]  # 1-based, x y z
    jitter: tuple[int, int, int] = (0, 0, 0)

    def lower_corner(self, center: Sequence[int]) -> tuple[int, int, int]:
        return tuple(int(c) - s // 2 for c, s in zip(center, self.size))


@dataclass(frozen=True)
class ArrangementDistribution:
    mode_id: int
    K: int
    shell: ShellSpec
    parts: tuple[PartSpec, ...]
    target_part_id: int = TARGET_ID
    max_attempts: int = 1000

    def __post_init__(self):
        ids = [p.part_id for p in self.parts]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"mode {self.mode_id}: duplicate part ids {ids}")
        if ids.count(self.target_part_id) != 1:
            raise ConfigError(f"mode {self.mode_id}: target part {self.target_part_id} must appear exactly once")
        if SHELL_ID in ids or 0 in ids:
            raise ConfigError("part ids 0 and 1 are reserved for empty and shell")

    def part_table(self) -> dict[int, tuple[float, float, float]]:
        table = {SHELL_ID: tuple(self.shell.color)}
        table.update({p.part_id: tuple(p.color) for p in self.parts})
        return table


def _violation(dist: ArrangementDistribution, corners: dict[int, tuple]) -> str | None:
    ilo, ihi = dist.shell.interior()
    boxes = {}
    for p in dist.parts:
        lo = corners[p.part_id]
        hi = tuple(l + s - 1 for l, s in zip(lo, p.size))
        for ax, name in enumerate("XYZ"):
            if lo[ax] < ilo[ax] or hi[ax] > ihi[ax]:
                return f"containment: part {p.part_id} leaves the shell interior along {name}"
        boxes[p.part_id] = (lo, hi)
    ids = list(boxes)
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            (alo, ahi), (blo, bhi) = boxes[ids[a]], boxes[ids[b]]
            if all(alo[d] <= bhi[d] and blo[d] <= ahi[d] for d in range(3)):
                return f"non-overlap: parts {ids[a]} and {ids[b]} overlap"
    return None


def sample_centers(dist: ArrangementDistribution, rng: np.random.Generator) -> dict[int, tuple[int, int, int]]:
    """Rejection-sample jittered part centres; raises GenerationError when the budget runs out."""
    reason = "no attempts made"
    for _ in range(dist.max_attempts):
        centers = {}
        for p in dist.parts:
            offs = [int(rng.integers(-r, r + 1)) if r > 0 else 0 for r in p.jitter]
            centers[p.part_id] = tuple(c + o for c, o in zip(p.center, offs))
        corners = {p.part_id: p.lower_corner(centers[p.part_id]) for p in dist.parts}
        reason = _violation(dist, corners)
        if reason is None:
            return centers
    raise GenerationError(f"mode {dist.mode_id}: {dist.max_attempts} attempts exhausted; last violation {reason}")


def render_scene(dist: ArrangementDistribution, centers: Mapping[int, Sequence[int]]) -> AttributedVoxelGrid:
    K = dist.K
    ids = np.zeros((K, K, K), np.uint8)
    sh = dist.shell
    (x0, y0, z0), (x1, y1, z1) = sh.lo, sh.hi
    ids[z0 - 1:z1, y0 - 1:y1, x0 - 1:x1] = SHELL_ID
    if not sh.fill:
        (a0, b0, c0), (a1, b1, c1) = sh.interior()
        ids[c0 - 1:c1, b0 - 1:b1, a0 - 1:a1] = 0
    for p in dist.parts:
        lx, ly, lz = p.lower_corner(centers[p.part_id])
        sx, sy, sz = p.size
        ids[lz - 1:lz - 1 + sz, ly - 1:ly - 1 + sy, lx - 1:lx - 1 + sx] = p.part_id
    return AttributedVoxelGrid.from_part_ids(ids, dist.part_table())


def sample_scene(dist: ArrangementDistribution, rng_seed) -> AttributedVoxelGrid:
    """Deterministic scene for ``rng_seed`` (an int, a seed sequence entropy list or a Generator)."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return render_scene(dist, sample_centers(dist, rng))


# --- built-in modes ----------------------------------------------------------

# Reference arrangements on a 16^3 grid: (size, centre) for parts 2, 3, 4.
_REFERENCE_MODES_16 = [
    {2: ((5, 4, 5), (5, 5, 5)), 3: ((4, 6, 4), (12, 11, 11)), 4: ((5, 4, 4), (11, 5, 12))},
    {2: ((5, 5, 4), (11, 11, 5)), 3: ((6, 4, 4), (6, 4, 12)), 4: ((4, 5, 5), (5, 11, 11))},
    {2: ((4, 5, 5), (8, 8, 11)), 3: ((5, 5, 3), (5, 5, 5)), 4: ((4, 4, 5), (12, 12, 5))},
    {2: ((6, 4, 4), (9, 12, 5)), 3: ((4, 4, 6), (5, 5, 11)), 4: ((4, 6, 4), (12, 6, 11))},
    {2: ((4, 4, 6), (12, 5, 10)), 3: ((5, 3, 5), (5, 12, 5)), 4: ((5, 5, 4), (5, 7, 12))},
]


def default_modes(K: int = 16, n_modes: int = 5, jitter: int = 1, fill: bool = True) -> list[ArrangementDistribution]:
    """Five simple-shape arrangement modes, rescaled from the 16^3 reference layout."""
    if not 1 <= n_modes <= len(_REFERENCE_MODES_16):
        raise ConfigError(f"n_modes must be in [1, {len(_REFERENCE_MODES_16)}]")
    scale = K / 16.0
    shell = ShellSpec((1, 1, 1), (K, K, K), 1, SHELL_COLOR, fill)
    modes = []
    for m, ref in enumerate(_REFERENCE_MODES_16[:n_modes]):
        parts = []
        for pid, (size, center) in ref.items():
            s = tuple(max(1, int(round(v * scale))) for v in size)
            c = tuple(min(K - 1, max(2, int(round((v - 0.5) * scale + 0.5)))) for v in center)
            parts.append(PartSpec(pid, DEFAULT_PARTS[pid][1], s, c, (jitter,) * 3))
        modes.append(ArrangementDistribution(m, K, shell, tuple(parts)))
    return modes


def toy_modes(K: int = 8) -> list[ArrangementDistribution]:
    """Two modes whose 2x2x2 target sits in opposite interior corners."""
    shell = ShellSpec((1, 1, 1), (K, K, K), 1, SHELL_COLOR, True)
    lo_c, hi_c = 3, K - 2
    mk = lambda m, tc, oc: ArrangementDistribution(m, K, shell, (
        PartSpec(TARGET_ID, DEFAULT_PARTS[2][1], (2, 2, 2), (tc,) * 3, (0, 0, 0)),
        PartSpec(4, DEFAULT_PARTS[4][1], (2, 2, 2), (oc, oc, tc), (0, 1, 0)),
    ))
    return [mk(0, lo_c, hi_c), mk(1, hi_c, lo_c)]


# --- datasets ----------------------------------------------------------------

@dataclass
class SceneDataset:
    grids: list[AttributedVoxelGrid]
    part_table: dict[int, tuple[float, float, float]]
    target_part_id: int
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.grids)

    @property
    def K(self) -> int:
        return self.grids[0].K

    def tensors(self) -> np.ndarray:
        return np.stack([voxelize_to_tensor(g) for g in self.grids])

    def validate(self) -> None:
        for n, g in enumerate(self.grids):
            if quantize_to_grid(voxelize_to_tensor(g), self.part_table) != g:
                raise GenerationError(f"grid {n} does not quantize losslessly against the part table")

    def sidecar(self) -> dict:
        return {
            "K": self.K,
            "count": len(self.grids),
            "target_part_id": self.target_part_id,
            "part_table": {str(k): list(v) for k, v in sorted(self.part_table.items())},
            "provenance": self.provenance,
        }

    def save(self, path: str | os.PathLike) -> None:
        save_vxdc(path, self.grids)
        with open(str(path) + ".json", "w") as fh:
            json.dump(self.sidecar(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SceneDataset":
        grids = load_vxdc(path)
        with open(str(path) + ".json") as fh:
            meta = json.load(fh)
        table = {int(k): tuple(v) for k, v in meta["part_table"].items()}
        return cls(grids, table, int(meta["target_part_id"]), meta.get("provenance", {}))


def build_dataset(dists: Sequence[ArrangementDistribution], samples_per_mode: int, seed: int) -> SceneDataset:
    if not dists:
        raise ConfigError("at least one arrangement distribution is required")
    targets = {d.target_part_id for d in dists}
    if len(targets) != 1:
        raise ConfigError(f"modes disagree on the target part: {sorted(targets)}")
    table: dict[int, tuple] = {}
    for d in dists:
        for pid, color in d.part_table().items():
            if table.setdefault(pid, color) != color:
                raise ConfigError(f"part {pid} has conflicting colours across modes")
    grids, labels = [], []
    for d in dists:
        for s in range(samples_per_mode):
            grids.append(sample_scene(d, np.random.default_rng([seed, d.mode_id, s])))
            labels.append(d.mode_id)
    counts = {str(d.mode_id): labels.count(d.mode_id) for d in dists}
    prov = {"seed": seed, "samples_per_mode": samples_per_mode, "mode_counts": counts, "mode_labels": labels}
    return SceneDataset(grids, table, targets.pop(), prov)


# --- training masks ----------------------------------------------------------

def sample_training_mask(K: int, rng: np.random.Generator, max_planes: int = 6,
                         weights: Sequence[float] | None = None) -> np.ndarray:
    """Union of a random number of full axis-aligned planes (count 0 gives the empty mask)."""
    if weights is None:
        weights = np.full(max_planes + 1, 1.0 / (max_planes + 1))
    weights = np.asarray(weights, float)
    if weights.shape != (max_planes + 1,) or weights.min() < 0 or weights.sum() <= 0:
        raise ConfigError("plane-count weights must be non-negative with max_planes + 1 entries")
    n = int(rng.choice(max_planes + 1, p=weights / weights.sum()))
    mask = np.zeros((K, K, K), bool)
    for _ in range(n):
        axis = int(rng.integers(3))
        idx = int(rng.integers(K))
        sel: list = [slice(None)] * 3
        sel[2 - axis] = idx
        mask[tuple(sel)] = True
    return mask


def random_box_crop(K: int, rng: np.random.Generator) -> np.ndarray:
    """Random axis-aligned box, mimicking the region left after earlier cuts."""
    box = np.zeros((K, K, K), bool)
    lo = rng.integers(0, K // 2, size=3)
    hi = K - rng.integers(0, K // 2, size=3)
    box[lo[2]:hi[2], lo[1]:hi[1], lo[0]:hi[0]] = True
    return box


# --- declarative scene config ------------------------------------------------

def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def parse_scene_config(text: str) -> list[ArrangementDistribution]:
    """Parse an INI-style scene file.

    ::

        [scene]
        K = 16
        target = 2
        shell_thickness = 1
        shell_color = 0.5 0.5 0.5
        shell_fill = yes

        [part 2]
        color = 0 0 1

        [mode 0]
        part2 = size 5 4 5 center 5 5 5 jitter 1 1 1
    """
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed scene config: {exc}") from exc
    if "scene" not in cp:
        raise ConfigError("scene config needs a [scene] section")
    sc = cp["scene"]
    K = sc.getint("K", 16)
    lo = _ints(sc.get("shell_lo", "1 1 1"))
    hi = _ints(sc.get("shell_hi", f"{K} {K} {K}"))
    shell = ShellSpec(lo, hi, sc.getint("shell_thickness", 1), _floats(sc.get("shell_color", "0.5 0.5 0.5")),
                      sc.getboolean("shell_fill", True))
    colors = {}
    for name in cp.sections():
        if name.startswith("part "):
            colors[int(name.split()[1])] = _floats(cp[name]["color"])
    modes = []
    for name in cp.sections():
        if not name.startswith("mode "):
            continue
        parts = []
        for key, val in cp[name].items():
            if not key.startswith("part"):
                continue
            pid = int(key[4:])
            toks = val.split()
            spec = {toks[i]: tuple(int(v) for v in toks[i + 1:i + 4]) for i in range(0, len(toks), 4)}
            if pid not in colors:
                raise ConfigError(f"part {pid} used in [{name}] has no [part {pid}] colour block")
            parts.append(PartSpec(pid, colors[pid], spec["size"], spec["center"], spec.get("jitter", (0, 0, 0))))
        modes.append(ArrangementDistribution(int(name.split()[1]), K, shell, tuple(parts),
                                             sc.getint("target", TARGET_ID), sc.getint("max_attempts", 1000)))
    if not modes:
        raise ConfigError("scene config defines no [mode N] sections")
    return modes


def format_scene_config(modes: Sequence[ArrangementDistribution]) -> str:
    m0 = modes[0]
    sh = m0.shell
    lines = ["[scene]", f"K = {m0.K}", f"target = {m0.target_part_id}",
             f"shell_lo = {' '.join(map(str, sh.lo))}", f"shell_hi = {' '.join(map(str, sh.hi))}",
             f"shell_thickness = {sh.thickness}", f"shell_color = {' '.join(map(str, sh.color))}",
             f"shell_fill = {'yes' if sh.fill else 'no'}", ""]
    colors = {p.part_id: p.color for m in modes for p in m.parts}
    for pid in sorted(colors):
        lines += [f"[part {pid}]", f"color = {' '.join(map(str, colors[pid]))}", ""]
    for m in modes:
        lines.append(f"[mode {m.mode_id}]")
        for p in m.parts:
            lines.append(f"part{p.part_id} = size {' '.join(map(str, p.size))} center "
                         f"{' '.join(map(str, p.center))} jitter {' '.join(map(str, p.jitter))}")
        lines.append("")
    return "\n".join(lines)
