"""Deterministic synthetic video sequences standing in for street scenes.

Each sequence is a fixed camera over 2-4 horizontal "stuff" bands, with rigid
"thing" shapes (circles for odd thing classes, boxes for even ones) crossing
the frame at constant velocity. Global illumination drifts along the
sequence and every frame gets fresh sensor noise. A fixed ego-car region at
the bottom of the frame is painted over everything and labeled void.

Only frame ``labeled_index`` of each sequence is linked as a label in the
manifest; ground truth for every frame is written to ``gt/`` for analysis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from PIL import Image

from ..types import LABEL_DIVISOR, VOID, ClassInfo, ClassTable
from .lmap import save_lmap
from .manifest import DatasetManifest, FrameRecord

_STUFF_NAMES = ["road", "building", "vegetation", "sky", "sidewalk", "terrain"]
_THING_NAMES = ["car", "person", "bicycle", "truck", "rider", "bus"]


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    num_sequences: int = 20
    frames_per_sequence: int = 30
    image_size: Tuple[int, int] = (64, 96)
    num_thing_classes: int = 2
    num_stuff_classes: int = 2
    ego_car_fraction: float = 0.1
    motion_speed: float = 4.0
    rng_seed: int = 0
    num_val_sequences: int = 40
    labeled_index: int = 19
    instances_per_sequence: Tuple[int, int] = (6, 12)
    noise_std: float = 0.06

    def __post_init__(self):
        if self.frames_per_sequence < 1:
            raise SynthConfigError("frames_per_sequence must be >= 1")
        if not 0.0 <= self.ego_car_fraction <= 0.3:
            raise SynthConfigError("ego_car_fraction must lie in [0, 0.3]")
        if self.num_sequences < 0 or self.num_val_sequences < 0:
            raise SynthConfigError("sequence counts must be non-negative")
        if self.num_thing_classes < 0 or self.num_stuff_classes < 1:
            raise SynthConfigError("need at least one stuff class")
        if self.num_thing_classes > len(_THING_NAMES) or self.num_stuff_classes > len(_STUFF_NAMES):
            raise SynthConfigError("too many classes for the name tables")
        if not 0 <= self.labeled_index < self.frames_per_sequence:
            raise SynthConfigError("labeled_index must be a valid frame index")
        h, w = self.image_size
        if self.min_radius < 2 or 2 * self.max_radius >= min(h - self.ego_rows, w):
            raise SynthConfigError(f"shapes of radius {self.min_radius}-{self.max_radius} px "
                                   f"cannot fit a {h}x{w} image")

    @property
    def ego_rows(self) -> int:
        return int(round(self.image_size[0] * self.ego_car_fraction))

    @property
    def min_radius(self) -> int:
        return int(round(0.08 * self.image_size[0]))

    @property
    def max_radius(self) -> int:
        return int(round(0.17 * self.image_size[0]))

    def class_table(self) -> ClassTable:
        classes = []
        for i in range(self.num_stuff_classes):
            classes.append(ClassInfo(len(classes) + 1, _STUFF_NAMES[i], "stuff"))
        for i in range(self.num_thing_classes):
            classes.append(ClassInfo(len(classes) + 1, _THING_NAMES[i], "thing"))
        return ClassTable(classes)


def _class_palettes(cfg: SynthConfig, rng: np.random.Generator):
    """Per-class base colours shared by every sequence of a dataset."""
    n = cfg.num_stuff_classes + cfg.num_thing_classes
    base = rng.uniform(0.2, 0.8, size=(n + 1, 3))
    return base


@dataclass
class _Instance:
    cls: int
    index: int
    circle: bool
    radius: float
    half: Tuple[float, float]
    pos: Tuple[float, float]
    vel: Tuple[float, float]
    color: np.ndarray


def _make_sequence(cfg: SynthConfig, table: ClassTable, palette, rng: np.random.Generator):
    h, w = cfg.image_size
    stuff_ids = table.stuff_ids
    thing_ids = table.thing_ids
    band_count = int(rng.integers(2, 5))
    usable = h - cfg.ego_rows
    cuts = np.sort(rng.choice(np.arange(4, max(usable - 3, 5)), size=band_count - 1, replace=False))
    edges = [0] + [int(c) for c in cuts] + [h]
    band_classes: List[int] = []
    for _ in range(band_count):
        choices = [s for s in stuff_ids if not band_classes or s != band_classes[-1]] or stuff_ids
        band_classes.append(int(rng.choice(choices)))
    band_colors = [np.clip(palette[c] + rng.normal(0, 0.12, 3), 0, 1) for c in band_classes]
    band_tex = [(rng.uniform(0.3, 1.2), rng.uniform(0, 2 * np.pi), 0.05 + 0.05 * (c % 2))
                for c in band_classes]

    instances: List[_Instance] = []
    counters: Dict[int, int] = {}
    lo, hi = cfg.instances_per_sequence
    n_inst = int(rng.integers(lo, hi + 1)) if thing_ids else 0
    span = cfg.frames_per_sequence - 1
    for _ in range(n_inst):
        cls = int(rng.choice(thing_ids))
        counters[cls] = counters.get(cls, 0) + 1
        circle = (thing_ids.index(cls) % 2) == 0
        radius = float(rng.uniform(cfg.min_radius, cfg.max_radius))
        half = (radius * rng.uniform(0.6, 1.0), radius * rng.uniform(1.0, 1.6))
        speed = cfg.motion_speed * rng.uniform(0.6, 1.4) * (1 if rng.random() < 0.5 else -1)
        vel = (cfg.motion_speed * rng.uniform(-0.1, 0.1), speed)
        # Each shape crosses the frame at some point of the sequence, so most
        # of them are out of view in any single frame.
        r_mid = rng.uniform(radius, usable - radius * 0.5)
        c_mid = rng.uniform(0, w)
        t_mid = rng.uniform(-0.15 * span, 1.15 * span)
        pos = (r_mid - vel[0] * t_mid, c_mid - vel[1] * t_mid)
        color = np.clip(palette[cls] + rng.normal(0, 0.15, 3), 0, 1)
        instances.append(_Instance(cls, counters[cls], circle, radius, half, pos, vel, color))

    ego_color = np.clip(np.array([0.15, 0.15, 0.18]) + rng.normal(0, 0.05, 3), 0, 1)
    g0, g1 = rng.uniform(0.65, 1.35, size=2)
    return edges, band_classes, band_colors, band_tex, instances, ego_color, (g0, g1)


def _render_frame(cfg: SynthConfig, seq, t: int, rng: np.random.Generator):
    h, w = cfg.image_size
    edges, band_classes, band_colors, band_tex, instances, ego_color, (g0, g1) = seq
    img = np.zeros((h, w, 3))
    sem = np.zeros((h, w), dtype=np.int64)
    inst = np.zeros((h, w), dtype=np.int64)
    rr = np.arange(h, dtype=np.float64)[:, None]
    cc = np.arange(w, dtype=np.float64)[None, :]
    for (r0, r1), cls, color, (freq, phase, amp) in zip(zip(edges[:-1], edges[1:]), band_classes,
                                                         band_colors, band_tex):
        if cls % 2:
            tex = amp * np.sin(freq * rr[r0:r1] + phase) * np.ones((1, w))
        else:
            tex = amp * np.sin(freq * cc + phase) * np.ones((r1 - r0, 1))
        img[r0:r1] = color[None, None, :] + tex[..., None]
        sem[r0:r1] = cls
    for obj in instances:
        cr = obj.pos[0] + obj.vel[0] * t
        ccol = obj.pos[1] + obj.vel[1] * t
        if obj.circle:
            m = (rr - cr) ** 2 + (cc - ccol) ** 2 <= obj.radius ** 2
        else:
            m = (np.abs(rr - cr) <= obj.half[0]) & (np.abs(cc - ccol) <= obj.half[1])
        if not m.any():
            continue
        shade = 1.0 - 0.25 * np.clip((rr - cr) / (2 * obj.radius) + 0.5, 0, 1)
        img[m] = (obj.color[None, None, :] * shade[..., None] * np.ones((1, w, 1)))[m]
        sem[m] = obj.cls
        inst[m] = obj.index
    if cfg.ego_rows:
        img[h - cfg.ego_rows:] = ego_color
        sem[h - cfg.ego_rows:] = VOID
        inst[h - cfg.ego_rows:] = 0
    gain = g0 + (g1 - g0) * (t / max(cfg.frames_per_sequence - 1, 1))
    img = img * gain + rng.normal(0, cfg.noise_std, img.shape)
    pixels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return pixels, (sem * LABEL_DIVISOR + inst).astype(np.int32)


def synth_generate(config: SynthConfig, out_dir):
    """Render the dataset into ``out_dir`` and write ``manifest.tsv``.

    Returns ``(manifest, ground_truth)`` where ``ground_truth`` maps each
    frame key (``"seq/idx"``) to its full panoptic map.
    """
    out_dir = Path(out_dir)
    table = config.class_table()
    root_ss = np.random.SeedSequence(config.rng_seed)
    palette_ss, *seq_ss = root_ss.spawn(1 + config.num_sequences + config.num_val_sequences)
    palette = _class_palettes(config, np.random.default_rng(palette_ss))
    frames: List[FrameRecord] = []
    gt: Dict[str, np.ndarray] = {}
    for s, ss in enumerate(seq_ss):
        val = s >= config.num_sequences
        seq_id = f"{'val' if val else 'train'}{s:04d}"
        layout_ss, noise_ss = ss.spawn(2)
        seq = _make_sequence(config, table, palette, np.random.default_rng(layout_ss))
        noise_rng = np.random.default_rng(noise_ss)
        (out_dir / "images" / seq_id).mkdir(parents=True, exist_ok=True)
        (out_dir / "gt" / seq_id).mkdir(parents=True, exist_ok=True)
        for t in range(config.frames_per_sequence):
            pixels, ids = _render_frame(config, seq, t, noise_rng)
            img_rel = f"images/{seq_id}/{t:03d}.png"
            gt_rel = f"gt/{seq_id}/{t:03d}.lmap"
            Image.fromarray(pixels).save(out_dir / img_rel, format="PNG")
            save_lmap(ids, out_dir / gt_rel)
            labeled = t == config.labeled_index
            tags = {"val-sequence"} if val else {"train-sequence"}
            if labeled:
                tags.add("val-fine" if val else "train-fine")
            frames.append(FrameRecord(seq_id, t, img_rel, gt_rel if labeled else None, None,
                                      frozenset(tags)))
            gt[f"{seq_id}/{t:03d}"] = ids
    h, w = config.image_size
    ego_rect = (h - config.ego_rows, h, 0, w) if config.ego_rows else None
    manifest = DatasetManifest(table, frames, config.image_size, out_dir, config.labeled_index, ego_rect)
    manifest.save(out_dir / "manifest.tsv")
    return manifest, gt


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
