"""Trajectory ingestion, windowing, neighbour-preserving batching and synthetic scenes."""
from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .social import build_mask, neighbour_edges

log = logging.getLogger(__name__)

FORMATS = ("ethucy_txt", "sdd_annot")
# frame-id subsampling that brings each source to 2.5 Hz
SUBSAMPLE_EVERY = {"ethucy_txt": 10, "sdd_annot": 12}


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RawRecord:
    frame_id: int
    agent_id: int
    x: float
    y: float


@dataclass
class Sample:
    past: np.ndarray  # (t_p, 2)
    future: np.ndarray  # (t_f, 2)
    frame_ids: np.ndarray  # (t_p + t_f,)
    agent_id: int
    scene_id: str = ""
    offset: np.ndarray = field(default_factory=lambda: np.zeros(2))
    scale: float = 1.0
    is_normalized: bool = False

    @property
    def endpoint(self) -> np.ndarray:
        return self.future[-1]

    @property
    def t_p(self) -> int:
        return len(self.past)

    @property
    def t_f(self) -> int:
        return len(self.future)

    @property
    def past_frames(self) -> np.ndarray:
        return self.frame_ids[: self.t_p]


def _int_field(tok: str) -> int:
    v = float(tok)
    if v != int(v):
        raise ValueError(f"expected an integer, got {tok!r}")
    return int(v)


def load_trajectory_file(path, fmt: str = "ethucy_txt") -> list[RawRecord]:
    """Parse an ETH/UCY-style ``frame agent x y`` file or an SDD annotation file.

    SDD rows keep only non-lost pedestrians, positioned at the box centre.
    """
    if fmt not in FORMATS:
        raise DataFormatError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    records: list[RawRecord] = []
    seen: set[tuple[int, int]] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            toks = line.split()
            if not toks:
                continue
            try:
                if fmt == "ethucy_txt":
                    if len(toks) != 4:
                        raise ValueError(f"expected 4 fields, got {len(toks)}")
                    rec = RawRecord(_int_field(toks[0]), _int_field(toks[1]), float(toks[2]), float(toks[3]))
                else:
                    if len(toks) != 10:
                        raise ValueError(f"expected 10 fields, got {len(toks)}")
                    agent, xmin, ymin, xmax, ymax, frame, lost = (_int_field(t) for t in toks[:7])
                    label = toks[9].strip('"')
                    if lost or label != "Pedestrian":
                        continue
                    rec = RawRecord(frame, agent, (xmin + xmax) / 2, (ymin + ymax) / 2)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: malformed line: {exc}") from exc
            key = (rec.frame_id, rec.agent_id)
            if key in seen:
                raise DataFormatError(f"{path}:{lineno}: duplicate (frame, agent) {key}")
            seen.add(key)
            records.append(rec)
    return records


def subsample(records: Iterable[RawRecord], every: int) -> list[RawRecord]:
    return [r for r in records if r.frame_id % every == 0]


def _infer_frame_step(tracks: dict[int, list[RawRecord]]) -> int:
    diffs = [b.frame_id - a.frame_id for tr in tracks.values() for a, b in zip(tr, tr[1:])]
    diffs = [d for d in diffs if d > 0]
    return min(diffs) if diffs else 1


def window_samples(
    records: Sequence[RawRecord],
    t_p: int = 8,
    t_f: int = 12,
    stride: int = 20,
    frame_step: int | None = None,
    scene_id: str = "",
) -> list[Sample]:
    """Cut every maximal run of consecutive observations of an agent into windows.

    Observations are consecutive when their frame ids differ by exactly ``frame_step``
    (inferred as the smallest positive gap when omitted).
    """
    tracks: dict[int, list[RawRecord]] = defaultdict(list)
    for r in sorted(records, key=lambda r: (r.agent_id, r.frame_id)):
        tracks[r.agent_id].append(r)
    step = frame_step or _infer_frame_step(tracks)
    length = t_p + t_f
    samples = []
    for agent_id, track in tracks.items():
        runs: list[list[RawRecord]] = [[track[0]]]
        for prev, cur in zip(track, track[1:]):
            if cur.frame_id - prev.frame_id == step:
                runs[-1].append(cur)
            else:
                runs.append([cur])
        for run in runs:
            for start in range(0, len(run) - length + 1, stride):
                win = run[start : start + length]
                xy = np.array([(r.x, r.y) for r in win], dtype=np.float64)
                samples.append(
                    Sample(
                        past=xy[:t_p],
                        future=xy[t_p:],
                        frame_ids=np.array([r.frame_id for r in win], dtype=np.int64),
                        agent_id=agent_id,
                        scene_id=scene_id,
                    )
                )
    return samples


def normalize(sample: Sample, scale: float = 1.0) -> Sample:
    """Shift so the last observed position is the origin, then divide by ``scale``."""
    if sample.is_normalized:
        raise ValueError("sample is already normalized")
    offset = sample.past[-1].copy()
    return replace(sample, past=(sample.past - offset) / scale, future=(sample.future - offset) / scale, offset=offset, scale=scale, is_normalized=True)


def denormalize(sample: Sample) -> Sample:
    return replace(
        sample,
        past=to_world(sample.past, sample.offset, sample.scale),
        future=to_world(sample.future, sample.offset, sample.scale),
        offset=np.zeros(2),
        scale=1.0,
        is_normalized=False,
    )


def to_world(points: np.ndarray, offset: np.ndarray, scale: float) -> np.ndarray:
    return points * scale + offset


# --------------------------------------------------------------------------- batching


@dataclass
class SceneBatch:
    """Samples (raw coordinates) plus their social mask and normalized model inputs."""

    samples: list[Sample]
    mask: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        norm = [normalize(s, self.scale) for s in self.samples]
        self.past = np.stack([s.past.reshape(-1) for s in norm])
        self.future = np.stack([s.future for s in norm])  # (alpha, t_f, 2), normalized
        self.offsets = np.stack([s.offset for s in norm])
        self.raw_future = np.stack([s.future for s in self.samples])

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def t_f(self) -> int:
        return self.future.shape[1]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], t_dist: float, scale: float = 1.0) -> "SceneBatch":
        mask = build_mask([(s.past, s.past_frames) for s in samples], t_dist)
        return cls(list(samples), mask, scale)


def mask_components(samples: Sequence[Sample], t_dist: float) -> list[list[int]]:
    """Connected components of the neighbour graph, each sorted, ordered by first member."""
    n = len(samples)
    if n == 0:
        return []
    edges = neighbour_edges([(s.past, s.past_frames) for s in samples], t_dist)
    if edges:
        i, j = np.array(edges).T
    else:
        i = j = np.array([], dtype=np.int64)
    graph = coo_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    comps: dict[int, list[int]] = defaultdict(list)
    for idx, lab in enumerate(labels):
        comps[lab].append(idx)
    return sorted(comps.values(), key=lambda c: c[0])


def group_into_batches(samples: Sequence[Sample], t_dist: float, max_batch: int = 512, scale: float = 1.0) -> list[SceneBatch]:
    """Pack whole neighbour components greedily into batches of at most ``max_batch``.

    A component larger than ``max_batch`` becomes its own (oversized) batch.
    """
    batches: list[list[int]] = []
    current: list[int] = []
    for comp in mask_components(samples, t_dist):
        if len(comp) > max_batch:
            log.warning("component of %d samples exceeds max_batch=%d", len(comp), max_batch)
            batches.append(comp)
            continue
        if len(current) + len(comp) > max_batch:
            batches.append(current)
            current = []
        current.extend(comp)
    if current:
        batches.append(current)
    return [SceneBatch.from_samples([samples[i] for i in idx], t_dist, scale) for idx in batches]


# --------------------------------------------------------------------------- synthetic scenes


def _straight(rng, start, n, speed, heading):
    steps = np.arange(n)[:, None]
    return start + steps * speed * np.array([np.cos(heading), np.sin(heading)])


def _turning(rng, start, n, speed, heading, omega):
    ang = heading + omega * np.arange(n)
    vel = speed * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return start + np.vstack([np.zeros((1, 2)), np.cumsum(vel[:-1], axis=0)])


def gen_synthetic(
    n_scenes: int,
    agents_per_scene: int,
    seed: int,
    jitter: float = 0.02,
    length: int = 20,
    frame_step: int = 10,
    kinds: Sequence[str] | None = None,
) -> list[RawRecord]:
    """Scenes of straight, turning and crossing walkers on a 2.5 Hz frame grid.

    Each scene has its own frame range, so scenes never see each other.  The first two
    agents of every scene (when ``agents_per_scene >= 2``) form a crossing pair whose
    paths meet during the observed window.  ``kinds`` overrides the per-agent motion
    type with entries from ``{"straight", "turning", "crossing"}``.
    """
    rng = np.random.default_rng(seed)
    records: list[RawRecord] = []
    for s in range(n_scenes):
        frame0 = s * (length + 5) * frame_step
        tracks = []
        k = 0
        while k < agents_per_scene:
            kind = kinds[k % len(kinds)] if kinds else ("crossing" if k == 0 and agents_per_scene >= 2 else ("straight", "turning")[k % 2])
            speed = rng.uniform(0.35, 0.6)
            if kind == "crossing" and k + 1 < agents_per_scene:
                meet = rng.uniform(4.0, 11.0, size=2)
                meet_step = int(rng.integers(3, 7))
                heading = rng.uniform(0, 2 * np.pi)
                for h in (heading, heading + rng.uniform(np.pi / 3, 2 * np.pi / 3)):
                    v = speed * np.array([np.cos(h), np.sin(h)])
                    tracks.append(meet + (np.arange(length)[:, None] - meet_step) * v)
                k += 2
                continue
            start = rng.uniform(0.0, 15.0, size=2)
            heading = rng.uniform(0, 2 * np.pi)
            if kind == "turning":
                omega = rng.choice([-1, 1]) * rng.uniform(0.05, 0.15)
                tracks.append(_turning(rng, start, length, speed, heading, omega))
            else:
                tracks.append(_straight(rng, start, length, speed, heading))
            k += 1
        for a, xy in enumerate(tracks):
            if jitter:
                xy = xy + rng.normal(0.0, jitter, size=xy.shape)
            agent_id = s * 1000 + a
            records.extend(RawRecord(frame0 + t * frame_step, agent_id, float(x), float(y)) for t, (x, y) in enumerate(xy))
    return records


# --------------------------------------------------------------------------- manifests & interchange


def load_manifest(path) -> dict[str, list[Path]]:
    """``scene_name: path [path ...]`` per line; relative paths resolve against the manifest."""
    base = Path(path).parent
    scenes: dict[str, list[Path]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            name, sep, rest = line.partition(":")
            if not sep or not name.strip() or not rest.split():
                raise DataFormatError(f"{path}:{lineno}: expected 'scene_name: path [path ...]'")
            scenes[name.strip()] = [p if p.is_absolute() else base / p for p in map(Path, rest.split())]
    return scenes


def load_scene(paths: Sequence[Path], fmt: str, scene_id: str, t_p: int = 8, t_f: int = 12, stride: int = 20) -> list[Sample]:
    out = []
    for p in paths:
        recs = subsample(load_trajectory_file(p, fmt), SUBSAMPLE_EVERY[fmt])
        out.extend(window_samples(recs, t_p, t_f, stride, frame_step=SUBSAMPLE_EVERY[fmt], scene_id=f"{scene_id}/{Path(p).stem}"))
    return out


def write_predictions(path, batches: Sequence[SceneBatch], futures: Sequence[np.ndarray]) -> int:
    """Write ``scene_id,agent_id,sample_k,t,x,y`` rows; ``futures[b]`` is ``(K, agents, t_f, 2)``."""
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["scene_id", "agent_id", "sample_k", "t", "x", "y"])
        for batch, fut in zip(batches, futures):
            for k in range(fut.shape[0]):
                for a, s in enumerate(batch.samples):
                    for t in range(fut.shape[2]):
                        w.writerow([s.scene_id, s.agent_id, k, t, repr(float(fut[k, a, t, 0])), repr(float(fut[k, a, t, 1]))])
                        n += 1
    return n
