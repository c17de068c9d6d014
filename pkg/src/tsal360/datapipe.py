"""Dataset construction: fixation smoothing, salient-event discovery, triplets.

Per video: smooth raw fixations on the sphere, cluster each frame's salient
pixels with HDBSCAN under haversine distance, link clusters across frames
into salient events (bridging short gaps), split the ground-truth map into
one map per event, attach operator-provided captions, and emit one training
triplet per stride-1 frame window inside each event's span.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pngio
from .clustering import hdbscan
from .geometry import ErpGrid, SphPoint, _haversine, _unit_vectors, spherical_gaussian_smooth

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DatasetConfig:
    window: int = 8                    # frames per training window
    sigma_deg: float = 5.0             # fixation smoothing kernel
    salient_threshold: float = 0.3     # of the max-normalized smoothed map
    max_cluster_points: int = 2000     # per-frame subsample cap for clustering
    min_cluster_size: int = 25
    min_samples: int = 10
    match_radius_deg: float = 15.0     # frame-to-frame centroid matching bound
    gap_fill: int = 8                  # longest bridged absence, in frames
    dilate_deg: float = 15.0           # member dilation when splitting maps
    gt_height: int = 480
    seed: int = 0

    @property
    def gt_grid(self) -> ErpGrid:
        return ErpGrid(self.gt_height, 2 * self.gt_height)


@dataclass
class FrameCluster:
    centroid: SphPoint
    members: np.ndarray                # linear pixel indices on the gt grid


@dataclass
class SalientEvent:
    """One tracked salient region: per-frame centroid and member pixels."""

    event_id: str
    start: int
    end: int
    centroids: dict[int, SphPoint]
    members: dict[int, np.ndarray]
    bridged: set[int] = field(default_factory=set)
    description: str = ""

    @property
    def span(self) -> int:
        return self.end - self.start + 1


@dataclass
class EventTriplet:
    video_id: str
    event_id: str
    window_start: int
    frame_indices: list[int]
    frame_files: list[str]
    text: str
    gt_map: np.ndarray


@dataclass
class FoldSpec:
    folds: list[list[str]]

    def validate(self) -> "FoldSpec":
        flat = [v for fold in self.folds for v in fold]
        if len(flat) != len(set(flat)):
            raise ValueError("folds overlap")
        return self

    def fold_of(self, video_id: str) -> int:
        for i, fold in enumerate(self.folds):
            if video_id in fold:
                return i
        raise KeyError(video_id)

    def save(self, path) -> None:
        import json

        Path(path).write_text(json.dumps({"folds": self.folds}, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "FoldSpec":
        import json

        return cls(folds=json.loads(Path(path).read_text())["folds"]).validate()


# ---------------------------------------------------------------------------
# per-frame clustering


def salient_points(smoothed: np.ndarray, cfg: DatasetConfig, rng: np.random.Generator):
    """Pixels above threshold, weighted-subsampled to the clustering cap.

    Returns (linear pixel indices, (lat, lon) array, salience weights).
    """
    grid = ErpGrid(smoothed.shape[0], smoothed.shape[1])
    flat = smoothed.reshape(-1)
    idx = np.nonzero(flat >= cfg.salient_threshold)[0]
    if len(idx) > cfg.max_cluster_points:
        w = flat[idx]
        pick = rng.choice(len(idx), size=cfg.max_cluster_points, replace=False, p=w / w.sum())
        idx = idx[np.sort(pick)]
    lat_r, lon_c = grid.pixel_latlon()
    pts = np.column_stack([lat_r[idx // grid.width], lon_c[idx % grid.width]])
    return idx, pts, flat[idx]


def _weighted_centroid(pts: np.ndarray, weights: np.ndarray) -> SphPoint:
    vec = (_unit_vectors(pts[:, 0], pts[:, 1]) * weights[:, None]).sum(axis=0)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise ValueError("degenerate cluster: weighted member directions cancel")
    vec /= norm
    return SphPoint(float(np.arcsin(np.clip(vec[2], -1, 1))), float(np.arctan2(vec[1], vec[0])))


def cluster_frame(smoothed: np.ndarray, cfg: DatasetConfig, rng: np.random.Generator) -> list[FrameCluster]:
    idx, pts, weights = salient_points(smoothed, cfg, rng)
    if len(idx) == 0:
        return []
    labels = hdbscan(pts, cfg.min_cluster_size, cfg.min_samples)
    clusters = []
    for label in range(labels.max() + 1):
        mask = labels == label
        clusters.append(
            FrameCluster(centroid=_weighted_centroid(pts[mask], weights[mask]), members=idx[mask])
        )
    return clusters


# ---------------------------------------------------------------------------
# spatio-temporal sub-volumes


def _slerp(a: SphPoint, b: SphPoint, t: float) -> SphPoint:
    va = _unit_vectors(np.float64(a.lat), np.float64(a.lon))
    vb = _unit_vectors(np.float64(b.lat), np.float64(b.lon))
    omega = np.arccos(np.clip(va @ vb, -1.0, 1.0))
    if omega < 1e-12:
        return a
    v = (np.sin((1 - t) * omega) * va + np.sin(t * omega) * vb) / np.sin(omega)
    v /= np.linalg.norm(v)
    return SphPoint(float(np.arcsin(np.clip(v[2], -1, 1))), float(np.arctan2(v[1], v[0])))


def form_subvolumes(
    per_frame_clusters: list[list[FrameCluster]],
    match_radius: float,
    gap_fill: int,
    id_prefix: str = "e",
) -> list[SalientEvent]:
    """Greedy nearest-centroid tracking of clusters across frames.

    A cluster joins the live event whose last real centroid is nearest and
    within the matching radius; each event takes at most one cluster per
    frame.  An event absent for up to gap_fill frames is bridged: missing
    centroids are interpolated along the great circle and missing member
    sets borrow the nearest real frame's members.  Longer absences close
    the event.
    """
    live: list[SalientEvent] = []
    done: list[SalientEvent] = []
    last_real: dict[int, int] = {}
    counter = 0

    for f, clusters in enumerate(per_frame_clusters):
        # retire events that exceeded the bridgeable gap
        still = []
        for ev in live:
            if f - last_real[id(ev)] > gap_fill + 1:
                done.append(ev)
            else:
                still.append(ev)
        live = still

        pairs = []
        for ei, ev in enumerate(live):
            anchor = ev.centroids[last_real[id(ev)]]
            for ci, cl in enumerate(clusters):
                d = float(_haversine(anchor.lat, anchor.lon, cl.centroid.lat, cl.centroid.lon))
                if d <= match_radius:
                    pairs.append((d, ei, ci))
        pairs.sort()
        taken_ev, taken_cl = set(), set()
        for d, ei, ci in pairs:
            if ei in taken_ev or ci in taken_cl:
                continue
            taken_ev.add(ei)
            taken_cl.add(ci)
            ev, cl = live[ei], clusters[ci]
            prev = last_real[id(ev)]
            gap = f - prev - 1
            if gap > 0:
                for g in range(1, gap + 1):
                    mid = prev + g
                    ev.centroids[mid] = _slerp(ev.centroids[prev], cl.centroid, g / (gap + 1))
                    # bridged frames borrow the nearer real frame's members
                    ev.members[mid] = ev.members[prev] if g <= (gap + 1) / 2 else cl.members
                    ev.bridged.add(mid)
            ev.centroids[f] = cl.centroid
            ev.members[f] = cl.members
            ev.end = f
            last_real[id(ev)] = f
        for ci, cl in enumerate(clusters):
            if ci in taken_cl:
                continue
            ev = SalientEvent(
                event_id=f"{id_prefix}{counter:03d}",
                start=f,
                end=f,
                centroids={f: cl.centroid},
                members={f: cl.members},
            )
            counter += 1
            live.append(ev)
            last_real[id(ev)] = f

    done.extend(live)
    done.sort(key=lambda e: (e.start, e.event_id))
    return done


# ---------------------------------------------------------------------------
# per-event ground-truth maps


def split_event_maps(
    gt: np.ndarray, events_members: list[np.ndarray], dilate_deg: float
) -> list[np.ndarray]:
    """Cut the frame's ground truth into one max-normalized map per event.

    Each event keeps the gt values on its member pixels dilated by the
    smoothing kernel's support radius; everything else is zeroed.  An event
    with no members at this frame is rejected.
    """
    grid = ErpGrid(gt.shape[0], gt.shape[1])
    lat_r, lon_c = grid.pixel_latlon()
    plat = np.repeat(lat_r, grid.width)
    plon = np.tile(lon_c, grid.height)
    radius = np.deg2rad(dilate_deg)
    out = []
    for members in events_members:
        if members is None or len(members) == 0:
            raise ValueError("cannot split a map for an event with an empty member set")
        mlat = plat[members]
        mlon = plon[members]
        center = _weighted_centroid(np.column_stack([mlat, mlon]), np.ones(len(members)))
        reach = float(_haversine(mlat, mlon, center.lat, center.lon).max()) + radius
        cand = np.nonzero(_haversine(plat, plon, center.lat, center.lon) <= reach)[0]
        dmin = _haversine(plat[cand, None], plon[cand, None], mlat[None, :], mlon[None, :]).min(axis=1)
        mask = np.zeros(grid.height * grid.width, dtype=bool)
        mask[cand[dmin <= radius]] = True
        cut = np.where(mask.reshape(gt.shape), gt, 0.0)
        peak = cut.max()
        if peak > 0:
            cut = cut / peak
        out.append(cut)
    return out


# ---------------------------------------------------------------------------
# augmentation


def window_shift_augment(event: SalientEvent, window: int) -> list[tuple[int, list[int]]]:
    """All stride-1 windows of `window` frames lying inside the event span.

    Returns (window_start, frame index list) pairs; there are exactly
    span - window + 1 of them.
    """
    if event.span < window:
        raise ValueError(
            f"event {event.event_id} spans {event.span} frames, shorter than the window {window}"
        )
    return [
        (s, list(range(s, s + window)))
        for s in range(event.start, event.end - window + 2)
    ]


# ---------------------------------------------------------------------------
# fold splitting


def kfold_split(video_ids: list[str], k: int = 5, seed: int = 0) -> FoldSpec:
    """Deterministic video-level split into k folds with sizes differing by <= 1."""
    ids = sorted(video_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate video ids")
    if k < 2 or k > len(ids):
        raise ValueError(f"cannot split {len(ids)} videos into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = [[ids[j] for j in order[i::k]] for i in range(k)]
    return FoldSpec(folds=[sorted(f) for f in folds]).validate()


# ---------------------------------------------------------------------------
# on-disk pipeline


def load_fixation_csv(path) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Read `frame,lat_deg,lon_deg[,weight]` lines into per-frame point sets."""
    frames: dict[int, list] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("frame"):
            continue
        parts = line.split(",")
        if len(parts) not in (3, 4):
            raise ValueError(f"{path}:{lineno}: expected frame,lat_deg,lon_deg[,weight]")
        f = int(parts[0])
        lat, lon = np.deg2rad(float(parts[1])), np.deg2rad(float(parts[2]))
        w = float(parts[3]) if len(parts) == 4 else 1.0
        frames.setdefault(f, []).append((lat, lon, w))
    out = {}
    for f, rows in frames.items():
        arr = np.array(rows, dtype=np.float64)
        out[f] = (arr[:, :2], arr[:, 2])
    return out


def load_caption_sidecar(path) -> dict[str, str]:
    """Read `event_id<TAB>description` lines."""
    captions = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{lineno}: expected event_id<TAB>description")
        event_id, text = line.split("\t", 1)
        captions[event_id.strip()] = text.strip()
    return captions


@dataclass
class VideoStats:
    video_id: str
    frames: int = 0
    events_found: int = 0
    triplets: int = 0
    discarded_short: int = 0
    discarded_uncaptioned: int = 0
    skipped_no_captions: bool = False


def discover_events(
    fixations: dict[int, tuple[np.ndarray, np.ndarray]],
    n_frames: int,
    cfg: DatasetConfig,
    rng: np.random.Generator,
) -> tuple[list[SalientEvent], list[np.ndarray]]:
    """Smooth each frame's fixations and track clusters into events.

    Returns the events and the per-frame smoothed ground-truth maps.
    """
    smoothed = []
    per_frame = []
    for f in range(n_frames):
        pts, w = fixations.get(f, (np.zeros((0, 2)), np.zeros(0)))
        gt = spherical_gaussian_smooth(pts, w, cfg.sigma_deg, cfg.gt_grid)
        smoothed.append(gt)
        per_frame.append(cluster_frame(gt, cfg, rng) if len(pts) else [])
    events = form_subvolumes(per_frame, np.deg2rad(cfg.match_radius_deg), cfg.gap_fill)
    return events, smoothed


def build_video(
    video_id: str,
    frame_files: list[str],
    fixations: dict[int, tuple[np.ndarray, np.ndarray]],
    captions: dict[str, str] | None,
    out_dir: Path,
    cfg: DatasetConfig,
) -> tuple[VideoStats, list[SalientEvent]]:
    stats = VideoStats(video_id=video_id, frames=len(frame_files))
    vid_hash = int.from_bytes(hashlib.sha256(video_id.encode()).digest()[:4], "little")
    rng = np.random.default_rng((cfg.seed, vid_hash))
    events, smoothed = discover_events(fixations, len(frame_files), cfg, rng)
    stats.events_found = len(events)
    if captions is None:
        stats.skipped_no_captions = True
        return stats, events

    for ev in events:
        if ev.span < cfg.window:
            stats.discarded_short += 1
            continue
        if ev.event_id not in captions:
            stats.discarded_uncaptioned += 1
            continue
        ev.description = captions[ev.event_id]
        ev_dir = out_dir / video_id / ev.event_id
        ev_dir.mkdir(parents=True, exist_ok=True)
        for start, frame_idx in window_shift_augment(ev, cfg.window):
            last = frame_idx[-1]
            gt_event = split_event_maps(smoothed[last], [ev.members[last]], cfg.dilate_deg)[0]
            stem = ev_dir / f"{start:05d}"
            (stem.parent / f"{stem.name}.frames.lst").write_text(
                "".join(frame_files[i] + "\n" for i in frame_idx)
            )
            (stem.parent / f"{stem.name}.text.txt").write_text(ev.description + "\n")
            pngio.write_gray(stem.parent / f"{stem.name}.gt.png", gt_event)
            stats.triplets += 1
    return stats, events


def build_dataset(videos_dir, fixations_dir, captions_dir, out_dir, cfg: DatasetConfig) -> str:
    """Run the full pipeline over a directory of videos; returns the manifest text.

    Expected inputs: `<videos>/<id>/*.png` frame images,
    `<fixations>/<id>.csv` fixation tracks, `<captions>/<id>.tsv` sidecars.
    """
    videos_dir, fixations_dir = Path(videos_dir), Path(fixations_dir)
    captions_dir, out_dir = Path(captions_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["# dataset manifest"]
    totals = {"events": 0, "triplets": 0, "skipped": 0}
    video_ids = sorted(p.name for p in videos_dir.iterdir() if p.is_dir())
    if not video_ids:
        raise ValueError(f"no video directories under {videos_dir}")
    for vid in video_ids:
        frame_files = sorted(str(p.relative_to(videos_dir)) for p in (videos_dir / vid).glob("*.png"))
        fix_path = fixations_dir / f"{vid}.csv"
        if not frame_files or not fix_path.exists():
            logger.warning("video %s: missing frames or fixations, skipped", vid)
            lines.append(f"video {vid}: SKIPPED (missing frames or fixations)")
            totals["skipped"] += 1
            continue
        cap_path = captions_dir / f"{vid}.tsv"
        captions = load_caption_sidecar(cap_path) if cap_path.exists() else None
        if captions is None:
            logger.warning("video %s: no caption sidecar, events listed but no triplets emitted", vid)
        stats, events = build_video(
            vid, frame_files, load_fixation_csv(fix_path), captions, out_dir, cfg
        )
        totals["events"] += stats.events_found
        totals["triplets"] += stats.triplets
        if stats.skipped_no_captions:
            totals["skipped"] += 1
        flag = " SKIPPED (no captions)" if stats.skipped_no_captions else ""
        lines.append(
            f"video {vid}: frames={stats.frames} events={stats.events_found} "
            f"triplets={stats.triplets} discarded_short={stats.discarded_short} "
            f"discarded_uncaptioned={stats.discarded_uncaptioned}{flag}"
        )
        for ev in events:
            lines.append(f"  event {vid}/{ev.event_id} span={ev.start}..{ev.end}")
    lines.append(
        f"total: videos={len(video_ids)} events={totals['events']} "
        f"triplets={totals['triplets']} skipped_videos={totals['skipped']}"
    )
    manifest = "\n".join(lines) + "\n"
    (out_dir / "manifest.txt").write_text(manifest)
    return manifest


def load_triplets(store_dir, videos_dir=None) -> list[EventTriplet]:
    """Read every triplet from a store written by build_dataset."""
    store = Path(store_dir)
    triplets = []
    for lst in sorted(store.glob("*/*/*.frames.lst")):
        stem = lst.name[: -len(".frames.lst")]
        event_dir = lst.parent
        video_id = event_dir.parent.name
        text = (event_dir / f"{stem}.text.txt").read_text().strip()
        gt = pngio.read_gray(event_dir / f"{stem}.gt.png")
        frames = [ln for ln in lst.read_text().splitlines() if ln]
        start = int(stem)
        triplets.append(
            EventTriplet(
                video_id=video_id,
                event_id=event_dir.name,
                window_start=start,
                frame_indices=list(range(start, start + len(frames))),
                frame_files=frames,
                text=text,
                gt_map=gt,
            )
        )
    return triplets
