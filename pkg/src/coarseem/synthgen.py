"""Procedural bird-like scenes with exact coarse labels, plus the on-disk format.

Label geometry uses only +, -, *, / and sqrt so that masks, parts and
keypoints are bit-identical across platforms.  The random stream is a
counter-based splitmix64 keyed on (seed, index, field tag).
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

PART_NAMES = ("torso", "head", "beak", "legs", "tail")
DATA_HEADER = "COARSEEM-DATA-1"
SPLITS = ("part", "coarse", "val", "test")

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class GenerationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# PRNG


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _tag_hash(tag: str) -> int:
    # FNV-1a, 64 bit
    h = 0xCBF29CE484222325
    for b in tag.encode():
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    return h


class SplitMix64:
    """Counter-based splitmix64 stream for one (seed, index, tag) triple."""

    def __init__(self, seed: int, index: int, tag: str):
        key = _mix64((seed * _GOLDEN) & _MASK64)
        key = _mix64(key ^ ((index + 1) * 0xD1B54A32D192ED03 & _MASK64))
        self.state = _mix64(key ^ _tag_hash(tag))
        self.counter = 0

    def next_u64(self) -> int:
        self.counter += 1
        return _mix64((self.state + self.counter * _GOLDEN) & _MASK64)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * (1.0 / (1 << 53)))

    def uniform_array(self, n: int) -> np.ndarray:
        ctr = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + ctr * np.uint64(_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


# ---------------------------------------------------------------------------
# config and sample containers


@dataclass(frozen=True)
class GenConfig:
    H: int = 32
    W: int = 32
    K: int = 5
    seed: int = 0
    heatmap_sigma: float = 1.5
    # torso, head, beak, legs, tail
    occlusion: tuple = (0.0, 0.0, 0.2, 0.2, 0.2)
    center_jitter: float = 2.0
    scale_range: tuple = (1.2, 1.45)
    tilt_range: float = 0.35
    color_jitter: float = 0.15
    texture_noise: float = 0.08
    background_noise: float = 0.15
    clutter_blobs: int = 0

    def __post_init__(self):
        if self.H % 8 or self.W % 8 or self.H < 8 or self.W < 8:
            raise ValueError("H and W must be positive multiples of 8")
        if not 2 <= self.K <= len(PART_NAMES):
            raise ValueError(f"K must lie in [2, {len(PART_NAMES)}]")
        if self.heatmap_sigma <= 0:
            raise ValueError("heatmap_sigma must be positive")
        if len(self.occlusion) < self.K:
            raise ValueError("need one occlusion probability per part")
        if any(not 0.0 <= p <= 1.0 for p in self.occlusion):
            raise ValueError("occlusion probabilities must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown generator keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass
class SynthSample:
    image: np.ndarray  # 3 x H x W in [0, 1]
    parts: np.ndarray | None  # H x W uint8, 0 = background
    mask: np.ndarray  # H x W uint8
    keypoints: np.ndarray  # K x 3 int32: row, col, visible
    heatmaps: np.ndarray  # K x H x W
    bbox: tuple  # ((r0, c0), (r1, c1))
    index: int = 0


# ---------------------------------------------------------------------------
# coarse labels as functions of the part map


def derive_mask(parts: np.ndarray) -> np.ndarray:
    return (np.asarray(parts) != 0).astype(np.uint8)


def derive_keypoints(parts: np.ndarray, K: int) -> np.ndarray:
    """Per-part centroid rounded to the nearest pixel, ties rounded down.

    Empty parts give an invisible keypoint at (0, 0).
    """
    parts = np.asarray(parts)
    kps = np.zeros((K, 3), dtype=np.int32)
    rows, cols = np.indices(parts.shape)
    for k in range(1, K + 1):
        sel = parts == k
        n = int(sel.sum())
        if n == 0:
            continue
        rsum, csum = int(rows[sel].sum()), int(cols[sel].sum())
        kps[k - 1] = (_round_half_down(rsum, n), _round_half_down(csum, n), 1)
    return kps


def _round_half_down(num: int, den: int) -> int:
    # exact integer arithmetic: ceil(num/den - 1/2) = ceil((2num - den) / 2den)
    return -((den - 2 * num) // (2 * den))


def derive_bbox(mask: np.ndarray) -> tuple:
    mask = np.asarray(mask)
    rr, cc = np.nonzero(mask)
    if rr.size == 0:
        raise ValueError("bounding box undefined for an empty mask")
    return (int(rr.min()), int(cc.min())), (int(rr.max()), int(cc.max()))


def bbox_as_keypoints(bbox: tuple) -> np.ndarray:
    """Top-left and bottom-right corners as two visible keypoints."""
    (r0, c0), (r1, c1) = bbox
    return np.array([[r0, c0, 1], [r1, c1, 1]], dtype=np.int32)


def render_heatmaps(keypoints: np.ndarray, H: int, W: int, sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    keypoints = np.asarray(keypoints)
    out = np.zeros((len(keypoints), H, W))
    rows = np.arange(H, dtype=np.float64)[:, None]
    cols = np.arange(W, dtype=np.float64)[None, :]
    denom = 2.0 * sigma * sigma
    for k, (r, c, vis) in enumerate(keypoints):
        if not vis:
            continue
        d2 = (rows - float(r)) ** 2 + (cols - float(c)) ** 2
        out[k] = np.exp(-d2 / denom)
    return out


# ---------------------------------------------------------------------------
# geometry


def _ellipse(rows, cols, cr, cc, ur, uc, a, b):
    dr, dc = rows - cr, cols - cc
    along = dr * ur + dc * uc
    across = -dr * uc + dc * ur
    return (along * along) / (a * a) + (across * across) / (b * b) <= 1.0


def _triangle(rows, cols, p0, p1, p2):
    def side(pa, pb):
        return (cols - pa[1]) * (pb[0] - pa[0]) - (rows - pa[0]) * (pb[1] - pa[1])

    s0, s1, s2 = side(p0, p1), side(p1, p2), side(p2, p0)
    return ((s0 >= 0) & (s1 >= 0) & (s2 >= 0)) | ((s0 <= 0) & (s1 <= 0) & (s2 <= 0))


def _segment(rows, cols, p0, p1, half_width):
    vr, vc = p1[0] - p0[0], p1[1] - p0[1]
    ll = vr * vr + vc * vc
    t = ((rows - p0[0]) * vr + (cols - p0[1]) * vc) / ll
    t = np.clip(t, 0.0, 1.0)
    dr = rows - (p0[0] + t * vr)
    dc = cols - (p0[1] + t * vc)
    return dr * dr + dc * dc <= half_width * half_width


def _draw_parts(cfg: GenConfig, rng: SplitMix64, occluded: list[bool]) -> np.ndarray:
    H, W = cfg.H, cfg.W
    rows, cols = np.indices((H, W)).astype(np.float64)
    unit = min(H, W) / 32.0
    s = rng.uniform(*cfg.scale_range) * unit
    facing = 1.0 if rng.uniform() < 0.5 else -1.0
    tilt = rng.uniform(-cfg.tilt_range, cfg.tilt_range)
    norm = np.sqrt(1.0 + tilt * tilt)
    ur, uc = tilt / norm, facing / norm  # body axis, pointing toward the head
    vr, vc = -facing * uc, facing * ur  # "up" perpendicular
    cr = (H - 1) / 2.0 + rng.uniform(-cfg.center_jitter, cfg.center_jitter) * unit + 1.0 * s
    cc = (W - 1) / 2.0 + rng.uniform(-cfg.center_jitter, cfg.center_jitter) * unit

    a = rng.uniform(6.0, 8.0) * s
    b = rng.uniform(3.5, 4.8) * s
    rh = rng.uniform(2.6, 3.4) * s
    hr = cr + ur * 0.8 * a + vr * 0.8 * b
    hc = cc + uc * 0.8 * a + vc * 0.8 * b
    beak_len = rng.uniform(2.5, 4.0) * s
    beak_w = rng.uniform(1.3, 1.9) * s
    leg_len = rng.uniform(4.0, 6.0) * s
    leg_off = rng.uniform(-0.3, 0.3) * a
    tail_a = rng.uniform(3.0, 4.2) * s
    tail_b = rng.uniform(1.4, 2.0) * s
    tail_lift = rng.uniform(-0.5, 1.0)

    parts = np.zeros((H, W), dtype=np.uint8)
    K = cfg.K

    def paint(k, region):
        if k <= K and not occluded[k - 1]:
            parts[region] = k

    # tail (5), legs (4), torso (1), head (2), beak (3); later parts overwrite
    tr = cr - ur * (a + 0.6 * tail_a) + vr * tail_lift * b * 0.5
    tc = cc - uc * (a + 0.6 * tail_a) + vc * tail_lift * b * 0.5
    paint(5, _ellipse(rows, cols, tr, tc, ur, uc, tail_a, tail_b))
    lr0 = cr - vr * 0.6 * b + ur * leg_off
    lc0 = cc - vc * 0.6 * b + uc * leg_off
    paint(4, _segment(rows, cols, (lr0, lc0), (lr0 + (b * 0.4 + leg_len), lc0), 1.1 * s))
    parts[_ellipse(rows, cols, cr, cc, ur, uc, a, b)] = 1
    paint(2, _ellipse(rows, cols, hr, hc, ur, uc, rh, rh))
    tip = (hr + ur * (rh + beak_len), hc + uc * (rh + beak_len))
    base0 = (hr + ur * 0.5 * rh + vr * beak_w, hc + uc * 0.5 * rh + vc * beak_w)
    base1 = (hr + ur * 0.5 * rh - vr * beak_w, hc + uc * 0.5 * rh - vc * beak_w)
    paint(3, _triangle(rows, cols, tip, base0, base1))
    return parts


def _render_image(cfg: GenConfig, parts: np.ndarray, index: int) -> np.ndarray:
    H, W = cfg.H, cfg.W
    col_rng = SplitMix64(cfg.seed, index, "color")
    noise_rng = SplitMix64(cfg.seed, index, "noise")
    rows, cols = np.indices((H, W)).astype(np.float64)

    bg = np.array([col_rng.uniform(0.2, 0.8) for _ in range(3)])
    img = np.empty((3, H, W))
    img[:] = bg[:, None, None]
    # low-frequency background shading
    gr, gc = col_rng.uniform(-0.2, 0.2), col_rng.uniform(-0.2, 0.2)
    img += (gr * (rows / H - 0.5) + gc * (cols / W - 0.5))[None]
    for _ in range(cfg.clutter_blobs):
        br, bc = col_rng.uniform(0, H - 1), col_rng.uniform(0, W - 1)
        ba, bb = col_rng.uniform(1.5, 5.0), col_rng.uniform(1.5, 5.0)
        color = np.array([col_rng.uniform() for _ in range(3)])
        blob = _ellipse(rows, cols, br, bc, 1.0, 0.0, ba, bb)
        img[:, blob] = color[:, None]
    img += cfg.background_noise * (noise_rng.uniform_array(3 * H * W).reshape(3, H, W) - 0.5)

    # body palette: torso and tail share a hue, head is a variation of it
    base = np.array([col_rng.uniform(0.1, 0.9) for _ in range(3)])
    j = cfg.color_jitter

    def jitter(c, amt):
        return np.clip(c + np.array([col_rng.uniform(-amt, amt) for _ in range(3)]), 0.0, 1.0)

    palette = {
        1: base,
        2: jitter(base, 2 * j),
        3: jitter(np.array([0.85, 0.7, 0.2]), j),
        4: jitter(np.array([0.35, 0.25, 0.2]), j),
        5: jitter(base, j),
    }
    texture = cfg.texture_noise * (noise_rng.uniform_array(3 * H * W).reshape(3, H, W) - 0.5)
    for k in range(1, cfg.K + 1):
        sel = parts == k
        if sel.any():
            img[:, sel] = palette[k][:, None] + texture[:, sel]
    return np.clip(img, 0.0, 1.0)


def _valid_layout(parts: np.ndarray, K: int) -> bool:
    if not (parts == 1).any():
        return False
    kps = derive_keypoints(parts, K)
    for k in range(K):
        r, c, vis = kps[k]
        if vis and parts[r, c] != k + 1:
            return False
    return True


def gen_sample(cfg: GenConfig, index: int, max_attempts: int = 10) -> SynthSample:
    """Deterministic sample for (cfg.seed, index)."""
    occ_rng = SplitMix64(cfg.seed, index, "occlusion")
    occluded = [occ_rng.uniform() < cfg.occlusion[k] for k in range(cfg.K)]
    for attempt in range(max_attempts):
        rng = SplitMix64(cfg.seed, index, f"pose/{attempt}")
        parts = _draw_parts(cfg, rng, occluded)
        if _valid_layout(parts, cfg.K):
            break
    else:
        raise GenerationError(f"sample {index}: no valid pose after {max_attempts} attempts")
    mask = derive_mask(parts)
    kps = derive_keypoints(parts, cfg.K)
    return SynthSample(
        image=_render_image(cfg, parts, index),
        parts=parts,
        mask=mask,
        keypoints=kps,
        heatmaps=render_heatmaps(kps, cfg.H, cfg.W, cfg.heatmap_sigma),
        bbox=derive_bbox(mask),
        index=index,
    )


# ---------------------------------------------------------------------------
# splits


@dataclass
class Split:
    """A batch of samples stored as stacked arrays."""

    images: np.ndarray  # N x 3 x H x W
    masks: np.ndarray  # N x H x W uint8
    keypoints: np.ndarray  # N x K x 3 int32
    heatmaps: np.ndarray  # N x K x H x W
    parts: np.ndarray | None = None  # N x H x W uint8
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.images)

    @property
    def K(self) -> int:
        return self.keypoints.shape[1]

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx)
        return Split(
            images=self.images[idx],
            masks=self.masks[idx],
            keypoints=self.keypoints[idx],
            heatmaps=self.heatmaps[idx],
            parts=None if self.parts is None else self.parts[idx],
            ids=self.ids[idx],
        )

    def without_parts(self) -> "Split":
        return Split(self.images, self.masks, self.keypoints, self.heatmaps, None, self.ids)

    def with_sigma(self, sigma: float) -> "Split":
        H, W = self.images.shape[2:]
        hm = np.stack([render_heatmaps(k, H, W, sigma) for k in self.keypoints]) if len(self) else self.heatmaps
        return Split(self.images, self.masks, self.keypoints, hm, self.parts, self.ids)


def split_ranges(n_part: int, n_coarse: int, n_val: int, n_test: int) -> dict[str, range]:
    counts = dict(part=n_part, coarse=n_coarse, val=n_val, test=n_test)
    out, start = {}, 0
    for name in SPLITS:
        out[name] = range(start, start + counts[name])
        start += counts[name]
    return out


def generate_split(cfg: GenConfig, indices, keep_parts: bool = True) -> Split:
    samples = [gen_sample(cfg, i) for i in indices]
    return _stack(samples, cfg, keep_parts)


def _stack(samples, cfg: GenConfig, keep_parts: bool) -> Split:
    H, W, K = cfg.H, cfg.W, cfg.K
    n = len(samples)
    return Split(
        images=np.stack([s.image for s in samples]) if n else np.zeros((0, 3, H, W)),
        masks=np.stack([s.mask for s in samples]) if n else np.zeros((0, H, W), np.uint8),
        keypoints=np.stack([s.keypoints for s in samples]) if n else np.zeros((0, K, 3), np.int32),
        heatmaps=np.stack([s.heatmaps for s in samples]) if n else np.zeros((0, K, H, W)),
        parts=(np.stack([s.parts for s in samples]) if n else np.zeros((0, H, W), np.uint8)) if keep_parts else None,
        ids=np.array([s.index for s in samples], dtype=np.int64),
    )


def generate_benchmark(cfg: GenConfig, n_part=40, n_coarse=1000, n_val=75, n_test=75) -> dict[str, Split]:
    """All four splits in memory; the coarse split carries no part labels."""
    ranges = split_ranges(n_part, n_coarse, n_val, n_test)
    return {name: generate_split(cfg, r, keep_parts=(name != "coarse")) for name, r in ranges.items()}


# ---------------------------------------------------------------------------
# on-disk format


def _write_split(split_dir: Path, samples: list[SynthSample], cfg: GenConfig, keep_parts: bool) -> None:
    split_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# {DATA_HEADER} H={cfg.H} W={cfg.W} K={cfg.K}"]
    offset = 0
    with open(split_dir / "data.bin", "wb") as fh:
        for s in samples:
            chunks = [("image", np.ascontiguousarray(s.image, dtype="<f8").tobytes())]
            if keep_parts:
                chunks.append(("parts", np.ascontiguousarray(s.parts, dtype=np.uint8).tobytes()))
            chunks.append(("mask", np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes()))
            kp = np.ascontiguousarray(s.keypoints[:, :2], dtype="<i4").tobytes()
            kp += np.ascontiguousarray(s.keypoints[:, 2], dtype=np.uint8).tobytes()
            chunks.append(("keypoints", kp))
            entries = []
            for name, data in chunks:
                entries.append(f"{name}@{offset}+{len(data)}")
                fh.write(data)
                offset += len(data)
            lines.append(f"{s.index} {' '.join(entries)}")
    (split_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def make_dataset(cfg: GenConfig, n_part_labelled=40, n_coarse=1000, n_val=75, n_test=75, out_dir="data") -> dict:
    """Write the four splits under ``out_dir``; return a manifest dict."""
    for n in (n_part_labelled, n_coarse, n_val, n_test):
        if n < 1:
            raise ValueError("all split counts must be >= 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"{out} is not writable")
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    ranges = split_ranges(n_part_labelled, n_coarse, n_val, n_test)
    manifest = {"config": cfg.to_dict(), "splits": {}}
    for name, r in ranges.items():
        samples = [gen_sample(cfg, i) for i in r]
        _write_split(out / name, samples, cfg, keep_parts=(name != "coarse"))
        manifest["splits"][name] = {"start": r.start, "count": len(r)}
    manifest["hash"] = corpus_hash(out)
    return manifest


def corpus_hash(root) -> str:
    h = hashlib.sha256()
    root = Path(root)
    for name in SPLITS:
        for fname in ("manifest.txt", "data.bin"):
            p = root / name / fname
            if p.exists():
                h.update(f"{name}/{fname}".encode())
                h.update(p.read_bytes())
    return h.hexdigest()


class DataFormatError(ValueError):
    pass


def load_split(split_dir, sigma: float = 1.5) -> Split:
    """Read one split; heatmaps are re-rendered with ``sigma``."""
    split_dir = Path(split_dir)
    lines = (split_dir / "manifest.txt").read_text().splitlines()
    blob = (split_dir / "data.bin").read_bytes()
    if not lines or not lines[0].startswith(f"# {DATA_HEADER}"):
        raise DataFormatError(f"{split_dir}: bad manifest header")
    meta = dict(tok.split("=") for tok in lines[0].split()[2:])
    H, W, K = int(meta["H"]), int(meta["W"]), int(meta["K"])
    ids, images, parts, masks, kps = [], [], [], [], []
    for line in lines[1:]:
        if not line.strip():
            continue
        toks = line.split()
        ids.append(int(toks[0]))
        entries = {}
        for tok in toks[1:]:
            name, rest = tok.split("@")
            off, n = rest.split("+")
            entries[name] = blob[int(off) : int(off) + int(n)]
        images.append(np.frombuffer(entries["image"], dtype="<f8").reshape(3, H, W).astype(np.float64))
        masks.append(np.frombuffer(entries["mask"], dtype=np.uint8).reshape(H, W).copy())
        if "parts" in entries:
            parts.append(np.frombuffer(entries["parts"], dtype=np.uint8).reshape(H, W).copy())
        raw = entries["keypoints"]
        rc = np.frombuffer(raw[: 8 * K], dtype="<i4").reshape(K, 2)
        vis = np.frombuffer(raw[8 * K : 9 * K], dtype=np.uint8)
        kps.append(np.concatenate([rc, vis[:, None].astype(np.int32)], axis=1).astype(np.int32))
    if parts and len(parts) != len(images):
        raise DataFormatError(f"{split_dir}: parts present for some samples only")
    kps_arr = np.stack(kps) if kps else np.zeros((0, K, 3), np.int32)
    return Split(
        images=np.stack(images) if images else np.zeros((0, 3, H, W)),
        masks=np.stack(masks) if masks else np.zeros((0, H, W), np.uint8),
        keypoints=kps_arr,
        heatmaps=np.stack([render_heatmaps(k, H, W, sigma) for k in kps_arr]) if kps else np.zeros((0, K, H, W)),
        parts=np.stack(parts) if parts else None,
        ids=np.array(ids, dtype=np.int64),
    )


def load_dataset(root, sigma: float = 1.5) -> dict[str, Split]:
    return {name: load_split(Path(root) / name, sigma) for name in SPLITS}
