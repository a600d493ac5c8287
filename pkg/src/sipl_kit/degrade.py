"""Procedural clean images plus parameterized synthetic degradations.

Everything here is dataset plumbing: clean images are layered gradients,
shapes and band-limited texture (no external data), and the five degradation
families (noise, haze, rain, snow, lowlight) can be stacked in any listed
order to form composite tasks. A corpus is a directory of PNG pairs plus a
line-delimited manifest that records enough to regenerate every sample.

All randomness comes from explicit integer seeds, one per sample, so corpus
generation is order-independent and bit-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.ndimage import convolve, gaussian_filter

from .errors import ConfigError, DataError, UnknownKind
from .substrate import derive_seed

KINDS = ("noise", "haze", "rain", "snow", "lowlight")
SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# specs

@dataclass(frozen=True)
class DegradationSpec:
    """An ordered recipe of degradation kinds, their parameters, and a seed.

    The listed order of ``kinds`` is the applied order.
    """
    kinds: tuple
    params: dict
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        validate_kinds(self.kinds, self.params)

    def with_seed(self, seed: int) -> "DegradationSpec":
        return DegradationSpec(self.kinds, self.params, seed)

    def to_record(self) -> dict:
        return {"kinds": list(self.kinds),
                "params": {k: dict(v) for k, v in self.params.items()},
                "seed": self.seed}

    @classmethod
    def from_record(cls, rec: dict) -> "DegradationSpec":
        return cls(tuple(rec["kinds"]), rec["params"], rec["seed"])


def validate_kinds(kinds, params) -> None:
    if len(kinds) == 0:
        raise ConfigError("a degradation spec needs at least one kind")
    for k in kinds:
        if k not in KINDS:
            raise UnknownKind(f"unknown degradation kind {k!r}; valid: {KINDS}")
        if k not in params:
            raise ConfigError(f"missing parameters for kind {k!r}")
    if len(set(kinds)) != len(kinds):
        raise ConfigError(f"duplicate kinds in {kinds}")


@dataclass
class SamplePair:
    clean: np.ndarray
    degraded: np.ndarray
    spec: DegradationSpec
    task_id: int


# ---------------------------------------------------------------------------
# clean-image synthesis

def _linear_gradient(rng, h, w):
    theta = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ramp = (np.cos(theta) * yy / max(h - 1, 1) + np.sin(theta) * xx / max(w - 1, 1))
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12)
    c0 = rng.uniform(0.05, 0.95, size=3)
    c1 = rng.uniform(0.05, 0.95, size=3)
    return ramp[..., None] * c1 + (1.0 - ramp[..., None]) * c0


def _paint_shapes(rng, img):
    h, w, _ = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    n_shapes = int(rng.integers(4, 10))
    for _ in range(n_shapes):
        color = rng.uniform(0.0, 1.0, size=3)
        opacity = rng.uniform(0.5, 1.0)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry = rng.uniform(0.08, 0.35) * h
        rx = rng.uniform(0.08, 0.35) * w
        if rng.random() < 0.5:
            mask = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1.0
        else:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        a = gaussian_filter(mask.astype(np.float64), sigma=0.8) * opacity
        img = img * (1.0 - a[..., None]) + color * a[..., None]
    return img


def _texture(rng, h, w, amplitude):
    g = rng.standard_normal((h, w, 3))
    tex = gaussian_filter(g, sigma=(1.5, 1.5, 0.0))
    tex = tex - gaussian_filter(tex, sigma=(6.0, 6.0, 0.0))  # band-limit
    return amplitude * tex


def gen_clean(seed: int, h: int, w: int) -> np.ndarray:
    """Procedural clean image: gradient base, random shapes, mild texture.

    Deterministic in ``seed``. Per-image pixel std is kept >= 0.05 by
    re-rolling the texture amplitude, so PSNR against it stays meaningful.
    """
    if h < 16 or w < 16:
        raise ConfigError(f"image must be at least 16x16, got {h}x{w}")
    rng = np.random.default_rng(seed)
    base = _paint_shapes(rng, _linear_gradient(rng, h, w))
    amplitude = 0.04
    for _ in range(16):
        img = np.clip(base + _texture(rng, h, w, amplitude), 0.0, 1.0)
        if img.std() >= 0.05:
            return img.astype(np.float32)
        amplitude *= 1.8
    raise DataError(f"could not reach pixel std 0.05 for seed {seed}")


# ---------------------------------------------------------------------------
# degradations (each takes and returns a [0,1] float image)

def _apply_noise(img, rng, p):
    n = rng.standard_normal(img.shape) * (float(p["sigma"]) / 255.0)
    return img + n


def _smooth_depth(rng, h, w):
    d = gaussian_filter(rng.standard_normal((h, w)), sigma=min(h, w) / 4.0)
    lo, hi = d.min(), d.max()
    if hi - lo < 1e-12:
        return np.zeros((h, w))
    return (d - lo) / (hi - lo)


def _apply_haze(img, rng, p):
    beta, airlight = float(p["beta"]), float(p["airlight"])
    h, w, _ = img.shape
    depth = _smooth_depth(rng, h, w)
    if beta == 0.0:
        return img
    t = np.exp(-beta * depth)[..., None]
    return img * t + airlight * (1.0 - t)


def _line_kernel(length, angle_deg):
    """Normalized motion-blur kernel: a line of given length at angle_deg
    from vertical (0 = straight down, positive tilts toward +x)."""
    k = np.zeros((length, length))
    c = (length - 1) / 2.0
    a = np.deg2rad(angle_deg)
    dy, dx = np.cos(a), np.sin(a)
    for s in np.linspace(-c, c, 4 * length):
        y, x = c + s * dy, c + s * dx
        y0, x0 = int(np.floor(y)), int(np.floor(x))
        fy, fx = y - y0, x - x0
        for oy, wy in ((0, 1 - fy), (1, fy)):
            for ox, wx in ((0, 1 - fx), (1, fx)):
                yi, xi = y0 + oy, x0 + ox
                if 0 <= yi < length and 0 <= xi < length:
                    k[yi, xi] += wy * wx
    return k / k.sum()


def _apply_rain(img, rng, p):
    count = int(p["streak_count"])
    angle = float(p["angle_deg"]) + rng.uniform(-15.0, 15.0)
    intensity = float(p["streak_intensity"])
    h, w, _ = img.shape
    layer = np.zeros((h, w))
    a = np.deg2rad(angle)
    dy, dx = np.cos(a), np.sin(a)
    for _ in range(count):
        y0, x0 = rng.uniform(0, h), rng.uniform(0, w)
        length = rng.uniform(6.0, 14.0)
        amp = rng.uniform(0.5, 1.0)
        for s in np.arange(0.0, length, 0.5):
            yi, xi = int(round(y0 + s * dy)), int(round(x0 + s * dx))
            if 0 <= yi < h and 0 <= xi < w:
                layer[yi, xi] = max(layer[yi, xi], amp)
    layer = convolve(layer, _line_kernel(7, angle), mode="constant")
    alpha = np.clip(layer, 0.0, 1.0)[..., None] * intensity
    return img * (1.0 - alpha) + 1.0 * alpha


def _apply_snow(img, rng, p):
    count = int(p["flake_count"])
    r_max = int(p["flake_radius_px"])
    intensity = float(p["intensity"])
    h, w, _ = img.shape
    out = img.astype(np.float64).copy()
    for _ in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = int(rng.integers(1, r_max + 1))
        bright = rng.uniform(0.7, 1.0)
        y0, y1 = max(0, int(cy) - r), min(h, int(cy) + r + 1)
        x0, x1 = max(0, int(cx) - r), min(w, int(cx) + r + 1)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
        disc = ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r
        a = disc[..., None] * intensity
        out[y0:y1, x0:x1] = out[y0:y1, x0:x1] * (1.0 - a) + bright * a
    return out


def _apply_lowlight(img, rng, p):
    gamma, scale = float(p["gamma"]), float(p["scale"])
    if gamma == 1.0 and scale == 1.0:
        return img
    return np.power(np.clip(img * scale, 0.0, 1.0), gamma)


_APPLIERS = {"noise": _apply_noise, "haze": _apply_haze, "rain": _apply_rain,
             "snow": _apply_snow, "lowlight": _apply_lowlight}


def apply_degradation(clean: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Apply the spec's kinds in listed order; output clipped to [0,1].

    Each stage is clipped before the next so every intermediate is a valid
    image (noise saturates, rain cannot overshoot into the gamma curve).
    Deterministic in spec.seed.
    """
    validate_kinds(spec.kinds, spec.params)
    rng = np.random.default_rng(spec.seed)
    img = clean.astype(np.float64)
    for kind in spec.kinds:
        img = np.clip(_APPLIERS[kind](img, rng, spec.params[kind]), 0.0, 1.0)
    return img.astype(np.float32)


# ---------------------------------------------------------------------------
# task templates

@dataclass(frozen=True)
class TaskTemplate:
    name: str
    kinds: tuple
    params: dict

    def spec(self, seed: int) -> DegradationSpec:
        return DegradationSpec(self.kinds, self.params, seed)


_P = {
    "noise": {"sigma": 25.0},
    "haze": {"beta": 1.2, "airlight": 0.9},
    "rain": {"streak_count": 90, "angle_deg": 45.0, "streak_intensity": 0.6},
    "snow": {"flake_count": 80, "flake_radius_px": 3, "intensity": 0.7},
    "lowlight": {"gamma": 2.2, "scale": 0.35},
}


def _template(name, kinds):
    return TaskTemplate(name, tuple(kinds), {k: dict(_P[k]) for k in kinds})


def cdd11_templates() -> list:
    """The 11-task composite taxonomy, in canonical order.

    Names follow the l/h/r/s shorthand; within a composite the kinds are
    applied weather-first (rain/snow), then haze, then lowlight, which is the
    physically sensible stacking for a camera pipeline.
    """
    return [
        _template("l", ["lowlight"]),
        _template("h", ["haze"]),
        _template("r", ["rain"]),
        _template("s", ["snow"]),
        _template("l+h", ["haze", "lowlight"]),
        _template("l+r", ["rain", "lowlight"]),
        _template("l+s", ["snow", "lowlight"]),
        _template("h+r", ["rain", "haze"]),
        _template("h+s", ["snow", "haze"]),
        _template("l+h+r", ["rain", "haze", "lowlight"]),
        _template("l+h+s", ["snow", "haze", "lowlight"]),
    ]


def desk_templates() -> list:
    """Two visually distinct tasks small enough for the acceptance runs."""
    return [_template("noise25", ["noise"]), _template("rain", ["rain"])]


def ood_template() -> TaskTemplate:
    """Held-out composite (rain, then noise) used only for the OOD study."""
    return _template("rain+noise", ["rain", "noise"])


TEMPLATE_SETS = {"cdd11": cdd11_templates, "desk": desk_templates}


# ---------------------------------------------------------------------------
# PNG + manifest I/O

def save_png(img: np.ndarray, path: str) -> None:
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


@dataclass
class CorpusManifest:
    root: str
    meta: dict
    records: list = field(default_factory=list)

    def by_split(self, split: str) -> list:
        if split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
        return [r for r in self.records if r["split"] == split]

    def load_pair(self, rec: dict) -> SamplePair:
        clean = load_png(os.path.join(self.root, rec["path_clean"]))
        degraded = load_png(os.path.join(self.root, rec["path_degraded"]))
        spec = DegradationSpec(tuple(rec["kinds"]), rec["params"], rec["seed"])
        return SamplePair(clean, degraded, spec, rec["task_id"])

    def iter_pairs(self, split: str):
        for rec in self.by_split(split):
            yield self.load_pair(rec)

    @property
    def task_names(self) -> list:
        return list(self.meta["tasks"])

    def save(self) -> None:
        with open(os.path.join(self.root, "manifest.jsonl"), "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        with open(os.path.join(self.root, "meta.json"), "w", encoding="utf-8") as fh:
            json.dump(self.meta, fh, sort_keys=True, indent=2)

    @classmethod
    def load(cls, root: str) -> "CorpusManifest":
        manifest_path = os.path.join(root, "manifest.jsonl")
        if not os.path.exists(manifest_path):
            raise DataError(f"no manifest.jsonl under {root}")
        with open(manifest_path, encoding="utf-8") as fh:
            records = [json.loads(line) for line in fh if line.strip()]
        with open(os.path.join(root, "meta.json"), encoding="utf-8") as fh:
            meta = json.load(fh)
        return cls(root=root, meta=meta, records=records)

    def corpus_hash(self) -> str:
        """sha256 over the manifest plus every referenced PNG, record order."""
        h = hashlib.sha256()
        for rec in self.records:
            h.update(json.dumps(rec, sort_keys=True).encode())
            for key in ("path_clean", "path_degraded"):
                with open(os.path.join(self.root, rec[key]), "rb") as fh:
                    h.update(fh.read())
        return h.hexdigest()


def _split_counts(n: int, fracs: tuple) -> dict:
    n_train = int(np.floor(n * fracs[0]))
    n_val = int(np.floor(n * fracs[1]))
    return {"train": n_train, "val": n_val, "test": n - n_train - n_val}


def build_corpus(out_dir: str, task_list: list, n_per_task: int, split_seed: int,
                 img_hw: tuple = (64, 64), split_fracs: tuple = (0.8, 0.1, 0.1)) -> CorpusManifest:
    """Generate PNG pairs for every task and write manifest.jsonl + meta.json.

    Every sample's randomness derives from its own derived seed (root seed
    plus a task/split/index stream name), so splits are disjoint by
    construction and regeneration is byte-identical.
    """
    if not task_list:
        raise ConfigError("task_list must be non-empty")
    if abs(sum(split_fracs) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {split_fracs}")
    h, w = img_hw
    os.makedirs(out_dir, exist_ok=True)
    counts = _split_counts(n_per_task, split_fracs)
    meta = {
        "format_version": 1,
        "img_h": h, "img_w": w,
        "n_per_task": n_per_task,
        "split_seed": split_seed,
        "split_counts": counts,
        "tasks": [t.name for t in task_list],
    }
    manifest = CorpusManifest(root=out_dir, meta=meta)
    for task_id, template in enumerate(task_list):
        task_dir = os.path.join(out_dir, template.name.replace("+", "_"))
        os.makedirs(task_dir, exist_ok=True)
        for split in SPLITS:
            for i in range(counts[split]):
                tag = f"{template.name}:{split}:{i}"
                clean = gen_clean(derive_seed(split_seed, "corpus:clean:" + tag), h, w)
                spec = template.spec(derive_seed(split_seed, "corpus:spec:" + tag))
                degraded = apply_degradation(clean, spec)
                rel_clean = os.path.join(os.path.basename(task_dir), f"{split}_{i:04d}_clean.png")
                rel_deg = os.path.join(os.path.basename(task_dir), f"{split}_{i:04d}_deg.png")
                save_png(clean, os.path.join(out_dir, rel_clean))
                save_png(degraded, os.path.join(out_dir, rel_deg))
                manifest.records.append({
                    "path_clean": rel_clean,
                    "path_degraded": rel_deg,
                    "task": template.name,
                    "task_id": task_id,
                    "kinds": list(spec.kinds),
                    "params": spec.params,
                    "seed": spec.seed,
                    "split": split,
                })
    manifest.save()
    return manifest
