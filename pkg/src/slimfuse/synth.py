"""Deterministic synthetic grounding benchmark.

Each scene renders colored geometric targets on a water-like background and
synthesizes radar returns at the target centroids plus Poisson clutter.
Prompts are template-rendered from structured predicates, so the referred
set is provably the set of targets satisfying the predicate. Distance and
motion predicates are unanswerable from the image alone by construction:
rendering depends only on category, color, size and position, never on
range or velocity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import TokenSeq, Vocabulary
from .nd import serialize
from .radar import Calibration, RadarPoint, rasterize, unproject

FORMAT_VERSION = 1

CATEGORIES = ("pier", "buoy", "sailor", "ship", "boat", "pleasureboat", "kayak", "rubbish")
COLORS = {
    "red": (0.85, 0.15, 0.10),
    "green": (0.10, 0.75, 0.20),
    "blue": (0.15, 0.30, 0.90),
    "yellow": (0.90, 0.85, 0.10),
    "white": (0.92, 0.92, 0.92),
    "orange": (0.95, 0.55, 0.10),
}
SIZES = ("small", "medium", "large")

# category -> (shape, aspect w/h); rendering identity is purely visual
SHAPES = {
    "pier": ("rect", 0.45),
    "buoy": ("circle", 1.0),
    "sailor": ("triangle", 0.8),
    "ship": ("rect", 2.2),
    "boat": ("rect", 1.6),
    "pleasureboat": ("rect", 1.2),
    "kayak": ("rect", 3.0),
    "rubbish": ("circle", 1.0),
}

RANGE_THRESHOLDS = (10.0, 20.0, 40.0)
COUNT_WORDS = {1: "one", 2: "two", 3: "three", 4: "four"}


def build_vocabulary() -> Vocabulary:
    words = ["the", "all", "targets", "within", "beyond", "meters", "approaching",
             "receding", "nearest", "and"]
    words += [f"{int(t)}" for t in RANGE_THRESHOLDS]
    words += list(COUNT_WORDS.values())
    words += [c + "s" for c in CATEGORIES] + list(CATEGORIES)
    words += list(COLORS) + list(SIZES)
    return Vocabulary(words)


@dataclass
class SynthConfig:
    image_size: int = 160
    target_count: tuple = (2, 5)
    clutter_rate: float = 0.3
    radar_dependent_fraction: float = 0.5
    range_bounds: tuple = (4.0, 55.0)
    range_max: float = 60.0
    velocity_max: float = 5.0
    power_max: float = 30.0
    clutter_power_max: float = 14.0
    dilation: int = 2
    noise: float = 0.02
    categories: tuple = CATEGORIES
    size_fractions: tuple = (0.11, 0.17, 0.25)  # small/medium/large vs image side
    range_thresholds: tuple = RANGE_THRESHOLDS
    radar_kinds: tuple = ("range_lt", "range_gt", "motion", "nearest")
    nearest_k_max: int = 3
    max_referred: int = 15
    splits: tuple = (0.80, 0.05, 0.15)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in self.__dict__.items()}

    @staticmethod
    def from_dict(d: dict) -> "SynthConfig":
        cfg = SynthConfig()
        for k, v in d.items():
            cur = getattr(cfg, k)
            setattr(cfg, k, tuple(v) if isinstance(cur, tuple) else v)
        return cfg

    def size_px(self, size_class: str) -> float:
        rel = dict(zip(SIZES, self.size_fractions))[size_class]
        return rel * self.image_size


@dataclass
class TargetSpec:
    category: str
    color: str
    size_class: str
    box: tuple          # (cx, cy, w, h) pixels
    polygon: list       # outline vertices, pixels
    range_m: float
    velocity: float     # m/s; negative approaching
    power: float        # dB


@dataclass
class PromptSpec:
    query_type: str     # exact-feature | partial-feature | number | category
    predicate: dict
    text: str
    referred_ids: list

    @property
    def radar_dependent(self) -> bool:
        return any(k in self.predicate for k in ("range_lt", "range_gt", "motion", "nearest_k"))


@dataclass
class SampleRecord:
    image: np.ndarray           # 3 x H x W float32 in [0, 1]
    radar_points: list          # RadarPoint, targets then clutter
    calibration: Calibration
    prompt: PromptSpec
    token_ids: list
    boxes: np.ndarray           # (G, 4) cx cy w h of referred targets
    mask: np.ndarray            # H x W float32 {0, 1}
    targets: list = field(default_factory=list)  # full TargetSpec provenance
    n_clutter: int = 0


def default_calibration(image_size: int) -> Calibration:
    f = image_size  # ~53 deg horizontal field of view
    c = image_size / 2.0
    k = np.array([[f, 0, c], [0, f, c], [0, 0, 1.0]])
    return Calibration(k, np.eye(4))


def predicate_matches(predicate: dict, target: TargetSpec) -> bool:
    """Attribute filters only; nearest_k is applied by referred_set."""
    if "category" in predicate and target.category != predicate["category"]:
        return False
    if "color" in predicate and target.color != predicate["color"]:
        return False
    if "size" in predicate and target.size_class != predicate["size"]:
        return False
    if "range_lt" in predicate and not target.range_m < predicate["range_lt"]:
        return False
    if "range_gt" in predicate and not target.range_m > predicate["range_gt"]:
        return False
    if "motion" in predicate:
        if predicate["motion"] == "approaching" and not target.velocity < 0:
            return False
        if predicate["motion"] == "receding" and not target.velocity > 0:
            return False
    return True


def referred_set(predicate: dict, targets: list) -> list:
    ids = [i for i, t in enumerate(targets) if predicate_matches(predicate, t)]
    if "nearest_k" in predicate:
        k = predicate["nearest_k"]
        if len(ids) < k:
            return []
        ids = sorted(ids, key=lambda i: targets[i].range_m)[:k]
    return ids


def render_prompt(predicate: dict) -> str:
    words = ["the"]
    if "nearest_k" in predicate:
        words.append(COUNT_WORDS[predicate["nearest_k"]])
        words.append("nearest")
    if "size" in predicate:
        words.append(predicate["size"])
    if "color" in predicate:
        words.append(predicate["color"])
    if "motion" in predicate:
        words.insert(1, predicate["motion"])
    words.append(predicate["category"] + "s" if "category" in predicate else "targets")
    if "range_lt" in predicate:
        words += ["within", f"{int(predicate['range_lt'])}", "meters"]
    if "range_gt" in predicate:
        words += ["beyond", f"{int(predicate['range_gt'])}", "meters"]
    return " ".join(words)


def classify_query(predicate: dict) -> str:
    if "nearest_k" in predicate:
        return "number"
    keys = set(predicate) - {"nearest_k"}
    if keys == {"category"}:
        return "category"
    if len(keys) == 1:
        return "partial-feature"
    return "exact-feature"


def _fill_shape(grid_x, grid_y, shape: str, cx, cy, w, h):
    if shape == "rect":
        return (np.abs(grid_x - cx) <= w / 2) & (np.abs(grid_y - cy) <= h / 2)
    if shape == "circle":
        return ((grid_x - cx) / (w / 2)) ** 2 + ((grid_y - cy) / (h / 2)) ** 2 <= 1.0
    if shape == "triangle":
        # apex up: inside if below the two slanted edges and above the base
        y_rel = (grid_y - (cy - h / 2)) / h
        halfwidth = (w / 2) * y_rel
        return (y_rel >= 0) & (y_rel <= 1) & (np.abs(grid_x - cx) <= halfwidth)
    raise ValueError(f"unknown shape {shape!r}")


def _polygon_of(shape: str, cx, cy, w, h):
    if shape == "rect":
        return [(cx - w / 2, cy - h / 2), (cx + w / 2, cy - h / 2),
                (cx + w / 2, cy + h / 2), (cx - w / 2, cy + h / 2)]
    if shape == "circle":
        return [(cx + w / 2 * math.cos(a), cy + h / 2 * math.sin(a))
                for a in np.linspace(0, 2 * math.pi, 12, endpoint=False)]
    return [(cx, cy - h / 2), (cx + w / 2, cy + h / 2), (cx - w / 2, cy + h / 2)]


def _sample_targets(rng: np.random.Generator, cfg: SynthConfig) -> list:
    n = int(rng.integers(cfg.target_count[0], cfg.target_count[1] + 1))
    targets = []
    boxes = []
    for _ in range(n):
        for _attempt in range(60):
            category = str(rng.choice(cfg.categories))
            color = str(rng.choice(list(COLORS)))
            size_class = str(rng.choice(SIZES))
            shape, aspect = SHAPES[category]
            base = cfg.size_px(size_class)
            w = base * math.sqrt(aspect)
            h = base / math.sqrt(aspect)
            margin = max(w, h) / 2 + 2
            cx = float(rng.uniform(margin, cfg.image_size - margin))
            cy = float(rng.uniform(margin, cfg.image_size - margin))
            box = (cx, cy, w, h)
            if all(_box_iou(box, b) < 0.10 for b in boxes):
                break
        else:
            continue
        boxes.append(box)
        approaching = rng.uniform() < 0.5
        speed = float(rng.uniform(0.5, cfg.velocity_max))
        power_base = {"small": 13.0, "medium": 19.0, "large": 25.0}[size_class]
        targets.append(TargetSpec(
            category=category, color=color, size_class=size_class, box=box,
            polygon=_polygon_of(shape, cx, cy, w, h),
            range_m=float(rng.uniform(*cfg.range_bounds)),
            velocity=-speed if approaching else speed,
            power=float(power_base + rng.uniform(-2.0, 2.0)),
        ))
    return targets


def _box_iou(a, b):
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    ix = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    iy = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = ix * iy
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def _render_image(rng: np.random.Generator, cfg: SynthConfig, targets: list) -> np.ndarray:
    s = cfg.image_size
    img = np.empty((3, s, s), dtype=np.float64)
    rows = np.linspace(0.0, 1.0, s)[None, :, None]
    img[0] = 0.06 + 0.04 * rows[0]
    img[1] = 0.10 + 0.05 * rows[0]
    img[2] = 0.16 + 0.06 * rows[0]
    img += rng.uniform(-cfg.noise, cfg.noise, size=img.shape)
    ys, xs = np.mgrid[0:s, 0:s]
    gx, gy = xs + 0.5, ys + 0.5
    for t in targets:
        shape, _ = SHAPES[t.category]
        inside = _fill_shape(gx, gy, shape, *t.box)
        rgb = COLORS[t.color]
        for c in range(3):
            img[c][inside] = rgb[c]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _sample_predicate(rng: np.random.Generator, cfg: SynthConfig, targets: list) -> dict:
    radar_side = rng.uniform() < cfg.radar_dependent_fraction
    predicate: dict = {}
    if radar_side:
        kind = rng.choice(list(cfg.radar_kinds))
        if kind == "range_lt":
            predicate["range_lt"] = float(rng.choice(cfg.range_thresholds))
        elif kind == "range_gt":
            predicate["range_gt"] = float(rng.choice(cfg.range_thresholds))
        elif kind == "motion":
            predicate["motion"] = str(rng.choice(["approaching", "receding"]))
        else:
            predicate["nearest_k"] = int(rng.integers(1, cfg.nearest_k_max + 1))
        if rng.uniform() < 0.35:  # optionally conjoin one visual attribute
            attr = rng.choice(["category", "color"])
            pool = sorted({getattr(t, "category" if attr == "category" else "color")
                           for t in targets})
            if pool:
                predicate[str(attr)] = str(rng.choice(pool))
    else:
        kind = rng.choice(["category", "color", "size", "pair"])
        pools = {
            "category": sorted({t.category for t in targets}),
            "color": sorted({t.color for t in targets}),
            "size": sorted({t.size_class for t in targets}),
        }
        if kind == "pair":
            for attr in rng.choice([["category", "color"], ["color", "size"]]):
                if pools[attr]:
                    predicate[attr] = str(rng.choice(pools[attr]))
        else:
            kind = str(kind)
            if pools[kind]:
                predicate[{"size": "size"}.get(kind, kind)] = str(rng.choice(pools[kind]))
    return predicate


class SceneError(RuntimeError):
    pass


def generate_scene(seed: int, cfg: SynthConfig, retries: int = 40) -> SampleRecord:
    """Deterministic in `seed`; regenerates on unsatisfiable predicates."""
    calib = default_calibration(cfg.image_size)
    vocab = build_vocabulary()
    for attempt in range(retries):
        rng = np.random.default_rng([seed, attempt])
        targets = _sample_targets(rng, cfg)
        if not targets:
            continue
        predicate = _sample_predicate(rng, cfg, targets)
        referred = referred_set(predicate, targets)
        if not 1 <= len(referred) <= cfg.max_referred:
            continue
        image = _render_image(rng, cfg, targets)

        points = []
        for t in targets:
            points.append(unproject(t.box[0], t.box[1], t.range_m, calib,
                                    velocity=t.velocity, power=t.power))
        rate = cfg.clutter_rate
        n_clutter = int(rng.poisson(len(targets) * rate / max(1e-9, 1.0 - rate))) if rate else 0
        for _ in range(n_clutter):
            u = float(rng.uniform(0, cfg.image_size - 1e-6))
            v = float(rng.uniform(0, cfg.image_size - 1e-6))
            points.append(unproject(u, v, float(rng.uniform(2.0, cfg.range_max)), calib,
                                    velocity=float(rng.uniform(-cfg.velocity_max,
                                                               cfg.velocity_max)),
                                    power=float(rng.uniform(0.0, cfg.clutter_power_max))))

        s = cfg.image_size
        ys, xs = np.mgrid[0:s, 0:s]
        mask = np.zeros((s, s), dtype=bool)
        for i in referred:
            t = targets[i]
            shape, _ = SHAPES[t.category]
            mask |= _fill_shape(xs + 0.5, ys + 0.5, shape, *t.box)

        text = render_prompt(predicate)
        prompt = PromptSpec(
            query_type=classify_query(predicate), predicate=predicate,
            text=text, referred_ids=list(referred))
        return SampleRecord(
            image=image, radar_points=points, calibration=calib, prompt=prompt,
            token_ids=vocab.encode_text(text),
            boxes=np.array([targets[i].box for i in referred], dtype=np.float64),
            mask=mask.astype(np.float32), targets=targets, n_clutter=n_clutter)
    raise SceneError(f"no satisfiable scene for seed {seed} after {retries} attempts")


def rvp_input(record: SampleRecord, cfg: SynthConfig, channel_subset: str = "RVP",
              normalize: bool = True) -> np.ndarray:
    """Rasterize and normalize the radar input for the model.

    Channels scale by the configured sensor ranges (range/range_max,
    velocity/velocity_max, power/power_max) so empty pixels stay exactly 0.
    Channels outside the subset are zeroed.
    """
    s = record.image.shape[-1]
    rvp = rasterize(record.radar_points, record.calibration, s, s, dilation=cfg.dilation)
    out = rvp.channels.copy()
    if normalize:
        out[0] /= cfg.range_max
        out[1] /= cfg.velocity_max
        out[2] /= cfg.power_max
    subset = channel_subset.upper()
    for i, name in enumerate("RVP"):
        if name not in subset:
            out[i] = 0.0
    return out.astype(np.float32)


# -- on-disk dataset ----------------------------------------------------------


def write_dataset(records, path, cfg: SynthConfig, seed: int = 0) -> None:
    path = Path(path)
    (path / "samples").mkdir(parents=True, exist_ok=True)
    vocab = build_vocabulary()
    vocab.save(path / "vocab.txt")
    n = len(records)
    n_train = int(round(cfg.splits[0] * n))
    n_val = int(round(cfg.splits[1] * n))
    manifest = {
        "format_version": FORMAT_VERSION,
        "count": n,
        "seed": seed,
        "splits": {"train": [0, n_train], "val": [n_train, n_train + n_val],
                   "test": [n_train + n_val, n]},
        "config": cfg.to_dict(),
    }
    with open(path / "prompts.jsonl", "w") as pf:
        for i, rec in enumerate(records):
            with open(path / "samples" / f"{i:06d}.bin", "wb") as f:
                serialize.write_array(f, rec.image)
                pts = np.array([[p.x, p.y, p.z, p.v, p.p] for p in rec.radar_points],
                               dtype=np.float64).reshape(-1, 5)
                serialize.write_array(f, pts)
                serialize.write_array(f, rec.calibration.intrinsic)
                serialize.write_array(f, rec.calibration.extrinsic)
                serialize.write_array(f, rec.boxes)
                serialize.write_array(f, rec.mask)
            pf.write(json.dumps({
                "id": i, "tokens": list(map(int, rec.token_ids)), "text": rec.prompt.text,
                "predicate": rec.prompt.predicate, "referred": rec.prompt.referred_ids,
                "query_type": rec.prompt.query_type,
                "radar_dependent": rec.prompt.radar_dependent,
                "n_clutter": rec.n_clutter,
            }) + "\n")
    with open(path / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)


def read_dataset(path):
    """Returns (records, manifest). Any directory matching the format loads."""
    path = Path(path)
    with open(path / "manifest.json") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise serialize.FormatError(
            f"unsupported dataset format_version {manifest.get('format_version')}")
    prompts = [json.loads(line) for line in open(path / "prompts.jsonl")]
    records = []
    for meta in prompts:
        i = meta["id"]
        with open(path / "samples" / f"{i:06d}.bin", "rb") as f:
            image = serialize.read_array(f, np.float32)
            pts = serialize.read_array(f, np.float64)
            intrinsic = serialize.read_array(f, np.float64)
            extrinsic = serialize.read_array(f, np.float64)
            boxes = serialize.read_array(f, np.float64)
            mask = serialize.read_array(f, np.float32)
        calib = Calibration(intrinsic, extrinsic)
        prompt = PromptSpec(meta["query_type"], meta["predicate"], meta["text"],
                            meta["referred"])
        records.append(SampleRecord(
            image=image, radar_points=[RadarPoint(*row) for row in pts],
            calibration=calib, prompt=prompt, token_ids=meta["tokens"],
            boxes=boxes, mask=mask, n_clutter=meta.get("n_clutter", 0)))
    return records, manifest


def generate_dataset(out_dir, count: int, seed: int, cfg: SynthConfig | None = None,
                     workers: int = 1):
    cfg = cfg or SynthConfig()
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(lambda i: generate_scene(seed + i, cfg), range(count)))
    else:
        records = [generate_scene(seed + i, cfg) for i in range(count)]
    write_dataset(records, out_dir, cfg, seed=seed)
    return records


def split_indices(manifest: dict, split: str) -> range:
    lo, hi = manifest["splits"][split]
    return range(lo, hi)


def tokens_for(record: SampleRecord, max_len: int) -> TokenSeq:
    return TokenSeq.from_ids(record.token_ids, max_len)
