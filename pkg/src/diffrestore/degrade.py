"""Seeded synthetic degradation: HQ crops to x4-downscaled LQ counterparts.

Each pair is produced by a serialized recipe (blur, resize, noise, jpeg, in
one or two rounds) followed by a fixed bicubic downscale.  Recipes plus a
64-bit seed replay byte-identically, which is the backbone of the dataset
manifest: anyone holding (hq.png, recipe, seed) can regenerate lq.png.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import cv2
import numpy as np

STAGE_KINDS = ("gaussian_blur", "resize", "gaussian_noise", "poisson_noise", "jpeg")

RESIZE_RANGE = (0.15, 1.5)
NOISE_SIGMA_MAX = 50.0 / 255.0
JPEG_RANGE = (30, 95)


@dataclass(frozen=True)
class Stage:
    kind: str
    params: dict

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise ValueError(f"unknown stage kind {self.kind!r}")
        p = self.params
        if self.kind == "gaussian_blur" and p["sigma"] < 0:
            raise ValueError("blur sigma must be >= 0")
        if self.kind == "resize" and not RESIZE_RANGE[0] <= p["scale"] <= RESIZE_RANGE[1]:
            raise ValueError(f"resize scale {p['scale']} outside {RESIZE_RANGE}")
        if self.kind == "gaussian_noise" and not 0.0 <= p["sigma"] <= NOISE_SIGMA_MAX:
            raise ValueError(f"noise sigma {p['sigma']} outside [0, {NOISE_SIGMA_MAX}]")
        if self.kind == "poisson_noise" and p["scale"] <= 0:
            raise ValueError("poisson scale must be positive")
        if self.kind == "jpeg" and not JPEG_RANGE[0] <= p["quality"] <= JPEG_RANGE[1]:
            raise ValueError(f"jpeg quality {p['quality']} outside {JPEG_RANGE}")


@dataclass(frozen=True)
class DegradationRecipe:
    stages: tuple
    orders: int = 1
    final_scale: int = 4

    def __post_init__(self):
        if self.orders not in (1, 2):
            raise ValueError("orders must be 1 or 2")
        if self.final_scale < 1:
            raise ValueError("final_scale must be >= 1")
        object.__setattr__(self, "stages", tuple(
            s if isinstance(s, Stage) else Stage(**s) for s in self.stages))

    def to_dict(self) -> dict:
        return {"stages": [dataclasses.asdict(s) for s in self.stages],
                "orders": self.orders, "final_scale": self.final_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationRecipe":
        return cls(stages=tuple(Stage(**s) for s in d["stages"]),
                   orders=d["orders"], final_scale=d["final_scale"])


@dataclass
class PairRecord:
    hq_path: str
    lq_path: str
    recipe: DegradationRecipe
    seed: int

    def to_json(self) -> str:
        return json.dumps({"hq_path": self.hq_path, "lq_path": self.lq_path,
                           "recipe": self.recipe.to_dict(), "seed": self.seed})

    @classmethod
    def from_json(cls, line: str) -> "PairRecord":
        d = json.loads(line)
        return cls(hq_path=d["hq_path"], lq_path=d["lq_path"],
                   recipe=DegradationRecipe.from_dict(d["recipe"]),
                   seed=int(d["seed"]))


@dataclass(frozen=True)
class DegradeConfig:
    blur_sigma: tuple = (0.2, 3.0)
    resize_scale: tuple = RESIZE_RANGE
    noise_sigma: tuple = (0.0, NOISE_SIGMA_MAX)
    poisson_scale: tuple = (0.05, 3.0)
    jpeg_quality: tuple = JPEG_RANGE
    gaussian_noise_prob: float = 0.5
    second_order_prob: float = 0.5
    final_scale: int = 4

    def __post_init__(self):
        for lo, hi, name in ((*self.blur_sigma, "blur_sigma"),
                             (*self.resize_scale, "resize_scale"),
                             (*self.noise_sigma, "noise_sigma"),
                             (*self.poisson_scale, "poisson_scale"),
                             (*self.jpeg_quality, "jpeg_quality")):
            if lo > hi:
                raise ValueError(f"{name} range is inverted")
        if self.blur_sigma[0] < 0:
            raise ValueError("blur sigma must be >= 0")
        if not (RESIZE_RANGE[0] <= self.resize_scale[0]
                and self.resize_scale[1] <= RESIZE_RANGE[1]):
            raise ValueError(f"resize_scale must lie within {RESIZE_RANGE}")
        if self.noise_sigma[0] < 0 or self.noise_sigma[1] > NOISE_SIGMA_MAX:
            raise ValueError(f"noise_sigma must lie within [0, {NOISE_SIGMA_MAX}]")
        if not (JPEG_RANGE[0] <= self.jpeg_quality[0]
                and self.jpeg_quality[1] <= JPEG_RANGE[1]):
            raise ValueError(f"jpeg_quality must lie within {JPEG_RANGE}")
        if not 0.0 <= self.gaussian_noise_prob <= 1.0:
            raise ValueError("gaussian_noise_prob must be a probability")
        if not 0.0 <= self.second_order_prob <= 1.0:
            raise ValueError("second_order_prob must be a probability")


def to_float(img_u8: np.ndarray) -> np.ndarray:
    return img_u8.astype(np.float32) / 255.0

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_image(path: str) -> np.ndarray:
    """PNG/JPEG file to float32 RGB in [0,1]."""
    bgr = cv2.imread(path, cv2.IMREAD_COLOR)
    if bgr is None:
        raise ValueError(f"could not read image {path!r}")
    return to_float(bgr[:, :, ::-1])

def save_image(path: str, img: np.ndarray) -> None:
    u8 = img if img.dtype == np.uint8 else to_uint8(img)
    if not cv2.imwrite(path, u8[:, :, ::-1]):
        raise ValueError(f"could not write image {path!r}")


def sample_recipe(rng: np.random.Generator,
                  config: DegradeConfig = DegradeConfig()) -> DegradationRecipe:
    """Draw one recipe; every parameter is uniform over its configured range."""
    orders = 2 if rng.random() < config.second_order_prob else 1
    stages = []
    for _ in range(orders):
        stages.append(Stage("gaussian_blur",
                            {"sigma": float(rng.uniform(*config.blur_sigma))}))
        stages.append(Stage("resize",
                            {"scale": float(rng.uniform(*config.resize_scale))}))
        if rng.random() < config.gaussian_noise_prob:
            stages.append(Stage("gaussian_noise",
                                {"sigma": float(rng.uniform(*config.noise_sigma))}))
        else:
            stages.append(Stage("poisson_noise",
                                {"scale": float(rng.uniform(*config.poisson_scale))}))
        stages.append(Stage("jpeg",
                            {"quality": int(rng.integers(config.jpeg_quality[0],
                                                         config.jpeg_quality[1] + 1))}))
    return DegradationRecipe(stages=tuple(stages), orders=orders,
                             final_scale=config.final_scale)


def _blur(img, sigma):
    if sigma <= 0:
        return img
    k = max(3, 2 * int(math.ceil(3.0 * sigma)) + 1)
    return cv2.GaussianBlur(img, (k, k), sigmaX=sigma, sigmaY=sigma)

def _resize(img, scale):
    side = max(4, int(round(img.shape[0] * scale)))
    return cv2.resize(img, (side, side), interpolation=cv2.INTER_CUBIC)

def _gaussian_noise(img, sigma, rng):
    noise = rng.normal(0.0, sigma, img.shape).astype(np.float32)
    return np.clip(img + noise, 0.0, 1.0)

def _poisson_noise(img, scale, rng):
    lam = np.clip(img, 0.0, 1.0).astype(np.float64) * 255.0 * scale
    out = rng.poisson(lam).astype(np.float32) / np.float32(255.0 * scale)
    return np.clip(out, 0.0, 1.0)

def _jpeg(img, quality):
    u8 = to_uint8(img)
    ok, buf = cv2.imencode(".jpg", u8[:, :, ::-1],
                           [cv2.IMWRITE_JPEG_QUALITY, int(quality)])
    if not ok:
        raise ValueError("jpeg encode failed")
    bgr = cv2.imdecode(buf, cv2.IMREAD_COLOR)
    return to_float(bgr[:, :, ::-1])


def apply_stage(img: np.ndarray, stage: Stage,
                rng: np.random.Generator) -> np.ndarray:
    if stage.kind == "gaussian_blur":
        return _blur(img, stage.params["sigma"])
    if stage.kind == "resize":
        return _resize(img, stage.params["scale"])
    if stage.kind == "gaussian_noise":
        return _gaussian_noise(img, stage.params["sigma"], rng)
    if stage.kind == "poisson_noise":
        return _poisson_noise(img, stage.params["scale"], rng)
    if stage.kind == "jpeg":
        return _jpeg(img, stage.params["quality"])
    raise ValueError(f"unknown stage kind {stage.kind!r}")


def apply_recipe(hq: np.ndarray, recipe: DegradationRecipe,
                 rng: np.random.Generator) -> np.ndarray:
    """Run all stages in order, then bicubic-downscale to side/final_scale."""
    h, w = hq.shape[:2]
    if h != w:
        raise ValueError(f"hq must be square, got {h}x{w}")
    if h % recipe.final_scale != 0:
        raise ValueError(f"hq side {h} not divisible by {recipe.final_scale}")
    img = np.clip(np.asarray(hq, dtype=np.float32), 0.0, 1.0)
    for stage in recipe.stages:
        img = apply_stage(img, stage, rng)
    out_side = h // recipe.final_scale
    img = cv2.resize(img, (out_side, out_side), interpolation=cv2.INTER_CUBIC)
    return np.clip(img, 0.0, 1.0)


def make_pair(hq_source: np.ndarray, crop: int, rng: np.random.Generator,
              config: DegradeConfig = DegradeConfig()):
    """Crop a patch, degrade it, and return (record, hq_u8, lq_u8).

    The LQ is computed from the quantized crop, so that replaying from the
    stored PNG reproduces it byte for byte.
    """
    h, w = hq_source.shape[:2]
    if h < crop or w < crop:
        raise ValueError(f"source {h}x{w} smaller than crop {crop}")
    y = int(rng.integers(0, h - crop + 1))
    x = int(rng.integers(0, w - crop + 1))
    hq_u8 = to_uint8(np.asarray(hq_source[y:y + crop, x:x + crop],
                                dtype=np.float32))
    recipe = sample_recipe(rng, config)
    seed = int(rng.integers(0, 2 ** 63, dtype=np.int64))
    lq = apply_recipe(to_float(hq_u8), recipe, np.random.default_rng(seed))
    record = PairRecord(hq_path="", lq_path="", recipe=recipe, seed=seed)
    return record, hq_u8, to_uint8(lq)


def replay_pair(record: PairRecord, root: str = "") -> np.ndarray:
    """Regenerate the LQ (uint8) from the stored HQ plus the record."""
    hq = load_image(os.path.join(root, record.hq_path))
    lq = apply_recipe(hq, record.recipe, np.random.default_rng(record.seed))
    return to_uint8(lq)


def build_dataset(sources: list, out_dir: str, n_pairs: int, crop: int,
                  seed: int, config: DegradeConfig = DegradeConfig()) -> list:
    """Write n_pairs (hq, lq) PNGs plus manifest.jsonl under out_dir.

    Pair i draws from an rng seeded by (seed, i), so datasets are reproducible
    and embarrassingly parallel.
    """
    if not sources:
        raise ValueError("no source images")
    os.makedirs(os.path.join(out_dir, "hq"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "lq"), exist_ok=True)
    records = []
    with open(os.path.join(out_dir, "manifest.jsonl"), "w") as manifest:
        for i in range(n_pairs):
            rng = np.random.default_rng([seed, i])
            src = sources[int(rng.integers(0, len(sources)))]
            record, hq_u8, lq_u8 = make_pair(src, crop, rng, config)
            record.hq_path = os.path.join("hq", f"{i:06d}.png")
            record.lq_path = os.path.join("lq", f"{i:06d}.png")
            save_image(os.path.join(out_dir, record.hq_path), hq_u8)
            save_image(os.path.join(out_dir, record.lq_path), lq_u8)
            manifest.write(record.to_json() + "\n")
            records.append(record)
    return records


def read_manifest(path: str) -> list:
    with open(path) as f:
        return [PairRecord.from_json(line) for line in f if line.strip()]
