"""Procedural generator of paired autofluorescence / H&E-appearance tiles,
plus the corruption operators that mimic histochemical staining artifacts.

Each tile is rendered from an explicit latent geometry (nucleus placements,
a low-frequency background field, a cytoplasm coverage field), all drawn
from a per-tile seed. The autofluorescence tile and the stained tile are
two deterministic renderings of the same latents, so the forward mapping
exists and is learnable, and the stored placement list doubles as the
oracle for the nuclei-count baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .arrayio import load_arrays, save_arrays
from .patches import Patch
from .seeding import seed_sequence, substream

GENERATOR_VERSION = "synth-tiles-1"

# Reference stain colors; repo constants, tuned so the blueness test in
# metrics.count_nuclei fires on nuclei and nothing else.
NUCLEUS_RGB = np.array([0.28, 0.24, 0.55])
CYTOPLASM_RGB = np.array([0.95, 0.70, 0.78])
BACKGROUND_RGB = np.array([0.97, 0.96, 0.97])

CORRUPTION_MODES = ("blur", "contrast_fade", "stain_washout")
BLUR_SIGMA_MAX = 3.0
FADE_STRENGTH = 0.85


class GeneratorError(ValueError):
    pass


@dataclass(frozen=True)
class TissueSpec:
    """Parameters of one synthetic tissue tile."""

    nuclei_count: int
    nuclei_radius_range: tuple
    background_texture_scale: float
    cytoplasm_density: float
    rng_seed: int

    def validate(self) -> "TissueSpec":
        rmin, rmax = self.nuclei_radius_range
        values = [float(rmin), float(rmax), float(self.background_texture_scale),
                  float(self.cytoplasm_density)]
        if not all(np.isfinite(v) for v in values):
            raise GeneratorError("tissue spec contains non-finite values")
        if self.nuclei_count < 0:
            raise GeneratorError("nuclei_count must be >= 0")
        if rmin > rmax or rmin <= 0:
            raise GeneratorError(f"bad radius range ({rmin}, {rmax})")
        if not 0.0 <= self.cytoplasm_density <= 1.0:
            raise GeneratorError("cytoplasm_density must be in [0, 1]")
        if self.background_texture_scale < 0.0:
            raise GeneratorError("background_texture_scale must be >= 0")
        return self


def _sinusoid_field(rng, size, n_waves, freq_lo, freq_hi):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size
    field = np.zeros((size, size))
    for _ in range(n_waves):
        freq = rng.uniform(freq_lo, freq_hi)
        angle = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        field += amp * np.sin(2.0 * np.pi * freq * (xs * np.cos(angle) + ys * np.sin(angle)) + phase)
    lo, hi = field.min(), field.max()
    if hi - lo < 1e-9:
        return np.zeros_like(field)
    return (field - lo) / (hi - lo)


def _place_nuclei(rng, spec: TissueSpec, size: int):
    """Sample non-overlapping nucleus placements (best effort)."""
    rmin, rmax = spec.nuclei_radius_range
    placements = []
    for _ in range(spec.nuclei_count):
        radius = float(rng.uniform(rmin, rmax))
        placed = False
        for _attempt in range(200):
            cx = float(rng.uniform(radius + 2.0, size - radius - 2.0))
            cy = float(rng.uniform(radius + 2.0, size - radius - 2.0))
            ok = True
            for other in placements:
                dist = np.hypot(cx - other["cx"], cy - other["cy"])
                if dist < radius + other["radius"] + 2.0:
                    ok = False
                    break
            if ok:
                placed = True
                break
        if not placed:
            # tile is crowded; keep the last candidate and let the count
            # tolerance in downstream checks absorb the merge
            pass
        placements.append(
            {
                "cx": cx,
                "cy": cy,
                "radius": radius,
                "eccentricity": float(rng.uniform(0.0, 0.35)),
                "theta": float(rng.uniform(0.0, np.pi)),
                "amplitude": float(rng.uniform(0.78, 1.0)),
            }
        )
    return placements


def _nuclei_field(placements, size: int) -> np.ndarray:
    field = np.zeros((size, size))
    for p in placements:
        ra = p["radius"] * (1.0 + p["eccentricity"])
        rb = p["radius"] / (1.0 + p["eccentricity"])
        support = int(np.ceil(1.8 * ra)) + 1
        x0 = max(0, int(p["cx"]) - support)
        x1 = min(size, int(p["cx"]) + support + 1)
        y0 = max(0, int(p["cy"]) - support)
        y1 = min(size, int(p["cy"]) + support + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        ys, xs = np.mgrid[y0:y1, x0:x1].astype(np.float64)
        dx = xs - p["cx"]
        dy = ys - p["cy"]
        ct, st = np.cos(p["theta"]), np.sin(p["theta"])
        u = (dx * ct + dy * st) / ra
        v = (-dx * st + dy * ct) / rb
        d2 = u * u + v * v
        blob = p["amplitude"] * np.exp(-2.2 * d2)
        blob[d2 > 2.5] = 0.0
        region = field[y0:y1, x0:x1]
        np.maximum(region, blob, out=region)
    return field


def _smoothstep(x):
    t = np.clip(x, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _smooth_cliff(x):
    t = np.clip(x, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


# (center, width, weight) of the cliffs in each stain-response curve; the
# linear leak keeps every curve strictly monotone
_RESPONSE_CLIFFS = {
    "tint": ((0.35, 0.10, 1.0),),
    "cytoplasm": ((0.30, 0.08, 0.6), (0.65, 0.08, 0.4)),
    "nucleus": ((0.55, 0.09, 1.0),),
}


def _stain_response(level: float, curve: str) -> float:
    """Monotone staircase response of a stain weight to the protocol level.

    Most of the variation concentrates in narrow cliffs, so the curve is
    easy to pin down from hundreds of sampled levels but badly mis-fit
    from a handful, which is what makes models trained on tiny subsets
    misrender unseen protocol levels.
    """
    leak = 0.15
    total = leak * level
    norm = leak
    for center, width, weight in _RESPONSE_CLIFFS[curve]:
        total += weight * _smooth_cliff((level - center) / width + 0.5)
        norm += weight
    return float(total / norm)


def render_tile(spec: TissueSpec, tile_size: int = 128):
    """Render one tile; returns (af_pixels, he_pixels, placements).

    Both renderings are float32 in [0, 1] and derive from the same latent
    geometry drawn from ``spec.rng_seed``: nucleus placements, a smooth
    background field, a cytoplasm coverage field and a scalar stain
    protocol level. The protocol level sets the autofluorescence base
    brightness and, through three independent response curves, the
    stained tile's background tint, cytoplasm stain strength and nucleus
    stain strength, so the stained appearance is recoverable from the
    autofluorescence pixels (and vice versa) given enough training
    diversity.
    """
    spec.validate()
    if tile_size < 16:
        raise GeneratorError("tile_size must be >= 16")
    rng = np.random.Generator(np.random.PCG64(int(spec.rng_seed)))
    bg = _sinusoid_field(rng, tile_size, 4, 0.6, 2.4)
    cyto_raw = _sinusoid_field(rng, tile_size, 4, 1.2, 3.2)
    if spec.cytoplasm_density <= 0.0:
        cyto = np.zeros_like(cyto_raw)
    else:
        thresh = float(np.quantile(cyto_raw, 1.0 - spec.cytoplasm_density))
        cyto = _smoothstep((cyto_raw - thresh) / 0.08)
    placements = _place_nuclei(rng, spec, tile_size)
    nuclei = _nuclei_field(placements, tile_size)
    stain_level = float(rng.uniform(0.0, 1.0))

    af = (
        0.05
        + 0.10 * stain_level
        + 0.30 * spec.background_texture_scale * bg
        + 0.20 * cyto
        + 0.62 * nuclei
    )
    af = np.clip(af, 0.0, 1.0)[..., None].astype(np.float32)

    tint = 1.0 - 0.10 * (1.0 - _stain_response(stain_level, "tint"))
    base = BACKGROUND_RGB[None, None, :] * (tint * (1.0 - 0.05 * bg))[..., None]
    cyto_strength = 0.25 + 0.75 * _stain_response(stain_level, "cytoplasm")
    w_cyto = (cyto * cyto_strength * (0.72 + 0.28 * bg))[..., None]
    he = base * (1.0 - w_cyto) + CYTOPLASM_RGB[None, None, :] * w_cyto
    nuc_strength = 0.70 + 0.30 * _stain_response(stain_level, "nucleus")
    w_nuc = (np.clip(nuclei, 0.0, 1.0) * nuc_strength)[..., None]
    he = he * (1.0 - w_nuc) + NUCLEUS_RGB[None, None, :] * w_nuc
    he = np.clip(he, 0.0, 1.0).astype(np.float32)
    geometry = {"placements": placements, "stain_level": stain_level}
    return af, he, geometry


def generate_pair(spec: TissueSpec, tile_size: int = 128, tile_id: str = "") -> tuple[Patch, Patch]:
    """Paired (autofluorescence, stained) patches for one tissue spec."""
    af, he, _ = render_tile(spec, tile_size)
    return (
        Patch(af, "af", tile_id=tile_id, seed=spec.rng_seed),
        Patch(he, "he", tile_id=tile_id, seed=spec.rng_seed),
    )


def corrupt_hs(patch: Patch, mode: str, severity: float) -> Patch:
    """Degrade a stained tile with one artifact mode.

    blur: isotropic Gaussian low-pass (sigma grows with severity).
    contrast_fade: affine squeeze of each channel toward its mean.
    stain_washout: per-pixel desaturation toward gray, mimicking loss of
    stain color while keeping silhouettes. Severity must lie in (0, 1];
    the severity -> 0 limit is the identity.
    """
    if mode not in CORRUPTION_MODES:
        raise GeneratorError(f"unknown corruption mode {mode!r}")
    if not np.isfinite(severity) or not 0.0 < severity <= 1.0:
        raise GeneratorError(f"severity must be in (0, 1], got {severity}")
    if patch.domain != "he":
        raise GeneratorError("corruptions apply to stained (he) tiles")
    x = patch.pixels.astype(np.float64)
    if mode == "blur":
        sigma = BLUR_SIGMA_MAX * severity
        out = ndimage.gaussian_filter(x, sigma=(sigma, sigma, 0.0), mode="reflect")
    elif mode == "contrast_fade":
        mean = x.mean(axis=(0, 1), keepdims=True)
        out = mean + (1.0 - FADE_STRENGTH * severity) * (x - mean)
    else:  # stain_washout
        gray = x.mean(axis=2, keepdims=True)
        out = x + severity * (gray - x)
    return patch.copy_with(np.clip(out, 0.0, 1.0).astype(np.float32))


@dataclass
class DatasetManifest:
    """Tile ids of one split plus the provenance needed to regenerate them."""

    split: str
    tile_ids: list
    master_seed: int
    generator_version: str = GENERATOR_VERSION

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class DatasetConfig:
    train: int
    val: int
    test: int
    master_seed: int
    tile_size: int = 128
    nuclei_count_range: tuple = (8, 24)
    nuclei_radius_range: tuple = (3.0, 6.5)
    background_texture_scale_range: tuple = (0.5, 1.0)
    cytoplasm_density_range: tuple = (0.25, 0.55)

    def validate(self) -> "DatasetConfig":
        for name in ("train", "val", "test"):
            if getattr(self, name) < 0:
                raise GeneratorError(f"split size {name} must be >= 0")
        if self.tile_size < 16:
            raise GeneratorError("tile_size must be >= 16")
        lo, hi = self.nuclei_count_range
        if lo < 0 or hi < lo:
            raise GeneratorError("bad nuclei_count_range")
        return self


def spec_for_tile(cfg: DatasetConfig, tile_id: str) -> TissueSpec:
    """The tissue spec of one tile, a pure function of (config, tile_id)."""
    rng = substream(cfg.master_seed, "tile-spec", tile_id)
    lo, hi = cfg.nuclei_count_range
    count = int(rng.integers(lo, hi + 1))
    tile_seed = int(seed_sequence(cfg.master_seed, "tile-render", tile_id).generate_state(1)[0])
    return TissueSpec(
        nuclei_count=count,
        nuclei_radius_range=tuple(cfg.nuclei_radius_range),
        background_texture_scale=float(rng.uniform(*cfg.background_texture_scale_range)),
        cytoplasm_density=float(rng.uniform(*cfg.cytoplasm_density_range)),
        rng_seed=tile_seed,
    )


def _write_png(path: Path, pixels: np.ndarray) -> None:
    data = np.round(pixels * 255.0).astype(np.uint8)
    if data.shape[2] == 1:
        img = Image.fromarray(data[:, :, 0], mode="L")
    else:
        img = Image.fromarray(data, mode="RGB")
    img.save(path, format="PNG")


class TileStore:
    """Directory of generated tiles: PNG previews, exact float sidecars and
    the split manifest."""

    def __init__(self, root):
        self.root = Path(root)

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def tile_path(self, tile_id: str) -> Path:
        return self.root / "tiles" / f"{tile_id}.arr"

    def exists(self) -> bool:
        return self.manifest_path.exists()

    def load_manifests(self) -> dict:
        with open(self.manifest_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        return {
            split: DatasetManifest(
                split=split,
                tile_ids=list(ids),
                master_seed=raw["master_seed"],
                generator_version=raw["generator_version"],
            )
            for split, ids in raw["splits"].items()
        }

    def load_config(self) -> dict:
        with open(self.manifest_path, "r", encoding="utf-8") as fh:
            return json.load(fh)

    def load_pair(self, tile_id: str) -> tuple[Patch, Patch]:
        arrays, meta = load_arrays(self.tile_path(tile_id))
        return (
            Patch(arrays["af"], "af", tile_id=tile_id, seed=meta["rng_seed"]),
            Patch(arrays["he"], "he", tile_id=tile_id, seed=meta["rng_seed"]),
        )

    def load_meta(self, tile_id: str) -> dict:
        _, meta = load_arrays(self.tile_path(tile_id))
        return meta


def build_dataset(cfg: DatasetConfig, out_dir, force: bool = False) -> dict:
    """Generate and persist all splits; returns the split manifests.

    Refuses to overwrite an existing manifest unless ``force`` is set.
    """
    cfg.validate()
    store = TileStore(out_dir)
    if store.exists() and not force:
        raise GeneratorError(
            f"dataset manifest already exists at {store.manifest_path}; pass force=True to overwrite"
        )
    tiles_dir = store.root / "tiles"
    tiles_dir.mkdir(parents=True, exist_ok=True)
    splits = {}
    for split, size in (("train", cfg.train), ("val", cfg.val), ("test", cfg.test)):
        ids = [f"{split}_{i:04d}" for i in range(size)]
        for tile_id in ids:
            spec = spec_for_tile(cfg, tile_id)
            af, he, geometry = render_tile(spec, cfg.tile_size)
            save_arrays(
                store.tile_path(tile_id),
                {"af": af, "he": he},
                meta={
                    "tile_id": tile_id,
                    "rng_seed": spec.rng_seed,
                    "nuclei_count": spec.nuclei_count,
                    "placements": geometry["placements"],
                    "stain_level": geometry["stain_level"],
                    "spec": {
                        "nuclei_count": spec.nuclei_count,
                        "nuclei_radius_range": list(spec.nuclei_radius_range),
                        "background_texture_scale": spec.background_texture_scale,
                        "cytoplasm_density": spec.cytoplasm_density,
                        "rng_seed": spec.rng_seed,
                    },
                },
            )
            _write_png(tiles_dir / f"{tile_id}_af.png", af)
            _write_png(tiles_dir / f"{tile_id}_he.png", he)
        splits[split] = ids
    payload = {
        "generator_version": GENERATOR_VERSION,
        "master_seed": cfg.master_seed,
        "tile_size": cfg.tile_size,
        "splits": splits,
    }
    with open(store.manifest_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return store.load_manifests()
