"""Image patch type and input validation helpers.

A patch is a single tile with a domain tag: ``af`` (autofluorescence,
1 channel) or ``he`` (H&E-stained appearance, 3 channels). Pixels are
float32 in [0, 1], stored H x W x C.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DOMAIN_CHANNELS = {"af": 1, "he": 3}


class PatchError(ValueError):
    pass


def check_pixels(pixels, domain: str) -> np.ndarray:
    """Validate a pixel array against its domain tag; returns float32 array."""
    if domain not in DOMAIN_CHANNELS:
        raise PatchError(f"unknown domain {domain!r}, expected one of {sorted(DOMAIN_CHANNELS)}")
    arr = np.asarray(pixels)
    if arr.ndim != 3:
        raise PatchError(f"pixels must be H x W x C, got shape {arr.shape}")
    if arr.shape[2] != DOMAIN_CHANNELS[domain]:
        raise PatchError(
            f"domain {domain!r} expects {DOMAIN_CHANNELS[domain]} channel(s), got {arr.shape[2]}"
        )
    arr = arr.astype(np.float32, copy=False)
    if not np.isfinite(arr).all():
        raise PatchError("pixels contain non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise PatchError(f"pixels outside [0, 1]: min={arr.min()}, max={arr.max()}")
    return arr


def check_stack(stack, domain: str) -> np.ndarray:
    """Validate a batch array N x H x W x C for one domain; returns float32."""
    arr = np.asarray(stack)
    if arr.ndim != 4:
        raise PatchError(f"stack must be N x H x W x C, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise PatchError("empty stack")
    check_pixels(arr[0], domain)
    arr = arr.astype(np.float32, copy=False)
    if not np.isfinite(arr).all():
        raise PatchError("stack contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise PatchError("stack pixels outside [0, 1]")
    if arr.shape[3] != DOMAIN_CHANNELS[domain]:
        raise PatchError(f"stack channel count {arr.shape[3]} does not match domain {domain!r}")
    return arr


@dataclass
class Patch:
    """One image tile plus provenance (tile id and the seed that made it)."""

    pixels: np.ndarray
    domain: str
    tile_id: str = ""
    seed: int = 0

    def __post_init__(self):
        self.pixels = check_pixels(self.pixels, self.domain)

    @property
    def shape(self):
        return self.pixels.shape

    def copy_with(self, pixels: np.ndarray) -> "Patch":
        return Patch(pixels=pixels, domain=self.domain, tile_id=self.tile_id, seed=self.seed)
