"""k-LSB substitution: hide an 8-bit gray payload in the low bits of an RGB cover."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_pipeline import ImageSample


class AllocationError(ValueError):
    pass


@dataclass(frozen=True)
class BitAllocation:
    r: int = 3
    g: int = 3
    b: int = 2

    def __post_init__(self):
        bits = self.bits
        if any(not 0 <= x <= 8 for x in bits):
            raise AllocationError(f"per-channel bit counts must be in 0..8, got {bits}")
        if sum(bits) != 8:
            raise AllocationError(f"allocation must carry 8 bits per pixel, got {sum(bits)}")

    @property
    def bits(self) -> tuple[int, int, int]:
        return (self.r, self.g, self.b)

    @classmethod
    def parse(cls, text: str) -> "BitAllocation":
        parts = [int(p) for p in text.replace(",", " ").split()]
        if len(parts) != 3:
            raise AllocationError(f"expected three bit counts, got {text!r}")
        return cls(*parts)


def all_allocations() -> list[BitAllocation]:
    return [BitAllocation(r, g, 8 - r - g) for r in range(9) for g in range(9 - r)]


def _shifts(alloc: BitAllocation) -> list[int]:
    # payload bits consumed MSB-first: R takes the top r bits, then G, then B
    shifts, used = [], 0
    for n in alloc.bits:
        used += n
        shifts.append(8 - used)
    return shifts


def lsb_embed(cover: ImageSample, payload: ImageSample, alloc: BitAllocation = BitAllocation()) -> ImageSample:
    if cover.channels != 3:
        raise ValueError(f"cover must be RGB, got {cover.channels} channels")
    if payload.channels != 1:
        raise ValueError(f"payload must be single-channel, got {payload.channels} channels")
    if payload.pixels.shape[:2] != cover.pixels.shape[:2]:
        raise ValueError(f"payload {payload.pixels.shape[:2]} and cover {cover.pixels.shape[:2]} differ in size")
    p = payload.pixels[:, :, 0].astype(np.uint16)
    out = cover.pixels.copy()
    for c, (n, shift) in enumerate(zip(alloc.bits, _shifts(alloc))):
        if n == 0:
            continue
        low_mask = (1 << n) - 1
        chunk = (p >> shift) & low_mask
        out[:, :, c] = ((out[:, :, c].astype(np.uint16) & (0xFF ^ low_mask)) | chunk).astype(np.uint8)
    return ImageSample(out, cover.id)


def lsb_extract(stego: ImageSample, alloc: BitAllocation = BitAllocation()) -> ImageSample:
    if stego.channels != 3:
        raise ValueError(f"stego image must be RGB, got {stego.channels} channels")
    acc = np.zeros(stego.pixels.shape[:2], dtype=np.uint16)
    for c, (n, shift) in enumerate(zip(alloc.bits, _shifts(alloc))):
        if n:
            acc |= (stego.pixels[:, :, c].astype(np.uint16) & ((1 << n) - 1)) << shift
    return ImageSample(acc.astype(np.uint8)[:, :, None], stego.id)
