"""Stage-one artificial-sample release.

Each party publishes a small, label-free batch of synthetic feature rows
so peers can benchmark each other's standalone models. The default
generator is deliberately simple: per-class feature means perturbed by a
Gaussian mechanism (features are expected in [0, 1], so a class mean over
n_c rows moves by at most sqrt(dim) / n_c when one example changes), then
u = floor(lambda * |D|) samples emitted as noisy prototype plus a small
jitter, with classes drawn in proportion to the local class frequencies.
A richer generative model can be slotted in through the same interface.

Budgets above epsilon = 1 are spent as ceil(epsilon) equal chunks, each
within the Gaussian calibration's validity range; the chunked releases
are averaged, which divides the noise standard deviation by sqrt(chunks)
while the chunks still compose to the full (epsilon, delta).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .numerics import Dataset
from .privacy import PrivacyAccountant, calibrate_sigma


@dataclass(frozen=True)
class AugmentConfig:
    """Data-expansion settings: image mode rotates/shifts, tabular repeats."""

    kind: str = "tabular"
    rotation_range: float = 0.0
    shift_range: float = 0.0
    replication: int = 1

    def __post_init__(self):
        if self.kind not in ("image", "tabular"):
            raise ValueError("kind must be 'image' or 'tabular'")
        if self.replication < 1:
            raise ValueError("replication factor must be >= 1")


@dataclass(frozen=True)
class SampleRelease:
    """Label-free sample matrix published by one party.

    Carries no label field by construction; receivers attach their own
    predictions when benchmarking.
    """

    samples: np.ndarray
    party_id: str

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))
        if self.samples.ndim != 2:
            raise ValueError("samples must be a 2-D matrix")

    @property
    def count(self) -> int:
        return self.samples.shape[0]

    def to_bytes(self) -> bytes:
        """Matrix-block wire format, suitable for ledger payload envelopes."""
        pid = self.party_id.encode()
        header = struct.pack(">III", self.samples.shape[0], self.samples.shape[1], len(pid))
        return header + pid + self.samples.astype(">f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SampleRelease":
        if len(blob) < 12:
            raise ValueError("truncated sample release blob")
        rows, cols, pid_len = struct.unpack(">III", blob[:12])
        need = 12 + pid_len + rows * cols * 8
        if len(blob) != need:
            raise ValueError("sample release blob has wrong length")
        pid = blob[12:12 + pid_len].decode()
        data = np.frombuffer(blob[12 + pid_len:], dtype=">f8").astype(np.float64)
        return cls(data.reshape(rows, cols), pid)


def _rotate_shift_nearest(image: np.ndarray, angle_deg: float, dy: float, dx: float) -> np.ndarray:
    """Nearest-neighbour rotation about the centre plus translation."""
    side = image.shape[0]
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    centre = (side - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    r_rel = rows - centre - dy
    c_rel = cols - centre - dx
    src_r = np.rint(cos_t * r_rel + sin_t * c_rel + centre).astype(np.int64)
    src_c = np.rint(-sin_t * r_rel + cos_t * c_rel + centre).astype(np.int64)
    valid = (src_r >= 0) & (src_r < side) & (src_c >= 0) & (src_c < side)
    out = np.zeros_like(image)
    out[valid] = image[src_r[valid], src_c[valid]]
    return out


def augment(data: Dataset, cfg: AugmentConfig, rng: np.random.Generator) -> Dataset:
    """Expand the dataset by the replication factor.

    Image mode applies an independent rotation within +-rotation_range
    degrees and shifts within +-shift_range * side pixels to each copy;
    tabular mode repeats records verbatim. Labels are copied either way.
    """
    rep = cfg.replication
    labels = np.repeat(data.labels, rep)
    if cfg.kind == "tabular":
        return Dataset(np.repeat(data.features, rep, axis=0), labels, data.num_classes)

    side = math.isqrt(data.dim)
    if side * side != data.dim:
        raise ValueError("image augmentation needs square images")
    out = np.empty((len(data) * rep, data.dim), dtype=np.float64)
    max_shift = cfg.shift_range * side
    for i in range(len(data)):
        image = data.features[i].reshape(side, side)
        for r in range(rep):
            angle = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
            dy = rng.uniform(-max_shift, max_shift)
            dx = rng.uniform(-max_shift, max_shift)
            out[i * rep + r] = _rotate_shift_nearest(image, angle, dy, dx).ravel()
    return Dataset(out, labels, data.num_classes)


def noisy_class_prototypes(data: Dataset, budget: tuple[float, float],
                           rng: np.random.Generator,
                           noise_override: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-class mean features under the Gaussian mechanism.

    Returns (prototypes, class_counts); absent classes keep a zero row and
    a zero count. noise_override replaces the calibrated noise std (0.0 is
    the zero-noise testing hook).
    """
    epsilon, delta = budget
    if epsilon <= 0.0 or delta <= 0.0:
        raise ValueError("budget must be positive")
    chunks = max(1, math.ceil(epsilon))
    sigma = calibrate_sigma(epsilon / chunks, delta / chunks)
    counts = np.bincount(data.labels, minlength=data.num_classes)
    prototypes = np.zeros((data.num_classes, data.dim), dtype=np.float64)
    for cls in range(data.num_classes):
        if counts[cls] == 0:
            continue
        mean = data.features[data.labels == cls].mean(axis=0)
        sensitivity = math.sqrt(data.dim) / counts[cls]
        std = sigma * sensitivity / math.sqrt(chunks)
        if noise_override is not None:
            std = noise_override
        if std > 0.0:
            mean = mean + rng.normal(0.0, std, size=mean.shape)
        prototypes[cls] = mean
    return prototypes, counts


def generate_release(data: Dataset, sharing_level: float, budget: tuple[float, float],
                     rng: np.random.Generator, party_id: str = "party",
                     accountant: PrivacyAccountant | None = None,
                     prototype_noise: float | None = None,
                     jitter_std: float = 0.05,
                     release_count: int | None = None) -> SampleRelease:
    """Release u = floor(sharing_level * |D|) label-free synthetic samples.

    Debits the full budget from the accountant (as ceil(epsilon) chunked
    records) before generating; an accountant that cannot cover the
    release refuses it. release_count pins u explicitly when the data
    passed in has been expanded by augmentation but the published volume
    should follow the raw local size.
    """
    if not 0.0 < sharing_level <= 1.0:
        raise ValueError("sharing_level must lie in (0, 1]")
    epsilon, delta = budget
    if accountant is not None:
        chunks = max(1, math.ceil(epsilon))
        accountant.spend_many(epsilon / chunks, delta / chunks, count=chunks)

    prototypes, counts = noisy_class_prototypes(data, budget, rng, prototype_noise)
    u = int(sharing_level * len(data)) if release_count is None else int(release_count)
    present = np.flatnonzero(counts)
    if present.size == 0:
        raise ValueError("dataset has no examples to summarise")
    freqs = counts[present] / counts[present].sum()
    drawn = present[rng.choice(present.size, size=u, p=freqs)]
    samples = prototypes[drawn]
    if jitter_std > 0.0:
        samples = samples + rng.normal(0.0, jitter_std, size=samples.shape)
    return SampleRelease(samples, party_id)
