"""Synthetic phantoms, augmentation, and the binary sample container.

Two families of phantom:

* cardiac (2D slice or thin 3D stack): a bright inner disk (class 3) inside
  a thin ring (class 2) with a darker crescent (class 1) hugging the ring,
  on background 0. Pose, radii and wall thickness are randomized per
  sample; every sample contains all four classes, and intensity steps
  coincide with the label boundaries (the image is the per-class base
  intensity, softened by a small Gaussian blur, plus pixel noise).

* teeth (3D): K ellipsoidal blobs placed along a horizontal arch arc, each
  its own instance with a tooth class id; ids increase monotonically along
  the arc, so mirrored volumes never carry mirrored labels. Ground-truth
  offsets point every member voxel at its instance centroid, and blobs are
  re-placed on overlap (bounded retries).

Sample container ("RDVS", little-endian): magic, u32 version, u8 ndim,
u8 flags (bit0 = offsets present, bit1 = instance ids present), u16
reserved, u32 dims[ndim], then raw arrays in order: image float32, label
uint8, offsets float32 (3 x voxels), instance ids uint16. Round-trips are
bit-exact; structural damage raises FormatError with the byte offset.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError
from .rng import RngState, derive_seed

_MAGIC = b"RDVS"
_VERSION = 1
_KINDS = ("cardiac2d", "cardiac3d", "teeth3d")
_MIN_CLASS_VOXELS = 20


@dataclass(frozen=True)
class SynthSpec:
    kind: str = "cardiac2d"
    size: tuple = (64, 64)
    n_samples: int = 100
    seed: int = 42
    noise_sigma: float = 0.05
    edge_blur: float = 1.0
    lv_radius: tuple = (0.14, 0.20)  # fraction of min spatial extent
    wall: tuple = (2.0, 3.0)  # voxels
    rv_radius: tuple = (0.12, 0.16)
    blob_count: int = 8
    blob_radius: tuple = (2.7, 3.4)  # voxels
    max_retries: int = 50

    def validate(self) -> "SynthSpec":
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown phantom kind '{self.kind}' (have {_KINDS})")
        want = 2 if self.kind == "cardiac2d" else 3
        if len(self.size) != want:
            raise ConfigError(f"{self.kind} needs a {want}-axis size, got {self.size}")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.noise_sigma < 0 or self.edge_blur < 0:
            raise ConfigError("noise and blur must be non-negative")
        return self


@dataclass
class Sample:
    kind: str
    image: np.ndarray  # float32, (H, W) or (D, H, W)
    label: np.ndarray  # uint8, same spatial shape
    offsets: np.ndarray | None = None  # float32, (3, D, H, W)
    instance_ids: np.ndarray | None = None  # uint16, (D, H, W)

    def spatial_shape(self) -> tuple:
        return tuple(self.image.shape)


def generate(spec: SynthSpec) -> list:
    spec.validate()
    if spec.kind == "teeth3d":
        return gen_teeth(spec)
    return gen_cardiac(spec)


# ---------------------------------------------------------------------------
# cardiac phantom


def _cardiac_slice(shape, center, r_lv, wall, r_rv, theta):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    d_lv = np.hypot(yy - center[0], xx - center[1])
    label = np.zeros(shape, dtype=np.uint8)
    label[d_lv <= r_lv + wall] = 2
    label[d_lv <= r_lv] = 3
    rv_c = (
        center[0] + (r_lv + wall + 0.7 * r_rv) * np.sin(theta),
        center[1] + (r_lv + wall + 0.7 * r_rv) * np.cos(theta),
    )
    d_rv = np.hypot(yy - rv_c[0], xx - rv_c[1])
    label[(d_rv <= r_rv) & (label == 0)] = 1
    return label


def _cardiac_label(spec: SynthSpec, rng: RngState):
    spatial = spec.size[-2:]
    m = min(spatial)
    center = (
        spatial[0] * rng.uniform(low=0.42, high=0.58),
        spatial[1] * rng.uniform(low=0.42, high=0.58),
    )
    r_lv = m * rng.uniform(low=spec.lv_radius[0], high=spec.lv_radius[1])
    wall = rng.uniform(low=spec.wall[0], high=spec.wall[1])
    r_rv = m * rng.uniform(low=spec.rv_radius[0], high=spec.rv_radius[1])
    theta = rng.uniform(low=0.0, high=2.0 * np.pi)
    if len(spec.size) == 2:
        return _cardiac_slice(spec.size, center, r_lv, wall, r_rv, theta)
    depth = spec.size[0]
    zc = (depth - 1) / 2.0
    label = np.zeros(spec.size, dtype=np.uint8)
    for z in range(depth):
        taper = 1.0 - 0.15 * abs(z - zc) / max(zc, 1.0)
        label[z] = _cardiac_slice(spec.size[1:], center, r_lv * taper, wall, r_rv * taper, theta)
    return label


def _label_ok(label: np.ndarray) -> bool:
    counts = np.bincount(label.reshape(-1), minlength=4)
    if np.any(counts[:4] < _MIN_CLASS_VOXELS):
        return False
    return counts[2] < counts[3]  # the ring must stay thinner than the disk


_CARDIAC_BASE = np.array([0.20, 0.45, 0.70, 0.90])


def _render(label: np.ndarray, base: np.ndarray, spec: SynthSpec, rng: RngState) -> np.ndarray:
    image = base[label].astype(np.float64)
    if spec.edge_blur > 0:
        image = ndimage.gaussian_filter(image, sigma=spec.edge_blur)
    image = image + rng.normal(label.shape, std=spec.noise_sigma)
    return image.astype(np.float32)


def gen_cardiac(spec: SynthSpec) -> list:
    spec.validate()
    if spec.kind not in ("cardiac2d", "cardiac3d"):
        raise ConfigError(f"gen_cardiac got kind '{spec.kind}'")
    samples = []
    for idx in range(spec.n_samples):
        label = None
        for attempt in range(spec.max_retries):
            rng = RngState(derive_seed(spec.seed, "cardiac", idx, attempt))
            candidate = _cardiac_label(spec, rng)
            if _label_ok(candidate):
                label = candidate
                break
        if label is None:
            raise ConfigError(
                f"cardiac sample {idx}: no valid geometry in {spec.max_retries} retries"
            )
        jitter = rng.uniform(4, low=-0.02, high=0.02)
        image = _render(label, _CARDIAC_BASE + jitter, spec, rng)
        samples.append(Sample(kind=spec.kind, image=image, label=label))
    return samples


# ---------------------------------------------------------------------------
# teeth phantom


def _place_blobs(spec: SynthSpec, rng: RngState):
    d, h, w = spec.size
    k = spec.blob_count
    arc_r = 0.33 * min(h, w)
    arc_c = (0.60 * h, 0.50 * w)
    phis = np.linspace(0.12 * np.pi, 0.88 * np.pi, k) + rng.uniform(k, low=-0.015, high=0.015)
    blobs = []
    for i in range(k):
        for attempt in range(spec.max_retries):
            jit = rng.uniform(3, low=-0.6, high=0.6)
            center = np.array(
                [
                    d / 2.0 + rng.uniform(low=-2.5, high=2.5),
                    arc_c[0] - arc_r * np.sin(phis[i]) + jit[1],
                    arc_c[1] + arc_r * np.cos(phis[i]) + jit[2],
                ]
            )
            radii = rng.uniform(3, low=spec.blob_radius[0], high=spec.blob_radius[1])
            lo = center - radii
            hi = center + radii
            if np.any(lo < 1.5) or np.any(hi > np.array(spec.size) - 2.5):
                continue
            clear = True
            for c2, r2 in blobs:
                gap = np.abs(center - c2)
                if np.linalg.norm(gap) < (np.max(radii) + np.max(r2) + 1.5) and np.max(gap) < 6.0:
                    clear = False
                    break
            if clear:
                blobs.append((center, radii))
                break
        else:
            return None
    return blobs


def gen_teeth(spec: SynthSpec) -> list:
    spec.validate()
    if spec.kind != "teeth3d":
        raise ConfigError(f"gen_teeth got kind '{spec.kind}'")
    if not 1 <= spec.blob_count <= 32:
        raise ConfigError(f"blob count must lie in [1, 32], got {spec.blob_count}")
    coords = np.stack(np.mgrid[0 : spec.size[0], 0 : spec.size[1], 0 : spec.size[2]], axis=-1)
    samples = []
    for idx in range(spec.n_samples):
        blobs = None
        for attempt in range(spec.max_retries):
            rng = RngState(derive_seed(spec.seed, "teeth", idx, attempt))
            blobs = _place_blobs(spec, rng)
            if blobs is not None:
                break
        if blobs is None:
            raise ConfigError(f"teeth sample {idx}: no valid layout in {spec.max_retries} retries")
        fdi_ids = np.sort(rng.choice(32, spec.blob_count) + 1)  # monotone along the arc
        label = np.zeros(spec.size, dtype=np.uint8)
        instance = np.zeros(spec.size, dtype=np.uint16)
        offsets = np.zeros((3,) + tuple(spec.size), dtype=np.float32)
        shade = np.full(spec.size, 0.15)
        for i, (center, radii) in enumerate(blobs):
            mask = (((coords - center) / radii) ** 2).sum(axis=-1) <= 1.0
            label[mask] = fdi_ids[i]
            instance[mask] = i + 1
            centroid = np.argwhere(mask).mean(axis=0)
            offsets[:, mask] = (centroid[:, None] - np.argwhere(mask).T).astype(np.float32)
            shade[mask] = 0.78 + rng.uniform(low=-0.04, high=0.08)
        image = shade
        if spec.edge_blur > 0:
            image = ndimage.gaussian_filter(image, sigma=spec.edge_blur)
        image = (image + rng.normal(spec.size, std=spec.noise_sigma)).astype(np.float32)
        samples.append(
            Sample(
                kind=spec.kind,
                image=image,
                label=label,
                offsets=offsets,
                instance_ids=instance,
            )
        )
    return samples


# ---------------------------------------------------------------------------
# augmentation


def _rotate_z(sample: Sample, degrees: float) -> Sample:
    """Content rotation about the depth axis; image bilinear, labels and
    ids nearest, offset vectors resampled then rotated with the content."""
    theta = np.deg2rad(degrees)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    # affine_transform maps output coords to input coords, so use R(-theta)
    rot = np.array([[cos_t, -sin_t], [sin_t, cos_t]]).T
    shape = sample.image.shape
    mat = np.eye(3)
    mat[1:, 1:] = rot
    center = (np.asarray(shape) - 1) / 2.0
    offset_vec = center - mat @ center

    def warp(vol, order):
        return ndimage.affine_transform(vol, mat, offset=offset_vec, order=order, mode="nearest")

    image = warp(sample.image.astype(np.float64), 1).astype(np.float32)
    label = warp(sample.label, 0)
    inst = None if sample.instance_ids is None else warp(sample.instance_ids, 0)
    offs = None
    if sample.offsets is not None:
        comp = [warp(sample.offsets[i].astype(np.float64), 1) for i in range(3)]
        offs = np.stack(
            [comp[0], cos_t * comp[1] - sin_t * comp[2], sin_t * comp[1] + cos_t * comp[2]]
        ).astype(np.float32)
    return replace(sample, image=image, label=label, offsets=offs, instance_ids=inst)


def _hflip(sample: Sample) -> Sample:
    image = np.ascontiguousarray(sample.image[..., ::-1])
    label = np.ascontiguousarray(sample.label[..., ::-1])
    return replace(sample, image=image, label=label)


AUGMENT_OPS = ("hflip", "rotate_z", "intensity", "noise")


def augment(sample: Sample, ops, rng: RngState) -> Sample:
    """Apply the named augmentations with fresh draws from `rng`.

    hflip is a coin flip; the others always apply with random strength.
    Flips are rejected for instance-labelled samples because mirrored
    anatomy would silently change which tooth a class id means.
    """
    for op in ops:
        if op not in AUGMENT_OPS:
            raise ConfigError(f"unknown augmentation '{op}' (have {AUGMENT_OPS})")
        if op == "hflip":
            if sample.instance_ids is not None or sample.offsets is not None:
                raise ConfigError("hflip is not defined for instance-labelled samples")
            if rng.uniform() < 0.5:
                sample = _hflip(sample)
        elif op == "rotate_z":
            if len(sample.image.shape) != 3:
                raise ConfigError("rotate_z needs a 3D sample")
            sample = _rotate_z(sample, float(rng.uniform(low=-10.0, high=10.0)))
        elif op == "intensity":
            scale = float(rng.uniform(low=0.9, high=1.1))
            shift = float(rng.uniform(low=-0.1, high=0.1))
            sample = replace(sample, image=(sample.image * scale + shift).astype(np.float32))
        elif op == "noise":
            noise = rng.normal(sample.image.shape, std=0.03)
            sample = replace(sample, image=(sample.image + noise).astype(np.float32))
    return sample


# ---------------------------------------------------------------------------
# RDVS container


def sample_to_bytes(sample: Sample) -> bytes:
    ndim = len(sample.image.shape)
    flags = (1 if sample.offsets is not None else 0) | (
        2 if sample.instance_ids is not None else 0
    )
    parts = [
        _MAGIC,
        np.uint32(_VERSION).tobytes(),
        np.uint8(ndim).tobytes(),
        np.uint8(flags).tobytes(),
        np.uint16(0).tobytes(),
        np.asarray(sample.image.shape, dtype="<u4").tobytes(),
        np.ascontiguousarray(sample.image, dtype="<f4").tobytes(),
        np.ascontiguousarray(sample.label, dtype="u1").tobytes(),
    ]
    if sample.offsets is not None:
        parts.append(np.ascontiguousarray(sample.offsets, dtype="<f4").tobytes())
    if sample.instance_ids is not None:
        parts.append(np.ascontiguousarray(sample.instance_ids, dtype="<u2").tobytes())
    return b"".join(parts)


def _take(blob: bytes, cursor: int, count: int, what: str):
    if cursor + count > len(blob):
        raise FormatError(f"truncated sample: {what} needs {count} bytes", offset=cursor)
    return blob[cursor : cursor + count], cursor + count


def sample_from_bytes(blob: bytes, kind: str = "unknown") -> Sample:
    cursor = 0
    magic, cursor = _take(blob, cursor, 4, "magic")
    if magic != _MAGIC:
        raise FormatError(f"bad sample magic {magic!r}", offset=0)
    raw, cursor = _take(blob, cursor, 4, "version")
    version = int(np.frombuffer(raw, "<u4")[0])
    if version != _VERSION:
        raise FormatError(f"unsupported sample version {version}", offset=4)
    raw, cursor = _take(blob, cursor, 1, "ndim")
    ndim = int(raw[0])
    if ndim not in (2, 3):
        raise FormatError(f"bad ndim {ndim}", offset=cursor - 1)
    raw, cursor = _take(blob, cursor, 1, "flags")
    flags = int(raw[0])
    if flags & ~3:
        raise FormatError(f"unknown flag bits {flags:#x}", offset=cursor - 1)
    if flags and ndim != 3:
        raise FormatError("offsets/instance ids are only defined for 3D samples", offset=cursor - 1)
    _, cursor = _take(blob, cursor, 2, "reserved")
    raw, cursor = _take(blob, cursor, 4 * ndim, "dims")
    dims = tuple(int(v) for v in np.frombuffer(raw, "<u4"))
    voxels = int(np.prod(dims))
    raw, cursor = _take(blob, cursor, 4 * voxels, "image")
    image = np.frombuffer(raw, "<f4").reshape(dims).copy()
    raw, cursor = _take(blob, cursor, voxels, "label")
    label = np.frombuffer(raw, "u1").reshape(dims).copy()
    offsets = None
    if flags & 1:
        raw, cursor = _take(blob, cursor, 12 * voxels, "offsets")
        offsets = np.frombuffer(raw, "<f4").reshape((3,) + dims).copy()
    instance = None
    if flags & 2:
        raw, cursor = _take(blob, cursor, 2 * voxels, "instance ids")
        instance = np.frombuffer(raw, "<u2").reshape(dims).copy()
    if cursor != len(blob):
        raise FormatError(f"{len(blob) - cursor} trailing bytes after sample", offset=cursor)
    return Sample(kind=kind, image=image, label=label, offsets=offsets, instance_ids=instance)


def write_sample(path, sample: Sample) -> None:
    with open(path, "wb") as fh:
        fh.write(sample_to_bytes(sample))


def read_sample(path, kind: str = "unknown") -> Sample:
    with open(path, "rb") as fh:
        return sample_from_bytes(fh.read(), kind=kind)


# ---------------------------------------------------------------------------
# dataset directory


def write_dataset(directory, samples, kind: str) -> None:
    os.makedirs(directory, exist_ok=True)
    names = []
    for i, sample in enumerate(samples):
        name = f"sample_{i:05d}.rdvs"
        write_sample(os.path.join(directory, name), sample)
        names.append(name)
    with open(os.path.join(directory, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"rdvs-dataset v1 kind={kind} count={len(names)}\n")
        fh.write("\n".join(names) + ("\n" if names else ""))


def load_dataset(directory) -> tuple:
    """Returns (kind, samples) as listed by the manifest."""
    path = os.path.join(directory, "manifest.txt")
    if not os.path.exists(path):
        raise FormatError(f"no manifest.txt under {directory}")
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh.read().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("rdvs-dataset v1 "):
        raise FormatError(f"unrecognized manifest header in {path}")
    fields = dict(part.split("=", 1) for part in lines[0].split()[2:])
    kind = fields.get("kind", "unknown")
    count = int(fields.get("count", "0"))
    names = lines[1:]
    if len(names) != count:
        raise FormatError(f"manifest says {count} samples but lists {len(names)}")
    return kind, [read_sample(os.path.join(directory, n), kind=kind) for n in names]
