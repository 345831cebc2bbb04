"""Tensor files, synthetic phantoms, retrospective undersampling and image metrics.

RTEN layout (little endian)::

    b"RTEN1" | u8 dtype (0=f32, 1=f64) | u32 ndim | u32 dims[ndim] | raw row-major data

A file may hold several records back to back; single-tensor helpers read and
write exactly one.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .kspace import Mask, SubsetPair, apply_A, make_selection_subsets, make_undersampling_mask

MAGIC = b"RTEN1"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}
PSNR_CAP = 200.0


class FormatError(ValueError):
    pass


# -- RTEN -----------------------------------------------------------------


def encode_rten(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in TAGS:
        arr = arr.astype(np.float64)
    tag = TAGS[arr.dtype]
    header = MAGIC + struct.pack("<BI", tag, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes()


def decode_rten(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns (array, next offset)."""
    if buf[offset : offset + 5] != MAGIC:
        raise FormatError(f"bad RTEN magic at byte {offset}")
    try:
        tag, ndim = struct.unpack_from("<BI", buf, offset + 5)
        dims = struct.unpack_from(f"<{ndim}I", buf, offset + 10)
    except struct.error as e:
        raise FormatError(f"truncated RTEN header at byte {offset}") from e
    if tag not in DTYPES:
        raise FormatError(f"unknown RTEN dtype tag {tag}")
    dt = DTYPES[tag]
    start = offset + 10 + 4 * ndim
    n = int(np.prod(dims, dtype=np.int64))
    end = start + n * dt.itemsize
    if end > len(buf):
        raise FormatError(f"RTEN payload truncated: need {end} bytes, have {len(buf)}")
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=start).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True), end


def _check_overwrite(path: Path, force: bool):
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists (use --force to overwrite)")


def write_rten(path, arr, force: bool = True) -> Path:
    path = Path(path)
    _check_overwrite(path, force)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_rten(arr))
    return path


def read_rten(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_rten(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after a single RTEN record")
    return arr


def write_rten_records(path, arrays, force: bool = True) -> Path:
    path = Path(path)
    _check_overwrite(path, force)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(encode_rten(a) for a in arrays))
    return path


def read_rten_records(path) -> list[np.ndarray]:
    buf = Path(path).read_bytes()
    out, off = [], 0
    while off < len(buf):
        arr, off = decode_rten(buf, off)
        out.append(arr)
    return out


def write_json(path, obj, force: bool = True) -> Path:
    path = Path(path)
    _check_overwrite(path, force)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")
    return path


def sidecar(path) -> Path:
    return Path(path).with_suffix(".json")


def save_mask(path, mask: Mask, force: bool = True) -> Path:
    write_rten(path, mask.pattern, force)
    write_json(sidecar(path), mask.metadata(), force)
    return Path(path)


def load_mask(path) -> Mask:
    pattern = read_rten(path)
    meta = json.loads(sidecar(path).read_text())
    if [meta["height"], meta["width"]] != list(pattern.shape):
        raise FormatError(f"{path}: sidecar size {meta['height']}x{meta['width']} != pattern {pattern.shape}")
    return Mask(pattern.astype(np.float64), int(meta["acs_lines"]), meta["seed"], meta["accel"])


# -- phantoms -------------------------------------------------------------

# (intensity, semi-axis a, semi-axis b, center x, center y, rotation deg);
# the contrast-enhanced "modified" Shepp-Logan table.
SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)


def pixel_grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinates in [-1, 1]; row 0 is the top (y = +1 side)."""
    c = (2.0 * np.arange(n) - n + 1) / n
    xx, yy = np.meshgrid(c, -c)
    return xx, yy


def _ellipses(n, table):
    xx, yy = pixel_grid(n)
    img = np.zeros((n, n))
    for val, a, b, x0, y0, deg in table:
        t = math.radians(deg)
        dx, dy = xx - x0, yy - y0
        u = dx * math.cos(t) + dy * math.sin(t)
        v = -dx * math.sin(t) + dy * math.cos(t)
        img += val * ((u / a) ** 2 + (v / b) ** 2 <= 1.0)
    return img


def _blobs(n, rng):
    xx, yy = pixel_grid(n)
    a, b = rng.uniform(0.75, 0.9), rng.uniform(0.8, 0.95)
    head = (xx / a) ** 2 + (yy / b) ** 2 <= 1.0
    inner = (xx / (a - 0.07)) ** 2 + (yy / (b - 0.07)) ** 2 <= 1.0
    img = 0.9 * (head & ~inner) + 0.25 * inner
    for _ in range(rng.integers(3, 7)):
        cx, cy = rng.uniform(-0.45, 0.45, size=2)
        s = rng.uniform(0.06, 0.22)
        img += rng.uniform(0.15, 0.5) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s)) * inner
    table = []
    for _ in range(rng.integers(1, 4)):
        table.append(
            (
                rng.uniform(-0.2, 0.3),
                rng.uniform(0.05, 0.2),
                rng.uniform(0.05, 0.25),
                *rng.uniform(-0.4, 0.4, size=2),
                rng.uniform(-90, 90),
            )
        )
    img += _ellipses(n, table) * inner
    return img / max(img.max(), 1e-12)


def phantom(n: int, variant: str = "shepp", seed: int = 0) -> np.ndarray:
    """n x n phantom in [0, 1]. ``shepp`` ignores the seed."""
    if n < 8:
        raise ValueError(f"phantom size must be >= 8, got {n}")
    if variant == "shepp":
        img = _ellipses(n, SHEPP_LOGAN)
    elif variant == "blobs":
        img = _blobs(n, np.random.default_rng(seed))
    else:
        raise ValueError(f"unknown phantom variant {variant!r} (expected 'shepp' or 'blobs')")
    return np.clip(img, 0.0, 1.0)


# -- acquisition ----------------------------------------------------------


def as_complex_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 2:
        return img
    if img.ndim != 2:
        raise ValueError(f"expected an H x W image, got shape {img.shape}")
    return np.stack([img, np.zeros_like(img)])


def simulate_acquisition(img: np.ndarray, m: Mask) -> np.ndarray:
    x = as_complex_image(img)
    if x.shape[1:] != m.pattern.shape:
        raise ValueError(f"image shape {x.shape[1:]} does not match mask shape {m.pattern.shape}")
    return apply_A(x, m)


# -- metrics --------------------------------------------------------------


def _mag(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape[0] == 2:
        return np.sqrt(x[0] ** 2 + x[1] ** 2)
    return x


def psnr(ref, test, data_range: float = 1.0) -> float:
    ref, test = _mag(ref), _mag(test)
    if ref.shape != test.shape:
        raise ValueError(f"psnr: shape mismatch {ref.shape} vs {test.shape}")
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps."""
    t = np.arange(size) - (size - 1) / 2
    w = np.exp(-(t**2) / (2 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img, w):
    k = len(w)
    rows = sliding_window_view(img, k, axis=0) @ w
    return sliding_window_view(rows, k, axis=1) @ w


def ssim(ref, test, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian windows."""
    ref, test = _mag(ref), _mag(test)
    if ref.shape != test.shape:
        raise ValueError(f"ssim: shape mismatch {ref.shape} vs {test.shape}")
    if min(ref.shape) < SSIM_WIN:
        raise ValueError(f"ssim: image {ref.shape} is smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    w = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = _filter_valid(ref, w), _filter_valid(test, w)
    sxx = _filter_valid(ref * ref, w) - mu_x**2
    syy = _filter_valid(test * test, w) - mu_y**2
    sxy = _filter_valid(ref * test, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


# -- datasets -------------------------------------------------------------


@dataclasses.dataclass
class Sample:
    id: str
    y: np.ndarray
    mask: Mask
    subsets: SubsetPair
    image: np.ndarray | None = None


def write_image_set(out_dir, images: list[np.ndarray], ids=None, meta=None, force=False) -> Path:
    out = Path(out_dir)
    ids = ids or [f"s{i:04d}" for i in range(len(images))]
    samples = []
    for sid, img in zip(ids, images):
        rel = f"images/{sid}.rten"
        write_rten(out / rel, img, force)
        samples.append({"id": sid, "image": rel})
    manifest = {"kind": "images", "normalization": "intensities in [0, 1]", "samples": samples}
    manifest.update(meta or {})
    return write_json(out / "manifest.json", manifest, force)


def _manifest_path(p) -> Path:
    p = Path(p)
    return p / "manifest.json" if p.is_dir() else p


def read_images(path) -> tuple[list[str], list[np.ndarray]]:
    mpath = _manifest_path(path)
    manifest = json.loads(mpath.read_text())
    ids, imgs = [], []
    for s in manifest["samples"]:
        if "image" not in s:
            raise FormatError(f"{mpath}: sample {s['id']} has no image")
        ids.append(s["id"])
        imgs.append(read_rten(mpath.parent / s["image"]))
    return ids, imgs


def prepare_samples(
    images, accel, acs, sel_acs, seed, ids=None, shared_mask=True, keep_images=True
) -> list[Sample]:
    """Retrospectively undersample each image and draw its fixed subset pair.

    With ``shared_mask`` one undersampling mask (seeded by ``seed``) serves
    every image; otherwise sample i uses ``seed + i``. Subset pairs always
    use a per-sample seed derived from ``seed``.
    """
    ids = ids or [f"s{i:04d}" for i in range(len(images))]
    h, w = np.shape(images[0])[-2:]
    shared = make_undersampling_mask(h, w, accel, acs, seed) if shared_mask else None
    out = []
    for i, (sid, img) in enumerate(zip(ids, images)):
        m = shared if shared_mask else make_undersampling_mask(h, w, accel, acs, seed + i)
        subs = make_selection_subsets(m, sel_acs, seed=subset_seed(seed, i))
        out.append(Sample(sid, simulate_acquisition(img, m), m, subs, img if keep_images else None))
    return out


def subset_seed(seed: int, index: int, epoch: int = 0) -> int:
    return int(np.random.SeedSequence([seed, index, epoch, 0x5eb5]).generate_state(1)[0])


def save_dataset(out_dir, samples: list[Sample], meta=None, force=False) -> Path:
    out = Path(out_dir)
    entries = []
    mask_files: dict[int, str] = {}
    for s in samples:
        key = id(s.mask)
        if key not in mask_files:
            rel = f"masks/parent_{len(mask_files):04d}.rten"
            save_mask(out / rel, s.mask, force)
            mask_files[key] = rel
        e = {"id": s.id, "kspace": f"kspace/{s.id}.rten", "mask": mask_files[key]}
        write_rten(out / e["kspace"], s.y, force)
        for k, sub in (("sub1", s.subsets.sub1), ("sub2", s.subsets.sub2)):
            e[k] = f"subsets/{s.id}_{k}.rten"
            save_mask(out / e[k], sub, force)
        if s.image is not None:
            e["image"] = f"images/{s.id}.rten"
            write_rten(out / e["image"], s.image, force)
        entries.append(e)
    h, w = samples[0].y.shape[1:] if samples else (0, 0)
    manifest = {
        "kind": "dataset",
        "shape": [int(h), int(w)],
        "normalization": "image intensities scaled to [0, 1] before undersampling",
        "samples": entries,
    }
    manifest.update(meta or {})
    return write_json(out / "manifest.json", manifest, force)


def load_dataset(path) -> list[Sample]:
    mpath = _manifest_path(path)
    root = mpath.parent
    try:
        manifest = json.loads(mpath.read_text())
    except OSError as e:
        raise OSError(f"cannot read dataset manifest {mpath}: {e}") from e
    masks: dict[str, Mask] = {}
    out = []
    shape = None
    for e in manifest["samples"]:
        if e["mask"] not in masks:
            masks[e["mask"]] = load_mask(root / e["mask"])
        parent = masks[e["mask"]]
        subs = SubsetPair(load_mask(root / e["sub1"]), load_mask(root / e["sub2"]), parent)
        y = read_rten(root / e["kspace"])
        img = read_rten(root / e["image"]) if "image" in e else None
        if shape is None:
            shape = y.shape
        if y.shape != shape or y.shape[1:] != parent.pattern.shape:
            raise FormatError(f"{mpath}: sample {e['id']} has inconsistent shape {y.shape}")
        out.append(Sample(e["id"], y, parent, subs, img))
    return out


def dataset_exists(path) -> bool:
    return os.path.exists(_manifest_path(path))
