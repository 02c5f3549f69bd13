"""MNIST IDX ingestion, rotated evaluation sets and train/validation splits.

Rotations use inverse mapping with bilinear interpolation about the pixel-grid
centre ``((H-1)/2, (W-1)/2)``; pixels that map outside the frame read 0. A
positive angle rotates counterclockwise as displayed, so a 90 degree
rotation equals ``numpy.rot90``.
"""
import gzip
import os
import struct

import numpy as np

from .errors import ParseError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
PAPER_ANGLES = tuple(range(0, 360, 10))
ROTATION_CONVENTION = "bilinear;center=(h-1)/2,(w-1)/2;fill=0;ccw"

ROT_CACHE_MAGIC = b"MROT"
ROT_CACHE_VERSION = 1


def _open(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path, expected_magic=None):
    """Read an unsigned-byte IDX file (optionally gzipped) into a uint8 array."""
    with _open(path) as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise ParseError(f"{path}: truncated header (magic)")
    (magic,) = struct.unpack(">I", buf[:4])
    if expected_magic is not None and magic != expected_magic:
        raise ParseError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise ParseError(f"{path}: magic 0x{magic:08x} is not an unsigned-byte IDX file")
    ndim = magic & 0xFF
    if len(buf) < 4 + 4 * ndim:
        raise ParseError(f"{path}: truncated header (extents)")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    body = buf[4 + 4 * ndim:]
    need = int(np.prod(dims, dtype=np.int64))
    if len(body) < need:
        raise ParseError(f"{path}: truncated data, need {need} bytes, have {len(body)}")
    if len(body) > need:
        raise ParseError(f"{path}: {len(body) - need} trailing bytes after data")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, array):
    """Write a uint8 array as an uncompressed IDX file."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", 0x0800 | arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_idx(images_path, labels_path, dtype=np.float32):
    """Load an MNIST image/label pair; pixels are scaled to [0, 1].

    Returns ``(images, labels)`` with shapes ``(N, H, W)`` and ``(N,)``.
    """
    raw = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if raw.ndim != 3:
        raise ParseError(f"{images_path}: image extents {raw.shape} are not (N, H, W)")
    if labels.ndim != 1:
        raise ParseError(f"{labels_path}: label extents {labels.shape} are not (N,)")
    if raw.shape[0] != labels.shape[0]:
        raise ParseError(
            f"count mismatch: {raw.shape[0]} images in {images_path} vs "
            f"{labels.shape[0]} labels in {labels_path}")
    return raw.astype(dtype) / dtype(255), labels.astype(np.int64)


_FILE_STEMS = {
    "train": ("train-images", "train-labels"),
    "test": ("t10k-images", "t10k-labels"),
}


def mnist_paths(mnist_dir, split):
    """Locate the image/label files of ``split`` ('train' or 'test') in ``mnist_dir``.

    Accepts the ``-idx3-ubyte`` and ``.idx3-ubyte`` spellings, gzipped or not.
    """
    found = []
    for stem, kind in zip(_FILE_STEMS[split], ("3", "1")):
        candidates = [f"{stem}-idx{kind}-ubyte", f"{stem}.idx{kind}-ubyte"]
        candidates += [c + ".gz" for c in candidates]
        for c in candidates:
            p = os.path.join(mnist_dir, c)
            if os.path.exists(p):
                found.append(p)
                break
        else:
            raise FileNotFoundError(
                f"no {stem} IDX file in {mnist_dir!r} (tried {', '.join(candidates)})")
    return tuple(found)


def load_mnist(mnist_dir, split, dtype=np.float32):
    return load_idx(*mnist_paths(mnist_dir, split), dtype=dtype)


# rotation -----------------------------------------------------------------

def _cos_sin(angle_deg):
    quarter, rem = divmod(float(angle_deg), 90.0)
    if rem == 0.0:
        return ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))[int(quarter) % 4]
    theta = np.deg2rad(angle_deg)
    return np.cos(theta), np.sin(theta)


def rotate_images(images, angle_deg):
    """Rotate a stack ``(..., H, W)`` counterclockwise by ``angle_deg`` degrees."""
    imgs = np.asarray(images)
    h, w = imgs.shape[-2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    c, s = _cos_sin(angle_deg)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy,
                         np.arange(w, dtype=np.float64) - cx, indexing="ij")
    sy = cy + c * yy + s * xx
    sx = cx - s * yy + c * xx
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy, fx = sy - y0, sx - x0
    out = np.zeros(imgs.shape, dtype=np.result_type(imgs.dtype, np.float32))
    for dy, dx, wt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                       (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + dy, x0 + dx
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w) & (wt != 0)
        vals = imgs[..., np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        out += np.where(valid, wt, 0.0).astype(out.dtype) * vals
    return out


def make_mnist_rot(images, labels, angles=PAPER_ANGLES):
    """Rotated copies of every image at every angle, angle-major.

    Returns ``(images, labels, angles)`` of length ``len(angles) * N``; the
    block ``[i*N:(i+1)*N]`` holds all images at ``angles[i]``.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    stacks = [rotate_images(images, a) for a in angles]
    out = np.concatenate(stacks) if stacks else images[:0]
    return (out, np.tile(labels, len(angles)),
            np.repeat(np.asarray(angles, dtype=np.int64), len(labels)))


def iter_mnist_rot(images, labels, angles=PAPER_ANGLES):
    """Stream ``(angle, rotated_images, labels)`` one angle at a time."""
    for a in angles:
        yield a, rotate_images(images, a), np.asarray(labels)


# rotated-set cache --------------------------------------------------------
#
#   magic      4 bytes  b"MROT"
#   version    u32
#   count      u32      images per angle
#   n_angles   u32
#   angles     i32 * n_angles
#   height     u32
#   width      u32
#   key_len    u32      length of the UTF-8 convention string
#   key        bytes
#   labels     u8 * count
#   images     f32 * (n_angles * count * height * width), angle-major
# All integers little-endian.

def save_rot_cache(path, images, labels, angles):
    images = np.asarray(images, dtype="<f4")
    labels = np.asarray(labels)
    n_angles, count = len(angles), len(labels)
    h, w = images.shape[-2:]
    if images.shape != (n_angles * count, h, w):
        raise ValueError(f"expected {n_angles * count} rotated images, got {images.shape[0]}")
    key = ROTATION_CONVENTION.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(ROT_CACHE_MAGIC)
        fh.write(struct.pack("<III", ROT_CACHE_VERSION, count, n_angles))
        fh.write(struct.pack(f"<{n_angles}i", *angles))
        fh.write(struct.pack("<III", h, w, len(key)))
        fh.write(key)
        fh.write(labels.astype(np.uint8).tobytes())
        fh.write(images.tobytes())


def load_rot_cache(path, angles=None):
    """Read a cache; if ``angles`` is given it must match the stored key."""
    with open(path, "rb") as fh:
        buf = fh.read()

    def need(pos, n, field):
        if pos + n > len(buf):
            raise ParseError(f"{path}: truncated at {field}")

    need(0, 16, "header")
    if buf[:4] != ROT_CACHE_MAGIC:
        raise ParseError(f"{path}: bad magic, not an MROT cache")
    version, count, n_angles = struct.unpack("<III", buf[4:16])
    if version != ROT_CACHE_VERSION:
        raise ParseError(f"{path}: unsupported MROT version {version}")
    pos = 16
    need(pos, 4 * n_angles + 12, "angle list")
    stored = struct.unpack(f"<{n_angles}i", buf[pos:pos + 4 * n_angles])
    pos += 4 * n_angles
    h, w, key_len = struct.unpack("<III", buf[pos:pos + 12])
    pos += 12
    need(pos, key_len, "convention key")
    key = buf[pos:pos + key_len].decode("utf-8")
    pos += key_len
    if key != ROTATION_CONVENTION:
        raise ParseError(f"{path}: cache built with convention {key!r}")
    if angles is not None and tuple(angles) != tuple(stored):
        raise ParseError(f"{path}: cached angles {stored} differ from requested {tuple(angles)}")
    need(pos, count, "labels")
    labels = np.frombuffer(buf[pos:pos + count], dtype=np.uint8).astype(np.int64)
    pos += count
    nbytes = 4 * n_angles * count * h * w
    need(pos, nbytes, "images")
    images = np.frombuffer(buf[pos:pos + nbytes], dtype="<f4").reshape(n_angles * count, h, w)
    if pos + nbytes != len(buf):
        raise ParseError(f"{path}: trailing bytes after images")
    return images.astype(np.float32), np.tile(labels, n_angles), list(stored)


def split_train_valid(images, labels, valid_count, seed=0):
    """Random disjoint split; returns ``((X_train, y_train), (X_valid, y_valid))``."""
    n = len(labels)
    if len(images) != n:
        raise ValueError(f"{len(images)} images but {n} labels")
    if not 0 <= valid_count <= n:
        raise ValueError(f"valid_count={valid_count} must lie in [0, {n}]")
    perm = np.random.default_rng(seed).permutation(n)
    valid, train = np.sort(perm[:valid_count]), np.sort(perm[valid_count:])
    return (images[train], labels[train]), (images[valid], labels[valid])
