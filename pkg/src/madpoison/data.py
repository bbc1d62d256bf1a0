"""Datasets, query pools and transfer-set persistence."""
from __future__ import annotations

import gzip
import hashlib
import io
import json
import os
import struct
import tarfile
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
TRANSFER_VERSION = 1

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
# PyPI source distribution that ships the four official MNIST IDX files
MNIST_SDIST_URL = ("https://files.pythonhosted.org/packages/be/d1/"
                   "6db83a78917574d10bdbfa61c1d563300770d643735f6cf355a6f9adcabe/MNIST_dir-0.2.tar.gz")
MNIST_SDIST_SHA256 = "174621ea86e24ebe98d24594d3c26aa206ae51419f0dbf2b750c296603597eee"


class IdxFormatError(ValueError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class TransferFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    split_tag: str = "train"
    n_classes: int = 0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if not self.n_classes:
            self.n_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label outside [0, n_classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return tuple(self.inputs.shape[1:])

    def subset(self, idx):
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.split_tag, self.n_classes)


@dataclass
class QueryPool:
    inputs: np.ndarray
    source_tag: str = "pool"
    _digest: str = field(default="", repr=False)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if len(self.inputs) == 0:
            raise ValueError("query pool is empty")

    def __len__(self):
        return len(self.inputs)

    @property
    def digest(self):
        if not self._digest:
            self._digest = hashlib.sha256(np.ascontiguousarray(self.inputs).tobytes()).hexdigest()
        return self._digest


# -- IDX ---------------------------------------------------------------------------

def _open_bytes(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path):
    """Parse an unsigned-byte IDX file into (magic, array)."""
    raw = _open_bytes(path)
    if len(raw) < 4:
        raise IdxFormatError("file shorter than the magic number", len(raw))
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise IdxFormatError(f"bad magic 0x{int.from_bytes(raw[:4], 'big'):08x}", 0)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxFormatError("truncated dimension header", len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:header_end])
    expected = int(np.prod(dims)) if dims else 0
    if len(raw) - header_end < expected:
        raise IdxFormatError(f"truncated payload: need {expected} bytes, found {len(raw) - header_end}",
                             len(raw))
    data = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header_end).reshape(dims)
    return int.from_bytes(raw[:4], "big"), data


def write_idx(path, array):
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("only unsigned-byte IDX files are written")
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(">" + "I" * array.ndim, *array.shape)
    payload = header + np.ascontiguousarray(array).tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def load_mnist_idx(images_path, labels_path, split_tag="train", n_classes=None):
    """Load an IDX image/label pair; pixels scaled to [0, 1], shape (N, H, W, 1)."""
    magic, images = read_idx(images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"expected image magic 0x{IDX_IMAGES_MAGIC:08x}, got 0x{magic:08x}", 0)
    magic, labels = read_idx(labels_path)
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(f"expected label magic 0x{IDX_LABELS_MAGIC:08x}, got 0x{magic:08x}", 0)
    if len(images) != len(labels):
        raise IdxFormatError(f"count mismatch: {len(images)} images vs {len(labels)} labels", 4)
    inputs = images.astype(np.float64)[..., None] / 255.0
    labels = labels.astype(np.int64)
    return LabeledDataset(inputs, labels, split_tag, n_classes or int(labels.max()) + 1)


def data_dir():
    return Path(os.environ.get("MADPOISON_DATA", Path.cwd() / "data"))


def _find(directory, stem):
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}; run `madpoison fetch-mnist`")


def load_mnist(split="train", directory=None):
    directory = Path(directory) if directory else data_dir() / "mnist"
    img, lab = MNIST_FILES[split]
    return load_mnist_idx(_find(directory, img), _find(directory, lab), split_tag=split, n_classes=10)


def fetch_mnist(directory=None, url=MNIST_SDIST_URL):
    """Download the official MNIST IDX files (gzipped) into ``directory``."""
    directory = Path(directory) if directory else data_dir() / "mnist"
    directory.mkdir(parents=True, exist_ok=True)
    with urllib.request.urlopen(url, timeout=120) as resp:
        blob = resp.read()
    if hashlib.sha256(blob).hexdigest() != MNIST_SDIST_SHA256:
        raise IOError("downloaded archive failed its checksum")
    with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tar:
        for member in tar.getmembers():
            base = os.path.basename(member.name)
            if base.endswith("ubyte") and not base.startswith("._"):
                stem = base.replace(".idx", "-idx")
                payload = tar.extractfile(member).read()
                (directory / (stem + ".gz")).write_bytes(gzip.compress(payload, mtime=0))
    return directory


# -- synthetic data ------------------------------------------------------------------

def synth_blobs(K, n_per_class, dim, spread, seed=0, split_tag="train"):
    """Gaussian clusters around K random centres in [-1, 1]^dim."""
    if K < 2 or dim < 2 or n_per_class < 1 or spread < 0:
        raise ValueError("need K >= 2, dim >= 2, n_per_class >= 1, spread >= 0")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-1.0, 1.0, size=(K, dim))
    labels = np.repeat(np.arange(K), n_per_class)
    inputs = centers[labels] + spread * rng.standard_normal((K * n_per_class, dim))
    order = rng.permutation(len(labels))
    return LabeledDataset(inputs[order], labels[order], split_tag, K)


def blob_split(K, n_per_class, dim, spread, seed=0, test_fraction=0.25):
    """Train/test pair drawn from the same blob centres."""
    full = synth_blobs(K, n_per_class, dim, spread, seed)
    n_test = int(round(len(full) * test_fraction))
    test = full.subset(np.arange(n_test))
    test.split_tag = "test"
    train = full.subset(np.arange(n_test, len(full)))
    return train, test


def _font_files():
    import matplotlib
    ttf = Path(matplotlib.get_data_path()) / "fonts" / "ttf"
    wanted = ["DejaVuSans", "DejaVuSans-Bold", "DejaVuSans-Oblique", "DejaVuSans-BoldOblique",
              "DejaVuSerif", "DejaVuSerif-Bold", "DejaVuSerif-Italic", "DejaVuSerif-BoldItalic",
              "DejaVuSansMono", "DejaVuSansMono-Bold", "STIXGeneral", "STIXGeneralBol",
              "STIXGeneralItalic", "STIXGeneralBolIta", "cmr10", "cmss10", "cmtt10", "cmmi10"]
    return [str(ttf / f"{w}.ttf") for w in wanted if (ttf / f"{w}.ttf").exists()]


def _center_like_mnist(img):
    """Fit the glyph in a 20x20 box and centre its mass in a 28x28 frame."""
    from PIL import Image
    from scipy import ndimage

    ys, xs = np.nonzero(img > 0.05)
    if len(ys) == 0:
        return np.zeros((28, 28))
    crop = img[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
    h, w = crop.shape
    s = 20.0 / max(h, w)
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    small = np.asarray(Image.fromarray((crop * 255).astype(np.uint8)).resize((nw, nh), Image.BILINEAR),
                       dtype=np.float64) / 255.0
    out = np.zeros((28, 28))
    top, left = (28 - nh) // 2, (28 - nw) // 2
    out[top:top + nh, left:left + nw] = small
    cy, cx = ndimage.center_of_mass(out)
    out = ndimage.shift(out, (13.5 - cy, 13.5 - cx), order=1, mode="constant")
    return np.clip(out, 0.0, 1.0)


def render_letters(n, seed=0, size=28):
    """Rendered Latin letters with random font, pose and stroke width.

    Returns (images in [0, 1] of shape (n, size, size, 1), labels 0..25).
    Used as a stand-in for EMNIST-Letters: a handwriting-like image source
    independent of the digits a victim is trained on.
    """
    from PIL import Image, ImageDraw, ImageFont
    from scipy import ndimage

    if size != 28:
        raise ValueError("only 28x28 letters are rendered")
    rng = np.random.default_rng(seed)
    fonts = _font_files()
    font_cache = {}
    images = np.zeros((n, size, size))
    labels = rng.integers(0, 26, size=n)
    for i in range(n):
        letter = chr((ord("A") if rng.random() < 0.5 else ord("a")) + labels[i])
        fpath = fonts[rng.integers(len(fonts))]
        if fpath not in font_cache:
            font_cache[fpath] = ImageFont.truetype(fpath, 64)
        canvas = Image.new("L", (112, 112), 0)
        ImageDraw.Draw(canvas).text((24, 8), letter, fill=255, font=font_cache[fpath])
        g = np.asarray(canvas, dtype=np.float64) / 255.0
        angle = rng.uniform(-20, 20)
        shear = rng.uniform(-0.3, 0.3)
        sx, sy = rng.uniform(0.75, 1.25, size=2)
        c, s_ = np.cos(np.radians(angle)), np.sin(np.radians(angle))
        A = np.array([[c, -s_], [s_, c]]) @ np.array([[1.0, shear], [0.0, 1.0]]) @ np.diag([sy, sx])
        center = np.array([56.0, 56.0])
        Ainv = np.linalg.inv(A)
        g = ndimage.affine_transform(g, Ainv, offset=center - Ainv @ center, order=1)
        width = rng.integers(0, 5)
        if width:
            g = ndimage.grey_dilation(g, size=(width + 1, width + 1))
        g = ndimage.gaussian_filter(g, rng.uniform(0.5, 1.5))
        g = g / max(g.max(), 1e-12)
        images[i] = _center_like_mnist(g)
    return images[..., None], labels


def letters_pool(n=20000, seed=0, cache_dir=None):
    """Rendered-letter query pool, cached as IDX files under ``cache_dir``."""
    cache_dir = Path(cache_dir) if cache_dir else data_dir() / "letters"
    img_path = cache_dir / f"letters-{n}-{seed}-images-idx3-ubyte.gz"
    lab_path = cache_dir / f"letters-{n}-{seed}-labels-idx1-ubyte.gz"
    if not (img_path.exists() and lab_path.exists()):
        cache_dir.mkdir(parents=True, exist_ok=True)
        images, labels = render_letters(n, seed)
        write_idx(img_path, np.round(images[..., 0] * 255).astype(np.uint8))
        write_idx(lab_path, labels.astype(np.uint8))
    ds = load_mnist_idx(img_path, lab_path, split_tag="pool", n_classes=26)
    return QueryPool(ds.inputs, source_tag=f"letters-{n}-{seed}")


def sample_queries(pool, B, seed=0):
    """Draw B pool indices uniformly; without replacement unless B > len(pool).

    Returns (indices, inputs, with_replacement).
    """
    if len(pool) == 0:
        raise ValueError("query pool is empty")
    if B < 1:
        raise ValueError("B must be >= 1")
    rng = np.random.default_rng(seed)
    replace = B > len(pool)
    idx = rng.choice(len(pool), size=B, replace=replace) if replace else rng.permutation(len(pool))[:B]
    return idx, pool.inputs[idx], replace


# -- transfer sets -------------------------------------------------------------------

@dataclass
class TransferSet:
    """Ordered (input, returned posterior) records gathered by an attack.

    Inputs are kept either by reference (``input_refs`` into a named pool,
    verified by ``pool_digest``) or inline (``inputs``) for synthesised data.
    """

    posteriors: np.ndarray
    inputs: np.ndarray | None = None
    input_refs: np.ndarray | None = None
    pool_tag: str = ""
    pool_digest: str = ""
    epsilon_used: np.ndarray | None = None
    defense_tag: str = "none"
    audit_l1: np.ndarray | None = None
    audit_choice: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.posteriors = np.asarray(self.posteriors, dtype=np.float64)
        if self.posteriors.ndim != 2:
            raise ValueError("posteriors must be a 2-D array (records x classes)")
        n = len(self.posteriors)
        if self.epsilon_used is None:
            self.epsilon_used = np.zeros(n)
        self.epsilon_used = np.asarray(self.epsilon_used, dtype=np.float64)
        if n and (np.any(self.posteriors < -1e-9) or np.abs(self.posteriors.sum(axis=1) - 1).max() > 1e-9):
            raise ValueError("transfer-set posterior off the probability simplex")

    def __len__(self):
        return len(self.posteriors)

    def resolve(self, pool):
        if self.input_refs is None:
            return self.inputs
        if self.pool_digest and pool.digest != self.pool_digest:
            raise TransferFormatError("query pool does not match the digest stored in the transfer set")
        self.inputs = pool.inputs[self.input_refs]
        return self.inputs


def save_transfer(ts, path):
    header = {"format": "madpoison-transfer", "version": TRANSFER_VERSION, "count": len(ts),
              "pool_tag": ts.pool_tag, "pool_digest": ts.pool_digest, "defense_tag": ts.defense_tag,
              "provenance": ts.provenance}
    arrays = {"header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
              "posteriors": ts.posteriors, "epsilon_used": ts.epsilon_used}
    if ts.input_refs is not None:
        arrays["input_refs"] = np.asarray(ts.input_refs, dtype=np.int64)
    elif ts.inputs is not None:
        arrays["inputs"] = np.asarray(ts.inputs, dtype=np.float64)
    for name in ("audit_l1", "audit_choice"):
        if getattr(ts, name) is not None:
            arrays[name] = np.asarray(getattr(ts, name))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_transfer(path, pool=None):
    try:
        npz = np.load(path)
    except (OSError, ValueError) as exc:
        raise TransferFormatError(f"{path}: unreadable transfer set ({exc})") from exc
    with npz:
        if "header" not in npz.files:
            raise TransferFormatError(f"{path}: missing header")
        header = json.loads(npz["header"].tobytes().decode())
        if header.get("format") != "madpoison-transfer":
            raise TransferFormatError(f"{path}: not a transfer set")
        if header.get("version") != TRANSFER_VERSION:
            raise TransferFormatError(f"{path}: version {header.get('version')} != {TRANSFER_VERSION}")
        get = lambda k: npz[k].copy() if k in npz.files else None  # noqa: E731
        ts = TransferSet(posteriors=get("posteriors"), inputs=get("inputs"), input_refs=get("input_refs"),
                         pool_tag=header["pool_tag"], pool_digest=header["pool_digest"],
                         epsilon_used=get("epsilon_used"), defense_tag=header["defense_tag"],
                         audit_l1=get("audit_l1"), audit_choice=get("audit_choice"),
                         provenance=header["provenance"])
    if len(ts) != header["count"]:
        raise TransferFormatError(f"{path}: record count mismatch")
    if pool is not None:
        ts.resolve(pool)
    return ts
