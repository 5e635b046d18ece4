"""Manifests, PGM I/O, preprocessing and a synthetic two-source chest-X-ray stand-in."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

STREAMS = ("cls_labeled", "cls_unlabeled", "seg_labeled", "seg_unlabeled")
EVAL_STREAMS = ("cls_test", "seg_test")
MANIFEST_HEADER = ["path", "label", "mask"]


class DataError(ValueError):
    """Unreadable or invalid dataset input."""


# --------------------------------------------------------------------------
# PGM (binary P5, 8-bit)
# --------------------------------------------------------------------------


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PGM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def decode_pgm_bytes(buf: bytes) -> np.ndarray:
    """Decode P5 bytes to a float32 array in [0, 1]."""
    if buf[:2] == b"P2":
        raise DataError("ASCII PGM (P2) is not supported; convert to binary P5")
    if buf[:2] != b"P5":
        raise DataError(f"not a binary PGM: magic {buf[:2]!r}")
    (_, w, h, maxval), pos = _pgm_tokens(buf, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise DataError(f"only 8-bit PGM supported, maxval={maxval}")
    pixels = buf[pos : pos + w * h]
    if len(pixels) != w * h:
        raise DataError(f"truncated PGM: expected {w * h} bytes, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).astype(np.float32) / 255.0


def decode_pgm(path: str | Path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    try:
        return decode_pgm_bytes(buf)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Scale [0, 1] to 8 bits, rounding half up."""
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def encode_pgm_bytes(img: np.ndarray) -> bytes:
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    h, w = arr.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm_bytes(img))


# --------------------------------------------------------------------------
# Preprocessing
# --------------------------------------------------------------------------


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation."""
    h, w = img.shape
    if h == 0 or w == 0:
        raise DataError("cannot resize an empty image")
    if (h, w) == (out_h, out_w):
        return img.astype(np.float64)
    ys = np.linspace(0, h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0, w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = img.astype(np.float64)
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bot = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def minmax(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def normalize_resize(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize to size x size, then per-image min-max to [0, 1]."""
    if img.size == 0:
        raise DataError("zero-extent image")
    return minmax(bilinear_resize(img, size, size)).astype(np.float32)


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    return (bilinear_resize(mask, size, size) >= 0.5).astype(np.float32)


# --------------------------------------------------------------------------
# Manifests
# --------------------------------------------------------------------------


@dataclass
class ManifestRow:
    path: Path
    label: int | None = None
    mask: Path | None = None


@dataclass
class Manifest:
    rows: list[ManifestRow]
    stream: str | None = None
    source: Path | None = None


def stream_of(path: str | Path) -> str | None:
    stem = Path(path).stem
    return stem if stem in STREAMS + EVAL_STREAMS else None


def load_manifest(path: str | Path, stream: str | None = None) -> Manifest:
    """Read a ``path,label,mask`` CSV; relative paths resolve against its directory.

    ``stream`` defaults to the file stem when it names a stream. Labeled
    streams must carry their annotation; unlabeled streams must not.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    stream = stream or stream_of(path)
    base = path.parent
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(rec)}")
            img, label, mask = (c.strip() for c in rec)
            if not img:
                raise DataError(f"{path}:{lineno}: empty image path")
            lab = None
            if label:
                if label not in ("0", "1"):
                    raise DataError(f"{path}:{lineno}: label {label!r} not in {{0,1}}")
                lab = int(label)
            row = ManifestRow(base / img, lab, base / mask if mask else None)
            _validate_row(row, stream, f"{path}:{lineno}")
            rows.append(row)
    return Manifest(rows=rows, stream=stream, source=path)


def _validate_row(row: ManifestRow, stream: str | None, where: str) -> None:
    if stream in ("cls_labeled", "cls_test") and row.label is None:
        raise DataError(f"{where}: {stream} rows need a label")
    if stream in ("seg_labeled", "seg_test") and row.mask is None:
        raise DataError(f"{where}: {stream} rows need a mask")
    if stream in ("cls_unlabeled", "seg_unlabeled") and (row.label is not None or row.mask is not None):
        raise DataError(f"{where}: unlabeled rows must not carry a label or mask")


def write_manifest(path: str | Path, rows: list[tuple[str, int | None, str | None]]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for img, label, mask in rows:
            w.writerow([img, "" if label is None else label, mask or ""])


@dataclass
class Stream:
    """Images (N, 1, S, S) in [0, 1], optional labels (N,) and binary masks (N, 1, S, S)."""

    images: np.ndarray
    labels: np.ndarray | None = None
    masks: np.ndarray | None = None
    paths: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @classmethod
    def empty(cls, size: int) -> Stream:
        return cls(np.zeros((0, 1, size, size), dtype=np.float32))


def load_stream(manifest: Manifest | str | Path, size: int) -> Stream:
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    if not manifest.rows:
        return Stream.empty(size)
    imgs, labels, masks = [], [], []
    for row in manifest.rows:
        imgs.append(normalize_resize(decode_pgm(row.path), size))
        labels.append(row.label)
        if row.mask is not None:
            masks.append(resize_mask(decode_pgm(row.mask), size))
    images = np.stack(imgs)[:, None]
    lab = np.array(labels, dtype=np.int64) if all(v is not None for v in labels) else None
    msk = np.stack(masks)[:, None] if len(masks) == len(imgs) else None
    return Stream(images, lab, msk, [str(r.path) for r in manifest.rows])


@dataclass
class Datasets:
    cls_labeled: Stream
    cls_unlabeled: Stream
    seg_labeled: Stream
    seg_unlabeled: Stream


# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------


@dataclass
class SourceStyle:
    """Per-source acquisition differences (intensity offset, noise, lung geometry)."""

    offset: float = 0.0
    noise: float = 0.03
    contrast: float = 1.0
    lung_scale: float = 1.0


@dataclass
class SynthConfig:
    size: int = 64
    cls_labeled: int = 50
    cls_unlabeled: int = 100
    seg_labeled: int = 20
    seg_unlabeled: int = 100
    cls_test: int = 0
    seg_test: int = 0
    abnormal_prob: float = 0.5
    cls_source: SourceStyle = field(default_factory=lambda: SourceStyle(offset=0.0, noise=0.03))
    seg_source: SourceStyle = field(default_factory=lambda: SourceStyle(offset=0.06, noise=0.05, contrast=0.9))
    seed: int = 0

    def counts(self) -> dict[str, int]:
        return {k: getattr(self, k) for k in STREAMS + EVAL_STREAMS}

    def validate(self) -> None:
        if self.size < 8:
            raise ValueError("synthetic image extent must be >= 8")
        if any(v < 0 for v in self.counts().values()):
            raise ValueError("stream counts must be nonnegative")
        if not 0.0 <= self.abnormal_prob <= 1.0:
            raise ValueError("abnormal_prob must be a probability")


def _ellipse(rows, cols, cy, cx, ay, ax, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    u = (cols - cx) * c + (rows - cy) * s
    v = -(cols - cx) * s + (rows - cy) * c
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def synth_image(rng: np.random.Generator, size: int, abnormal: bool, style: SourceStyle) -> tuple[np.ndarray, np.ndarray]:
    """One image with two dark elliptical lungs (the mask) and, if abnormal, a bright opacity inside a lung."""
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    s = float(size)
    img = np.full((size, size), 0.05)
    body = _ellipse(rows, cols, 0.5 * s, 0.5 * s, 0.48 * s, 0.44 * s)
    img[body] = 0.35
    lungs = np.zeros((size, size), dtype=bool)
    centres = []
    for side in (-1, 1):
        cy = s * (0.5 + rng.uniform(-0.04, 0.04))
        cx = s * (0.5 + side * (0.2 + rng.uniform(-0.02, 0.02)))
        ay = s * 0.3 * style.lung_scale * rng.uniform(0.9, 1.1)
        ax = s * 0.16 * style.lung_scale * rng.uniform(0.9, 1.1)
        lung = _ellipse(rows, cols, cy, cx, ay, ax, angle=side * rng.uniform(0.0, 0.15))
        lungs |= lung
        centres.append((cy, cx, ay, ax))
    img[lungs] = 0.1 + rng.uniform(-0.05, 0.05)
    if abnormal:
        cy, cx, ay, ax = centres[rng.integers(0, 2)]
        by = cy + rng.uniform(-0.5, 0.5) * ay
        bx = cx + rng.uniform(-0.4, 0.4) * ax
        sigma = s * rng.uniform(0.10, 0.15)
        img += 0.7 * np.exp(-((rows - by) ** 2 + (cols - bx) ** 2) / (2 * sigma**2))
    img = style.contrast * img + style.offset + rng.normal(0.0, style.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0), lungs


def synth_generate(cfg: SynthConfig, out_dir: str | Path) -> dict[str, Path]:
    """Write PGM images, masks and one manifest per stream; returns manifest paths."""
    cfg.validate()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from None
    manifests = {}
    for idx, (stream, count) in enumerate(cfg.counts().items()):
        if stream in EVAL_STREAMS and count == 0:
            continue
        style = cfg.cls_source if stream.startswith("cls") else cfg.seg_source
        sdir = out / stream
        sdir.mkdir(exist_ok=True)
        rows = []
        for i in range(count):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, idx, i]))
            abnormal = bool(rng.random() < cfg.abnormal_prob)
            img, mask = synth_image(rng, cfg.size, abnormal, style)
            name = f"{stream}/{i:04d}.pgm"
            write_pgm(out / name, img)
            label = mask_name = None
            if stream in ("cls_labeled", "cls_test"):
                label = int(abnormal)
            if stream in ("seg_labeled", "seg_test"):
                mask_name = f"{stream}/{i:04d}_mask.pgm"
                write_pgm(out / mask_name, mask.astype(np.float64))
            rows.append((name, label, mask_name))
        path = out / f"{stream}.csv"
        write_manifest(path, rows)
        manifests[stream] = path
    _write_summary(out / "dataset.toml", cfg)
    return manifests


def _write_summary(path: Path, cfg: SynthConfig) -> None:
    lines = ["# synthetic dataset summary", "format_version = 1"]
    flat = asdict(cfg)
    for key, value in flat.items():
        if isinstance(value, dict):
            for sub, v in value.items():
                lines.append(f"{key}.{sub} = {v}")
        else:
            lines.append(f"{key} = {value}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
