"""Camera front-end simulation: Bayer frames, demosaicing, network input, frame source."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .tensor import QParams, QuantTensor, quantize

PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")
_CHANNEL = {"R": 0, "G": 1, "B": 2}

# normalized-convolution kernels: neighbours of the same colour weighted by distance
_K_RB = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.int64)
_K_G = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=np.int64)


class ImageError(ValueError):
    pass


class EndOfStream(Exception):
    pass


@dataclass(frozen=True, eq=False)
class BayerFrame:
    width: int
    height: int
    pattern: str
    data: np.ndarray  # uint8 (height, width)

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ImageError(f"unknown Bayer pattern {self.pattern!r}")
        if self.width <= 0 or self.height <= 0 or self.width % 2 or self.height % 2:
            raise ImageError(f"Bayer frame dimensions must be even and positive, got {self.width}x{self.height}")
        data = np.asarray(self.data)
        if data.dtype != np.uint8 or data.size != self.width * self.height:
            raise ImageError("Bayer data must be uint8 with width*height elements")
        object.__setattr__(self, "data", data.reshape(self.height, self.width))

    def channel_masks(self) -> np.ndarray:
        """(3, H, W) boolean masks of which colour each photosite samples."""
        masks = np.zeros((3, self.height, self.width), dtype=bool)
        for i, ch in enumerate(self.pattern):
            dy, dx = divmod(i, 2)
            masks[_CHANNEL[ch], dy::2, dx::2] = True
        return masks


@dataclass(frozen=True, eq=False)
class RgbImage:
    width: int
    height: int
    data: np.ndarray  # uint8 (height, width, 3), interleaved RGB

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.uint8 or data.size != 3 * self.width * self.height:
            raise ImageError("RGB data must be uint8 with 3*width*height elements")
        object.__setattr__(self, "data", data.reshape(self.height, self.width, 3))

    def __eq__(self, other):
        return isinstance(other, RgbImage) and np.array_equal(self.data, other.data)


def demosaic_bilinear(f: BayerFrame) -> RgbImage:
    """Bilinear demosaic; borders clamp to the nearest valid photosite.

    Each missing sample is the weighted mean of same-colour neighbours in the
    3x3 window, rounded half up in integer arithmetic.
    """
    raw = f.data.astype(np.int64)
    masks = f.channel_masks()
    out = np.empty((f.height, f.width, 3), dtype=np.uint8)
    for c in range(3):
        k = _K_G if c == 1 else _K_RB
        m = masks[c].astype(np.int64)
        vp = np.pad(raw * m, 1, mode="edge")
        mp = np.pad(m, 1, mode="edge")
        num = np.zeros_like(raw)
        den = np.zeros_like(raw)
        for dy in range(3):
            for dx in range(3):
                if k[dy, dx]:
                    num += k[dy, dx] * vp[dy:dy + f.height, dx:dx + f.width]
                    den += k[dy, dx] * mp[dy:dy + f.height, dx:dx + f.width]
        interp = (2 * num + den) // (2 * den)
        out[..., c] = np.where(masks[c], raw, interp)
    return RgbImage(f.width, f.height, out)


def mosaic(img: RgbImage, pattern: str = "RGGB") -> BayerFrame:
    """Sample an RGB image through a colour filter array."""
    if img.width % 2 or img.height % 2:
        raise ImageError("mosaic needs even dimensions")
    frame = BayerFrame(img.width, img.height, pattern, np.zeros((img.height, img.width), np.uint8))
    masks = frame.channel_masks()
    data = np.zeros((img.height, img.width), dtype=np.uint8)
    for c in range(3):
        data[masks[c]] = img.data[..., c][masks[c]]
    return BayerFrame(img.width, img.height, pattern, data)


def _resize_nearest(a: np.ndarray, res: int) -> np.ndarray:
    h, w = a.shape[:2]
    ys = (np.arange(res) * h) // res
    xs = (np.arange(res) * w) // res
    return a[ys][:, xs]


def _resize_bilinear(a: np.ndarray, res: int) -> np.ndarray:
    h, w = a.shape[:2]
    a = a.astype(np.float64)
    ys = np.clip((np.arange(res) + 0.5) * h / res - 0.5, 0, h - 1)
    xs = np.clip((np.arange(res) + 0.5) * w / res - 0.5, 0, w - 1)
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bot = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def net_input_float(img: RgbImage, resolution: int, method: str = "nearest") -> np.ndarray:
    """Resize to resolution x resolution and scale to [0, 1]; float64 NCHW RGB."""
    if resolution <= 0:
        raise ImageError("resolution must be positive")
    if method == "nearest":
        a = _resize_nearest(img.data, resolution).astype(np.float64)
    elif method == "bilinear":
        a = _resize_bilinear(img.data, resolution)
    else:
        raise ImageError(f"unknown resize method {method!r}")
    return (a / 255.0).transpose(2, 0, 1)[None]


def to_net_input(img: RgbImage, resolution: int, q: QParams, method: str = "nearest") -> QuantTensor:
    return quantize(net_input_float(img, resolution, method), q)


# ---------------------------------------------------------------------------
# PGM / PPM


def _read_netpbm(path) -> tuple[str, int, int, bytes]:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic = tokens[0].decode(errors="replace")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageError(f"{path}: malformed header") from None
    if maxval != 255:
        raise ImageError(f"{path}: only 8-bit files supported (maxval {maxval})")
    return magic, width, height, data[pos:]


def read_pgm(path, pattern: str = "RGGB") -> BayerFrame:
    magic, w, h, raster = _read_netpbm(path)
    if magic != "P5":
        raise ImageError(f"{path}: expected P5, got {magic}")
    if len(raster) < w * h:
        raise ImageError(f"{path}: truncated raster")
    return BayerFrame(w, h, pattern, np.frombuffer(raster[:w * h], dtype=np.uint8).copy())


def read_ppm(path) -> RgbImage:
    magic, w, h, raster = _read_netpbm(path)
    if magic != "P6":
        raise ImageError(f"{path}: expected P6, got {magic}")
    if len(raster) < 3 * w * h:
        raise ImageError(f"{path}: truncated raster")
    return RgbImage(w, h, np.frombuffer(raster[:3 * w * h], dtype=np.uint8).copy())


def write_pgm(path, f: BayerFrame) -> Path:
    path = Path(path)
    path.write_bytes(f"P5\n{f.width} {f.height}\n255\n".encode() + f.data.tobytes())
    return path


def write_ppm(path, img: RgbImage) -> Path:
    path = Path(path)
    path.write_bytes(f"P6\n{img.width} {img.height}\n255\n".encode() + img.data.tobytes())
    return path


# ---------------------------------------------------------------------------
# synthetic scenes and annotation

# fixed palette so annotated outputs are stable across runs
PALETTE = np.array([
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
    (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
    (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
], dtype=np.uint8)


def class_color(class_id: int) -> np.ndarray:
    return PALETTE[class_id % len(PALETTE)]


@dataclass
class SyntheticScene:
    image: RgbImage
    objects: list[tuple[int, tuple[float, float, float, float]]] = field(default_factory=list)


def synthetic_scene(rng: np.random.Generator, width: int = 320, height: int = 320,
                    max_objects: int = 4, num_classes: int = 20) -> SyntheticScene:
    """Smooth gradient background with a few solid rectangles and ellipses."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = rng.uniform(40, 200, size=3)
    gy, gx = rng.uniform(-60, 60, size=(2, 3))
    img = base + gy * (yy / height)[..., None] + gx * (xx / width)[..., None]
    objects = []
    for _ in range(int(rng.integers(1, max_objects + 1))):
        bw = rng.uniform(0.1, 0.4) * width
        bh = rng.uniform(0.1, 0.4) * height
        x1, y1 = rng.uniform(0, width - bw), rng.uniform(0, height - bh)
        cls = int(rng.integers(num_classes))
        color = PALETTE[cls].astype(np.float64)
        if cls % 2:
            cy, cx = y1 + bh / 2, x1 + bw / 2
            inside = ((yy - cy) / (bh / 2)) ** 2 + ((xx - cx) / (bw / 2)) ** 2 <= 1.0
        else:
            inside = (yy >= y1) & (yy < y1 + bh) & (xx >= x1) & (xx < x1 + bw)
        img[inside] = color
        objects.append((cls, (float(x1), float(y1), float(x1 + bw), float(y1 + bh))))
    img += rng.normal(0.0, 2.0, size=img.shape)
    data = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return SyntheticScene(RgbImage(width, height, data), objects)


def draw_boxes(img: RgbImage, boxes, thickness: int = 1) -> RgbImage:
    """Copy of ``img`` with rectangle outlines; ``boxes`` yields (class_id, (x1, y1, x2, y2))."""
    out = img.data.copy()
    h, w = out.shape[:2]
    for cls, (x1, y1, x2, y2) in boxes:
        c = class_color(cls)
        x1, x2 = (int(np.clip(round(v), 0, w - 1)) for v in (x1, x2))
        y1, y2 = (int(np.clip(round(v), 0, h - 1)) for v in (y1, y2))
        t = thickness
        out[y1:min(y1 + t, y2 + 1), x1:x2 + 1] = c
        out[max(y2 - t + 1, y1):y2 + 1, x1:x2 + 1] = c
        out[y1:y2 + 1, x1:min(x1 + t, x2 + 1)] = c
        out[y1:y2 + 1, max(x2 - t + 1, x1):x2 + 1] = c
    return RgbImage(img.width, img.height, out)


# ---------------------------------------------------------------------------
# double-buffered frame source with virtual time


def loop_period(capture_ms: float, processing_ms: float) -> float:
    """Steady-state period when acquisition of frame n+1 overlaps processing of frame n."""
    return max(capture_ms, processing_ms)


class FrameSource:
    """Double-buffered frame delivery on a virtual clock.

    ``producer`` returns the next frame or None when exhausted. Acquisition of
    frame n+1 into the idle buffer starts when frame n is handed out, so the
    consumer only waits for capture time that exceeds its own processing
    time (reported via :meth:`advance`). A buffer handed out by ``next`` is
    refilled two calls later.
    """

    def __init__(self, producer: Callable[[], BayerFrame | None], capture_ms: float):
        if capture_ms < 0:
            raise ValueError("capture time must be non-negative")
        self._producer = producer
        self.capture_ms = capture_ms
        self.clock_ms = 0.0
        self.delivered_at: list[float] = []
        self._buffers: list[np.ndarray | None] = [None, None]
        self._fill = 0
        self._ready_ms = capture_ms  # first acquisition starts at t=0
        self._exhausted = False

    def _acquire(self) -> BayerFrame | None:
        frame = self._producer()
        if frame is None:
            return None
        buf = self._buffers[self._fill]
        if buf is None or buf.shape != frame.data.shape:
            buf = self._buffers[self._fill] = np.empty_like(frame.data)
        np.copyto(buf, frame.data)
        self._fill ^= 1
        return BayerFrame(frame.width, frame.height, frame.pattern, buf)

    def next(self) -> BayerFrame:
        if self._exhausted:
            raise EndOfStream
        frame = self._acquire()
        if frame is None:
            self._exhausted = True
            raise EndOfStream
        self.clock_ms = max(self.clock_ms, self._ready_ms)
        self.delivered_at.append(self.clock_ms)
        self._ready_ms = self.clock_ms + self.capture_ms
        return frame

    def advance(self, processing_ms: float) -> None:
        """Consumer reports the (virtual) time spent processing the last frame."""
        self.clock_ms += processing_ms

    def __iter__(self) -> Iterator[BayerFrame]:
        while True:
            try:
                yield self.next()
            except EndOfStream:
                return

    @property
    def periods(self) -> list[float]:
        t = self.delivered_at
        return [b - a for a, b in zip(t, t[1:])]


def directory_producer(path, pattern: str = "RGGB") -> Callable[[], BayerFrame | None]:
    files = iter(sorted(Path(path).glob("*.pgm")))

    def produce():
        f = next(files, None)
        return None if f is None else read_pgm(f, pattern)

    return produce


def synthetic_producer(seed: int, count: int, width: int = 320, height: int = 320,
                       pattern: str = "RGGB", num_classes: int = 20,
                       scenes: list | None = None) -> Callable[[], BayerFrame | None]:
    """Mosaiced synthetic scenes; ground truth is appended to ``scenes`` if given."""
    rng = np.random.default_rng(seed)
    remaining = [count]

    def produce():
        if remaining[0] <= 0:
            return None
        remaining[0] -= 1
        scene = synthetic_scene(rng, width, height, num_classes=num_classes)
        if scenes is not None:
            scenes.append(scene)
        return mosaic(scene.image, pattern)

    return produce
