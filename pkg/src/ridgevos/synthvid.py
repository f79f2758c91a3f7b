"""Deterministic synthetic videos of moving textured shapes, plus NetPBM I/O.

All randomness comes from a counter-based splitmix64 hash of integer
seeds, so the same spec produces the same bytes on every platform and
numpy version.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, MalformedFileError, SpecError

SHAPES = ("disc", "rectangle", "triangle")
MIN_COVERAGE = 0.02
MAX_COVERAGE = 0.60

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x):
    z = (np.asarray(x, dtype=np.uint64) + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
    return z ^ (z >> np.uint64(31))


def _key(*parts):
    """Fold integers into a single 64-bit stream key."""
    h = np.zeros(1, dtype=np.uint64)
    for p in parts:
        h = _splitmix64(h ^ np.uint64(int(p) & 0xFFFFFFFFFFFFFFFF))
    return h[0]


def hash_uniform(n, *key):
    """``n`` floats in [0, 1) determined entirely by the integer ``key``."""
    base = _key(*key)
    idx = np.arange(n, dtype=np.uint64)
    bits = _splitmix64(idx ^ base) >> np.uint64(11)
    return bits.astype(np.float64) * (1.0 / (1 << 53))


@dataclass(frozen=True)
class VideoSpec:
    seed: int
    frames: int = 12
    width: int = 64
    height: int = 64
    shape_kind: str = "disc"
    size: float = 14.0  # disc radius, rectangle half-width, triangle circumradius
    aspect: float = 1.0  # rectangle half-height / half-width
    start: tuple = (32.0, 32.0)  # centre (x, y) at t=0, pixels
    velocity: tuple = (1.0, 0.5)  # px per frame
    angle: float = 0.0
    angular_velocity: float = 0.0  # rad per frame
    object_color: tuple = (0.8, 0.2, 0.2)
    background_color: tuple = (0.3, 0.5, 0.6)
    noise_amplitude: float = 0.2
    noise_cell: int = 8
    stripe_period: float = 6.0
    photometric_drift: float = 0.0  # brightness delta per frame

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("start", "velocity", "object_color", "background_color"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Frame:
    image: np.ndarray  # (3, H, W) float64, multiples of 1/255
    mask: np.ndarray  # (H, W) uint8 in {0, 1}


@dataclass
class Video:
    video_id: str
    frames: list
    spec: VideoSpec = None


def bounding_radius(spec):
    if spec.shape_kind == "rectangle":
        return float(np.hypot(spec.size, spec.size * spec.aspect))
    return float(spec.size)


def _validate(spec):
    if spec.shape_kind not in SHAPES:
        raise SpecError(f"unknown shape kind {spec.shape_kind!r}")
    if spec.width % 8 or spec.height % 8 or spec.width <= 0 or spec.height <= 0:
        raise SpecError(f"frame size {spec.width}x{spec.height} must be positive and divisible by 8")
    if spec.frames < 1:
        raise SpecError("a video needs at least one frame")
    if spec.size <= 0 or spec.aspect <= 0:
        raise SpecError("shape size and aspect must be positive")
    r = bounding_radius(spec)
    if 2 * r > min(spec.width, spec.height) - 1:
        raise SpecError(f"shape of radius {r:.1f} does not fit in a {spec.width}x{spec.height} frame")


def _reflect(p, lo, hi):
    span = hi - lo
    if span <= 0:
        return lo
    y = np.mod(p - lo, 2 * span)
    return lo + (2 * span - y if y > span else y)


def pose_at(spec, t):
    """Centre (x, y) and rotation angle at frame ``t``; the centre bounces off the walls."""
    r = bounding_radius(spec)
    cx = _reflect(spec.start[0] + spec.velocity[0] * t, r, spec.width - 1 - r)
    cy = _reflect(spec.start[1] + spec.velocity[1] * t, r, spec.height - 1 - r)
    return cx, cy, spec.angle + spec.angular_velocity * t


def _local_coords(spec, cx, cy, theta):
    yy, xx = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(theta), np.sin(theta)
    return c * dx + s * dy, -s * dx + c * dy


def rasterize(spec, cx, cy, theta):
    u, v = _local_coords(spec, cx, cy, theta)
    if spec.shape_kind == "disc":
        inside = u * u + v * v <= spec.size * spec.size
    elif spec.shape_kind == "rectangle":
        inside = (np.abs(u) <= spec.size) & (np.abs(v) <= spec.size * spec.aspect)
    else:
        # equilateral triangle: inradius is half the circumradius
        inside = np.ones(u.shape, dtype=bool)
        for phi in (np.pi / 2 + np.pi, np.pi / 6, 5 * np.pi / 6):
            inside &= u * np.cos(phi) + v * np.sin(phi) <= spec.size / 2
    return inside.astype(np.uint8)


def _value_noise(spec, channel):
    cell = spec.noise_cell
    gh, gw = spec.height // cell + 2, spec.width // cell + 2
    grid = hash_uniform(gh * gw, spec.seed, 1, channel).reshape(gh, gw)
    ys = (np.arange(spec.height) + 0.5) / cell
    xs = (np.arange(spec.width) + 0.5) / cell
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    g00 = grid[np.ix_(y0, x0)]
    g01 = grid[np.ix_(y0, x0 + 1)]
    g10 = grid[np.ix_(y0 + 1, x0)]
    g11 = grid[np.ix_(y0 + 1, x0 + 1)]
    return (g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx
            + g10 * fy * (1 - fx) + g11 * fy * fx)


def _quantize(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate_video(spec):
    """Render ``spec.frames`` frames; mask t is the rasterized shape at pose t."""
    _validate(spec)
    h, w = spec.height, spec.width
    background = np.stack([
        spec.background_color[c] + spec.noise_amplitude * (_value_noise(spec, c) - 0.5)
        for c in range(3)
    ])
    grain = hash_uniform(3 * h * w, spec.seed, 2).reshape(3, h, w) - 0.5
    frames = []
    for t in range(spec.frames):
        cx, cy, theta = pose_at(spec, t)
        mask = rasterize(spec, cx, cy, theta)
        cover = mask.mean()
        if not MIN_COVERAGE <= cover <= MAX_COVERAGE:
            raise SpecError(f"frame {t}: foreground covers {cover:.3f} of the frame, outside "
                            f"[{MIN_COVERAGE}, {MAX_COVERAGE}]")
        u, _ = _local_coords(spec, cx, cy, theta)
        stripes = 0.85 + 0.15 * np.sin(2 * np.pi * u / spec.stripe_period)
        obj = np.stack([spec.object_color[c] * stripes for c in range(3)]) + 0.06 * grain
        img = np.where(mask[None].astype(bool), obj, background + 0.03 * grain)
        img = img + spec.photometric_drift * t
        frames.append(Frame(_quantize(img), mask))
    return frames


def random_video_spec(seed, index, frames=12, size=64):
    """Draw a varied but always-valid spec for video ``index`` of a dataset."""
    u = hash_uniform(32, seed, 1000, index)
    kind = SHAPES[int(u[0] * 3) % 3]
    dim = float(size)
    if kind == "disc":
        radius, aspect = (0.25 + 0.11 * u[1]) * dim, 1.0
    elif kind == "rectangle":
        radius, aspect = (0.20 + 0.10 * u[1]) * dim, 0.6 + 0.4 * u[2]
    else:
        radius, aspect = (0.30 + 0.12 * u[1]) * dim, 1.0
    r = np.hypot(radius, radius * aspect) if kind == "rectangle" else radius
    lo, hi = r, dim - 1 - r
    start = (lo + (hi - lo) * u[3], lo + (hi - lo) * u[4])
    speed = 0.5 + 2.0 * u[5]
    heading = 2 * np.pi * u[6]
    velocity = (speed * np.cos(heading), speed * np.sin(heading))
    bg = tuple(0.15 + 0.7 * u[7:10])
    # object colour must stand out from the background
    obj = None
    for k in range(64):
        cand = 0.1 + 0.8 * hash_uniform(3, seed, 2000, index, k)
        if np.linalg.norm(cand - np.asarray(bg)) >= 0.35:
            obj = tuple(cand)
            break
    if obj is None:
        obj = tuple(1.0 - np.asarray(bg))
    return VideoSpec(
        seed=int(_key(seed, index) & np.uint64(0x7FFFFFFFFFFFFFFF)),
        frames=frames,
        width=size,
        height=size,
        shape_kind=kind,
        size=float(radius),
        aspect=float(aspect),
        start=(float(start[0]), float(start[1])),
        velocity=(float(velocity[0]), float(velocity[1])),
        angle=float(2 * np.pi * u[11]),
        angular_velocity=float(0.3 * (u[12] - 0.5)),
        object_color=tuple(float(c) for c in obj),
        background_color=tuple(float(c) for c in bg),
        noise_amplitude=float(0.1 + 0.3 * u[13]),
        noise_cell=8,
        stripe_period=float(4.0 + 6.0 * u[14]),
        photometric_drift=float(0.02 * (u[15] - 0.5)),
    )


def make_dataset(n_videos=25, frames=12, size=64, seed=0, start_index=0):
    videos = []
    for i in range(start_index, start_index + n_videos):
        spec = random_video_spec(seed, i, frames, size)
        videos.append(Video(f"video_{i:04d}", generate_video(spec), spec))
    return videos


def pool_mask(mask, factor=8):
    """Average-pool a binary H x W mask into an (h*w, 1) soft target."""
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim != 2:
        raise DomainError(f"mask must be 2-D, got shape {m.shape}")
    h, w = m.shape
    if h % factor or w % factor:
        raise DomainError(f"mask size {h}x{w} is not divisible by {factor}")
    pooled = m.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return pooled.reshape(-1, 1)


# --- NetPBM --------------------------------------------------------------

def _header(kind, w, h):
    return f"{kind}\n{w} {h}\n255\n".encode("ascii")


def write_ppm(path, image):
    """Write a (3, H, W) image in [0, 1] as binary P6."""
    img = np.asarray(image)
    _, h, w = img.shape
    data = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(_header("P6", w, h))
        f.write(data.tobytes())


def write_pgm(path, mask):
    """Write a binary mask as P5 with values 0/255."""
    m = np.asarray(mask)
    h, w = m.shape
    with open(path, "wb") as f:
        f.write(_header("P5", w, h))
        f.write((np.where(m > 0, 255, 0)).astype(np.uint8).tobytes())


def _parse_netpbm(raw, magic, path):
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise MalformedFileError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != magic:
        raise MalformedFileError(f"{path}: expected {magic.decode()} magic, got {tokens[0][:8]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise MalformedFileError(f"{path}: non-numeric header field") from None
    if w <= 0 or h <= 0 or maxval != 255:
        raise MalformedFileError(f"{path}: unsupported header {w}x{h} maxval {maxval}")
    return w, h, raw[pos:]


def read_ppm(path):
    raw = Path(path).read_bytes()
    w, h, body = _parse_netpbm(raw, b"P6", path)
    if len(body) != w * h * 3:
        raise MalformedFileError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    data = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return data.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path):
    """Read a P5 mask; values must be 0 or 255. Returns uint8 {0, 1}."""
    raw = Path(path).read_bytes()
    w, h, body = _parse_netpbm(raw, b"P5", path)
    if len(body) != w * h:
        raise MalformedFileError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    data = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    bad = (data != 0) & (data != 255)
    if bad.any():
        raise MalformedFileError(f"{path}: malformed mask, value {int(data[bad][0])} is not 0 or 255")
    return (data == 255).astype(np.uint8)


def write_dataset(videos, root):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"format": 1, "videos": []}
    for video in videos:
        vdir = root / video.video_id
        vdir.mkdir(exist_ok=True)
        for t, frame in enumerate(video.frames):
            write_ppm(vdir / f"frame_{t:04d}.ppm", frame.image)
            write_pgm(vdir / f"mask_{t:04d}.pgm", frame.mask)
        entry = {"id": video.video_id, "frames": len(video.frames)}
        if video.frames:
            entry["height"], entry["width"] = (int(s) for s in video.frames[0].mask.shape)
        entry["spec"] = video.spec.to_dict() if video.spec is not None else None
        manifest["videos"].append(entry)
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return root


def read_video_dir(vdir, video_id=None, require_masks=True):
    """Read frame_####.ppm (+ mask_####.pgm) files from one video directory.

    Frames without a mask get ``mask=None`` unless ``require_masks``.
    """
    vdir = Path(vdir)
    names = sorted(p.name for p in vdir.glob("frame_*.ppm"))
    frames = []
    for name in names:
        idx = name[len("frame_"):-len(".ppm")]
        image = read_ppm(vdir / name)
        mpath = vdir / f"mask_{idx}.pgm"
        if mpath.exists():
            mask = read_pgm(mpath)
        elif require_masks:
            raise MalformedFileError(f"{mpath}: missing mask")
        else:
            mask = None
        frames.append(Frame(image, mask))
    return Video(video_id or vdir.name, frames)


def read_dataset(root):
    root = Path(root)
    mpath = root / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise MalformedFileError(f"{mpath}: {e}") from e
    videos = []
    for entry in manifest["videos"]:
        video = read_video_dir(root / entry["id"], entry["id"])
        if len(video.frames) != entry["frames"]:
            raise MalformedFileError(
                f"{entry['id']}: manifest lists {entry['frames']} frames, found {len(video.frames)} on disk")
        if entry.get("spec") is not None:
            video.spec = VideoSpec.from_dict(entry["spec"])
        videos.append(video)
    return videos
