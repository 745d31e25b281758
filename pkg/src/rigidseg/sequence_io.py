"""Load RGB-D sequences from disk and write label maps, weight tables and
point-cloud exports.

On-disk layout of a sequence directory:

    depth/<index>.png       16-bit grayscale, millimeters, 0 = missing
    intensity/<index>.png   optional 8-bit tracking channel (or rgb/)
    intrinsics.txt          one line: fx fy cx cy
    sequence.cfg            optional per-sequence config (sigma2, frame_rate)
    gt_labels/, gt_poses.txt  optional ground truth written by the renderer
"""

from __future__ import annotations

import colorsys
import os
import re
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .config import PipelineConfig
from .errors import ConfigError, InputError
from .geometry import CameraModel, DepthImage

DEPTH_SCALE = 1000.0  # stored millimeters per meter
NO_LABEL = 255  # palette slot for pixels without data


@dataclass
class Sequence:
    """An ordered RGB-D sequence sharing one camera model."""

    depths: list
    intensities: list  # per-frame float arrays or None
    cam: CameraModel
    frame_rate: float = 30.0
    sigma2: float = 1e-4
    name: str = "sequence"

    def __post_init__(self):
        if len(self.depths) < 2:
            raise InputError("a sequence needs at least 2 frames")
        shape = self.depths[0].values.shape
        for d in self.depths:
            if d.values.shape != shape:
                raise InputError("all frames must share the same dimensions")

    @property
    def num_frames(self):
        return len(self.depths)

    def has_intensity(self):
        return self.intensities is not None and all(im is not None for im in self.intensities)


# ---------------------------------------------------------------------------
# PNG primitives


def write_depth_png(path, depth_m):
    mm = np.clip(np.rint(np.asarray(depth_m) * DEPTH_SCALE), 0, 65535).astype(np.uint16)
    Image.fromarray(mm, mode="I;16").save(path)


def read_depth_png(path):
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise InputError(f"{path}: depth images must be single-channel")
    return arr / DEPTH_SCALE


def write_gray_png(path, values):
    Image.fromarray(np.clip(np.rint(values), 0, 255).astype(np.uint8), mode="L").save(path)


def read_gray_png(path):
    img = Image.open(path)
    if img.mode not in ("L", "I", "I;16"):
        img = img.convert("L")
    return np.asarray(img, dtype=np.float64)


def _numbered_pngs(directory):
    entries = []
    for name in os.listdir(directory):
        stem, ext = os.path.splitext(name)
        if ext.lower() != ".png":
            continue
        if not re.fullmatch(r"\d+", stem):
            raise InputError(f"{directory}: non-numeric frame name {name!r}")
        entries.append((int(stem), name))
    entries.sort()
    indices = [i for i, _ in entries]
    if len(set(indices)) != len(indices):
        raise InputError(f"{directory}: duplicate frame numbering")
    return entries


# ---------------------------------------------------------------------------
# sequence load / save


def load_sequence(directory, config: PipelineConfig | None = None) -> Sequence:
    """Load a sequence directory, applying the configured temporal stride.

    Values in the directory's ``sequence.cfg`` fill sequence parameters
    (noise variance, frame rate) unless the caller's config set them
    explicitly.
    """
    cfg = config if config is not None else PipelineConfig()
    intr_path = os.path.join(directory, "intrinsics.txt")
    if not os.path.isfile(intr_path):
        raise ConfigError(f"{directory}: missing intrinsics.txt")
    with open(intr_path, "r", encoding="utf-8") as fh:
        parts = fh.read().split()
    if len(parts) < 4:
        raise ConfigError(f"{intr_path}: expected 'fx fy cx cy'")
    fx, fy, cx, cy = (float(p) for p in parts[:4])

    seq_cfg = PipelineConfig()
    seq_cfg_path = os.path.join(directory, "sequence.cfg")
    if os.path.isfile(seq_cfg_path):
        seq_cfg.update_from_file(seq_cfg_path)
    sigma2 = cfg.sigma2 if "sigma2" in cfg.explicit or "sigma2" not in seq_cfg.explicit else seq_cfg.sigma2
    frame_rate = (
        cfg.frame_rate
        if "frame_rate" in cfg.explicit or "frame_rate" not in seq_cfg.explicit
        else seq_cfg.frame_rate
    )

    depth_dir = os.path.join(directory, "depth")
    if not os.path.isdir(depth_dir):
        raise InputError(f"{directory}: missing depth/ directory")
    entries = _numbered_pngs(depth_dir)
    if not entries:
        raise InputError(f"{depth_dir}: no depth frames")
    entries = entries[:: cfg.frame_stride]

    intens_dir = None
    for cand in ("intensity", "rgb"):
        if os.path.isdir(os.path.join(directory, cand)):
            intens_dir = os.path.join(directory, cand)
            break

    depths = []
    intensities = []
    for new_index, (_, name) in enumerate(entries):
        values = read_depth_png(os.path.join(depth_dir, name))
        depths.append(DepthImage(new_index, values))
        if intens_dir is not None:
            ipath = os.path.join(intens_dir, name)
            intensities.append(read_gray_png(ipath) if os.path.isfile(ipath) else None)
        else:
            intensities.append(None)

    h, w = depths[0].values.shape
    cam = CameraModel(fx, fy, cx, cy, w, h)
    return Sequence(
        depths,
        intensities,
        cam,
        frame_rate=frame_rate / cfg.frame_stride,
        sigma2=sigma2,
        name=os.path.basename(os.path.normpath(directory)),
    )


def save_sequence(seq: Sequence, directory):
    os.makedirs(os.path.join(directory, "depth"), exist_ok=True)
    if seq.has_intensity():
        os.makedirs(os.path.join(directory, "intensity"), exist_ok=True)
    for f, depth in enumerate(seq.depths):
        name = f"{f:06d}.png"
        write_depth_png(os.path.join(directory, "depth", name), depth.values)
        if seq.has_intensity():
            write_gray_png(os.path.join(directory, "intensity", name), seq.intensities[f])
    with open(os.path.join(directory, "intrinsics.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"{seq.cam.fx} {seq.cam.fy} {seq.cam.cx} {seq.cam.cy}\n")
    with open(os.path.join(directory, "sequence.cfg"), "w", encoding="utf-8") as fh:
        fh.write(f"sigma2 = {seq.sigma2!r}\nframe_rate = {seq.frame_rate!r}\n")


# ---------------------------------------------------------------------------
# label exports


def label_palette():
    """Deterministic 256-entry RGB palette keyed by label id."""
    pal = np.zeros((256, 3), dtype=np.uint8)
    for i in range(255):
        hue = (i * 0.61803398875) % 1.0
        r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.95)
        pal[i] = (int(r * 255), int(g * 255), int(b * 255))
    pal[NO_LABEL] = (0, 0, 0)
    return pal


def label_color(label_id):
    return label_palette()[label_id % 255]


def write_label_png(path, label_map):
    """Indexed 8-bit PNG; pixel value = label id, 255 = no data."""
    arr = np.asarray(label_map)
    out = np.where(arr < 0, NO_LABEL, arr).astype(np.uint8)
    img = Image.fromarray(out, mode="P")
    img.putpalette(label_palette().reshape(-1).tolist())
    img.save(path)


def read_label_png(path):
    arr = np.asarray(Image.open(path), dtype=np.int64)
    return np.where(arr == NO_LABEL, -1, arr)


def export_labels(label_maps, points, weights, label_ids, directory):
    """Write per-frame indexed label images plus the sparse weight table."""
    os.makedirs(directory, exist_ok=True)
    for f, lm in enumerate(label_maps):
        write_label_png(os.path.join(directory, f"{f:06d}.png"), lm)
    with open(os.path.join(directory, "weights.txt"), "w", encoding="utf-8") as fh:
        fh.write("# frame row col " + " ".join(f"w{i}" for i in label_ids) + "\n")
        for k in range(len(points.seed)):
            row, col = points.pixels[k]
            ws = " ".join(f"{v:.9g}" for v in weights[k])
            fh.write(f"{points.seed[k]} {row} {col} {ws}\n")


# ---------------------------------------------------------------------------
# point-cloud export (ASCII PLY)


def export_cloud(positions, normals, colors, labels, path):
    positions = np.asarray(positions, dtype=float)
    if len(positions) == 0:
        raise InputError("refusing to write an empty point cloud")
    normals = np.asarray(normals, dtype=float)
    colors = np.asarray(colors)
    labels = np.asarray(labels)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(positions)}\n")
        for prop in ("x", "y", "z", "nx", "ny", "nz"):
            fh.write(f"property float {prop}\n")
        for prop in ("red", "green", "blue"):
            fh.write(f"property uchar {prop}\n")
        fh.write("property int label\nend_header\n")
        for p, n, c, l in zip(positions, normals, colors, labels):
            fh.write(
                f"{p[0]:.7g} {p[1]:.7g} {p[2]:.7g} {n[0]:.7g} {n[1]:.7g} {n[2]:.7g} "
                f"{int(c[0])} {int(c[1])} {int(c[2])} {int(l)}\n"
            )


def read_ply(path):
    """Round-trip reader for clouds written by export_cloud."""
    with open(path, "r", encoding="utf-8") as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise InputError(f"{path}: not a PLY file")
        count = None
        while True:
            line = fh.readline()
            if not line:
                raise InputError(f"{path}: truncated header")
            line = line.strip()
            if line.startswith("element vertex"):
                count = int(line.split()[-1])
            if line == "end_header":
                break
        if count is None:
            raise InputError(f"{path}: missing vertex element")
        rows = [fh.readline().split() for _ in range(count)]
    data = np.array(rows, dtype=float)
    return {
        "positions": data[:, 0:3],
        "normals": data[:, 3:6],
        "colors": data[:, 6:9].astype(np.uint8),
        "labels": data[:, 9].astype(np.int64),
    }


# ---------------------------------------------------------------------------
# trajectory import/export: one line per track, `start_frame x0 y0 z0 x1 y1 z1 ...`


def read_trajectory_file(path):
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if (len(parts) - 1) % 3 != 0 or len(parts) < 7:
                raise InputError(f"{path}:{lineno}: expected 'start x y z x y z ...' with >= 2 points")
            start = int(parts[0])
            pos = np.array([float(v) for v in parts[1:]], dtype=float).reshape(-1, 3)
            out.append((start, pos))
    return out


def write_trajectory_file(path, tracks):
    with open(path, "w", encoding="utf-8") as fh:
        for start, pos in tracks:
            coords = " ".join(f"{v:.9g}" for v in np.asarray(pos, dtype=float).reshape(-1))
            fh.write(f"{start} {coords}\n")


# ---------------------------------------------------------------------------
# pose tables


def export_poses(hypotheses, path):
    """One line per (label, frame): label frame qw qx qy qz tx ty tz."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# label frame qw qx qy qz tx ty tz\n")
        for label in sorted(hypotheses):
            track = hypotheses[label]
            for f in range(track.num_frames):
                if not track.defined(f):
                    continue
                pose = track.pose(f)
                q = " ".join(f"{v:.12g}" for v in pose.q)
                t = " ".join(f"{v:.12g}" for v in pose.t)
                fh.write(f"{label} {f} {q} {t}\n")


def read_poses(path):
    """Inverse of export_poses: {label: {frame: (quat, trans)}}."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            label, frame = int(parts[0]), int(parts[1])
            q = np.array([float(v) for v in parts[2:6]])
            t = np.array([float(v) for v in parts[6:9]])
            out.setdefault(label, {})[frame] = (q, t)
    return out
