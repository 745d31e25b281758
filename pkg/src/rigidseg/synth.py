"""Synthetic RGB-D sequences with scripted rigid motions, plus evaluation
metrics against the generated ground truth.

Scenes are ray-cast analytically from plane/box/sphere primitives, each
carrying a per-frame world pose and a procedural intensity texture (so the
block-matching tracker has something to grip). Depth gets additive
Gaussian noise, seeded and deterministic.

Scene script text format (whitespace tokens, '#' comments)::

    frames 30
    size 64 48
    intrinsics 55 55 32 24
    noise 0.005
    seed 3
    camera
      start 0 0 0  0 0 0          # tx ty tz  axis-angle degrees
      orbit 0 29  0 0 1.2  0 1 0  3
    object plane 2.4 1.8 texture 1
      start 0 0 1.35  0 0 0
    object box 0.3 0.3 0.3 texture 2
      start -0.2 0 1.05  0 0 0
      vel 0 14  0.006 0 0         # world m/frame for transitions f0 <= f < f1
      spin 15 29  0 1.5 0         # deg/frame about the object origin

`vel`/`spin`/`orbit` apply to the transitions ``f -> f+1`` for
``f0 <= f < f1``; `orbit` rotates about an axis anchored at a world point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InputError
from .geometry import CameraModel, DepthImage, PoseTrack, rotvec_to_matrix
from .sequence_io import Sequence, save_sequence, write_label_png, read_label_png, export_poses, read_poses
import os


# ---------------------------------------------------------------------------
# pose programs


class PoseProgram:
    """Builds per-frame world poses from start pose + motion commands."""

    def __init__(self, num_frames):
        self.num_frames = num_frames
        self.R0 = np.eye(3)
        self.t0 = np.zeros(3)
        self.commands = []

    def start(self, translation, rotvec_deg=(0, 0, 0)):
        self.t0 = np.asarray(translation, dtype=float)
        self.R0 = rotvec_to_matrix(np.radians(rotvec_deg))
        return self

    def vel(self, f0, f1, v):
        self.commands.append(("vel", f0, f1, np.asarray(v, dtype=float)))
        return self

    def spin(self, f0, f1, w_deg):
        self.commands.append(("spin", f0, f1, rotvec_to_matrix(np.radians(w_deg))))
        return self

    def orbit(self, f0, f1, center, axis, deg_per_frame):
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        Rd = rotvec_to_matrix(np.radians(deg_per_frame) * axis)
        self.commands.append(("orbit", f0, f1, (np.asarray(center, dtype=float), Rd)))
        return self

    def build(self):
        F = self.num_frames
        R = np.tile(np.eye(3), (F, 1, 1))
        t = np.zeros((F, 3))
        R[0], t[0] = self.R0, self.t0
        for f in range(F - 1):
            Rf, tf = R[f].copy(), t[f].copy()
            for kind, f0, f1, arg in self.commands:
                if not (f0 <= f < f1):
                    continue
                if kind == "vel":
                    tf = tf + arg
                elif kind == "spin":
                    Rf = Rf @ arg
                elif kind == "orbit":
                    c, Rd = arg
                    Rf = Rd @ Rf
                    tf = Rd @ (tf - c) + c
            R[f + 1], t[f + 1] = Rf, tf
        return R, t


@dataclass
class Primitive:
    kind: str  # plane | box | sphere
    dims: tuple
    texture_seed: int
    R: np.ndarray  # (F, 3, 3) local -> world
    t: np.ndarray  # (F, 3)


@dataclass
class SceneScript:
    cam: CameraModel
    num_frames: int
    primitives: list
    cam_R: np.ndarray = None  # camera -> world
    cam_t: np.ndarray = None
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.cam_R is None:
            self.cam_R = np.tile(np.eye(3), (self.num_frames, 1, 1))
        if self.cam_t is None:
            self.cam_t = np.zeros((self.num_frames, 3))
        if self.noise_sigma < 0:
            raise InputError("noise sigma must be >= 0")
        for p in self.primitives:
            if len(p.R) != self.num_frames:
                raise InputError("primitive motions must cover all frames")


@dataclass
class GroundTruth:
    """Per-pixel object ids (-1 = background) and per-object camera-frame poses."""

    id_maps: list
    R: np.ndarray  # (M, F, 3, 3) object-local -> camera-f
    t: np.ndarray  # (M, F, 3)

    @property
    def num_objects(self):
        return self.R.shape[0]

    @property
    def num_frames(self):
        return self.R.shape[1]

    def pose_track(self, obj) -> PoseTrack:
        return PoseTrack(self.num_frames, self.R[obj].copy(), self.t[obj].copy())

    def relative(self, obj, i, j):
        R = self.R[obj, j] @ self.R[obj, i].T
        t = self.t[obj, j] - R @ self.t[obj, i]
        return R, t


# ---------------------------------------------------------------------------
# ray casting


def _intersect(kind, dims, o, D):
    """Ray parameters s >= 0 (inf = miss) for rays o + s*D in local coords."""
    n = len(D)
    s = np.full(n, np.inf)
    tiny = 1e-12
    if kind == "plane":
        lx, ly = dims[0], dims[1]
        dz = D[:, 2]
        good = np.abs(dz) > tiny
        cand = np.where(good, -o[2] / np.where(good, dz, 1.0), np.inf)
        pt = o[None, :] + cand[:, None] * D
        inside = (np.abs(pt[:, 0]) <= lx / 2) & (np.abs(pt[:, 1]) <= ly / 2)
        hit = good & inside & (cand > 1e-6)
        s[hit] = cand[hit]
    elif kind == "box":
        half = np.array(dims[:3]) / 2.0
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / D
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tmax >= tmin) & (tmin > 1e-6)
        s[hit] = tmin[hit]
    elif kind == "sphere":
        r = dims[0]
        A = np.einsum("ni,ni->n", D, D)
        B = D @ o
        C = o @ o - r * r
        disc = B * B - A * C
        good = disc >= 0
        sq = np.sqrt(np.where(good, disc, 0.0))
        s1 = (-B - sq) / A
        s2 = (-B + sq) / A
        cand = np.where(s1 > 1e-6, s1, s2)
        hit = good & (cand > 1e-6)
        s[hit] = cand[hit]
    else:
        raise InputError(f"unknown primitive kind {kind!r}")
    return s


def _texture(points_local, seed):
    rng = np.random.default_rng(seed)
    val = np.full(len(points_local), rng.uniform(100, 150))
    for _ in range(4):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        freq = rng.uniform(5.0, 22.0)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(12.0, 30.0)
        val += amp * np.sin(2 * np.pi * freq * (points_local @ direction) + phase)
    cell = 0.04
    parity = np.floor(points_local / cell).astype(np.int64).sum(axis=1) % 2
    val += np.where(parity == 0, 12.0, -12.0)
    return np.clip(val, 5.0, 250.0)


def render_sequence(script: SceneScript):
    """Ray-cast the script into a Sequence plus its GroundTruth."""
    cam = script.cam
    F = script.num_frames
    M = len(script.primitives)
    rays = cam.pixel_rays()  # (h*w, 3), camera coords, dz = 1
    n_pix = len(rays)
    rng = np.random.default_rng(script.seed)

    depths = []
    intensities = []
    id_maps = []
    gtR = np.zeros((M, F, 3, 3))
    gtt = np.zeros((M, F, 3))

    for f in range(F):
        Rc, tc = script.cam_R[f], script.cam_t[f]
        D_world = rays @ Rc.T
        depth_all = np.full((M, n_pix), np.inf)
        for m, prim in enumerate(script.primitives):
            Ro, to = prim.R[f], prim.t[f]
            o_local = Ro.T @ (tc - to)
            D_local = D_world @ Ro
            depth_all[m] = _intersect(prim.kind, prim.dims, o_local, D_local)
            gtR[m, f] = Rc.T @ Ro
            gtt[m, f] = Rc.T @ (to - tc)
        best = np.argmin(depth_all, axis=0)
        depth = depth_all[best, np.arange(n_pix)]
        valid = np.isfinite(depth)
        ids = np.where(valid, best, -1).astype(np.int64)

        intensity = np.full(n_pix, 0.0)
        for m, prim in enumerate(script.primitives):
            sel = valid & (ids == m)
            if not np.any(sel):
                continue
            pts_world = tc + depth[sel, None] * D_world[sel]
            pts_local = (pts_world - prim.t[f]) @ prim.R[f]
            intensity[sel] = _texture(pts_local, prim.texture_seed)

        depth = np.where(valid, depth, 0.0)
        if script.noise_sigma > 0:
            noise = rng.normal(0.0, script.noise_sigma, n_pix)
            depth = np.where(valid, np.maximum(depth + noise, 1e-3), 0.0)

        depths.append(DepthImage(f, depth.reshape(cam.height, cam.width)))
        intensities.append(intensity.reshape(cam.height, cam.width))
        id_maps.append(ids.reshape(cam.height, cam.width))

    seq = Sequence(
        depths,
        intensities,
        cam,
        frame_rate=10.0,
        sigma2=max(script.noise_sigma**2, 1e-8),
        name="synthetic",
    )
    return seq, GroundTruth(id_maps, gtR, gtt)


def render_to_dir(script: SceneScript, directory):
    seq, gt = render_sequence(script)
    save_sequence(seq, directory)
    gt_dir = os.path.join(directory, "gt_labels")
    os.makedirs(gt_dir, exist_ok=True)
    for f, ids in enumerate(gt.id_maps):
        write_label_png(os.path.join(gt_dir, f"{f:06d}.png"), ids)
    tracks = {m: gt.pose_track(m) for m in range(gt.num_objects)}
    export_poses(tracks, os.path.join(directory, "gt_poses.txt"))
    return seq, gt


def load_ground_truth(directory, num_frames=None):
    gt_dir = os.path.join(directory, "gt_labels")
    if not os.path.isdir(gt_dir):
        raise InputError(f"{directory}: missing gt_labels/")
    names = sorted(os.listdir(gt_dir))
    id_maps = [read_label_png(os.path.join(gt_dir, n)) for n in names if n.endswith(".png")]
    poses = read_poses(os.path.join(directory, "gt_poses.txt"))
    objs = sorted(poses)
    F = num_frames or len(id_maps)
    M = len(objs)
    R = np.zeros((M, F, 3, 3))
    t = np.zeros((M, F, 3))
    from .geometry import quat_to_matrix

    for m, obj in enumerate(objs):
        for f in range(F):
            q, tv = poses[obj][f]
            R[m, f] = quat_to_matrix(q)
            t[m, f] = tv
    return GroundTruth(id_maps[:F], R, t)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MatchResult:
    accuracy: float
    matching: dict  # label id -> object id
    per_object: dict  # object id -> fraction of its pixels correct
    total: int


def segmentation_accuracy(pred_maps, gt_maps) -> MatchResult:
    """Pixel accuracy under the best one-to-one label-to-object matching.

    One global matching over all frames (not per frame), so temporally
    inconsistent labelings are penalized.
    """
    if len(pred_maps) != len(gt_maps):
        raise InputError("prediction and ground truth must cover the same frames")
    labels = set()
    objects = set()
    for pm, gm in zip(pred_maps, gt_maps):
        mask = (np.asarray(pm) >= 0) & (np.asarray(gm) >= 0)
        labels.update(np.unique(np.asarray(pm)[mask]).tolist())
        objects.update(np.unique(np.asarray(gm)[mask]).tolist())
    labels = sorted(labels)
    objects = sorted(objects)
    if not labels or not objects:
        return MatchResult(0.0, {}, {}, 0)
    li = {l: i for i, l in enumerate(labels)}
    oi = {o: i for i, o in enumerate(objects)}
    C = np.zeros((len(labels), len(objects)), dtype=np.int64)
    total = 0
    for pm, gm in zip(pred_maps, gt_maps):
        pm = np.asarray(pm)
        gm = np.asarray(gm)
        mask = (pm >= 0) & (gm >= 0)
        total += int(mask.sum())
        pl = np.array([li[v] for v in pm[mask]])
        gl = np.array([oi[v] for v in gm[mask]])
        np.add.at(C, (pl, gl), 1)
    size = max(len(labels), len(objects))
    padded = np.zeros((size, size), dtype=np.int64)
    padded[: len(labels), : len(objects)] = C
    rows, cols = linear_sum_assignment(-padded)
    matching = {}
    correct = 0
    for r, c in zip(rows, cols):
        if r < len(labels) and c < len(objects) and padded[r, c] > 0:
            matching[labels[r]] = objects[c]
            correct += int(padded[r, c])
    gt_totals = C.sum(axis=0)
    per_object = {}
    for o in objects:
        hit = 0
        for l, ob in matching.items():
            if ob == o:
                hit = int(C[li[l], oi[o]])
        per_object[o] = hit / gt_totals[oi[o]] if gt_totals[oi[o]] else 0.0
    return MatchResult(correct / total if total else 0.0, matching, per_object, total)


@dataclass
class MotionErrors:
    rot_deg: np.ndarray
    trans: np.ndarray
    valid: np.ndarray
    skipped: int

    @property
    def max_rot_deg(self):
        return float(self.rot_deg[self.valid].max()) if self.valid.any() else np.inf

    @property
    def mean_rot_deg(self):
        return float(self.rot_deg[self.valid].mean()) if self.valid.any() else np.inf

    @property
    def max_trans(self):
        return float(self.trans[self.valid].max()) if self.valid.any() else np.inf

    @property
    def mean_trans(self):
        return float(self.trans[self.valid].mean()) if self.valid.any() else np.inf


def motion_error(track: PoseTrack, gt_R, gt_t, anchor=None, center=None) -> MotionErrors:
    """Per-frame pose error of estimated relative motions against ground truth.

    Both motions are anchored at the same frame; translation error is
    measured at ``center`` (anchor-frame coords), default the origin.
    """
    F = track.num_frames
    if anchor is None:
        anchor = (track.support[0] + track.support[1]) // 2
    c = np.zeros(3) if center is None else np.asarray(center, dtype=float)
    rot = np.zeros(F)
    trans = np.zeros(F)
    valid = np.zeros(F, dtype=bool)
    skipped = 0
    for f in range(F):
        if not track.defined(f):
            skipped += 1
            continue
        Re, te = track.relative_Rt(anchor, f)
        Rg = gt_R[f] @ gt_R[anchor].T
        tg = gt_t[f] - Rg @ gt_t[anchor]
        Rerr = Re @ Rg.T
        cosang = np.clip((np.trace(Rerr) - 1) / 2, -1.0, 1.0)
        rot[f] = np.degrees(np.arccos(cosang))
        trans[f] = np.linalg.norm((Re @ c + te) - (Rg @ c + tg))
        valid[f] = True
    return MotionErrors(rot, trans, valid, skipped)


# ---------------------------------------------------------------------------
# script text parser


def parse_script(text) -> SceneScript:
    frames = None
    size = None
    intr = None
    noise = 0.0
    seed = 0
    blocks = []  # (kind, dims, tex, program)
    cam_prog = None
    current = None

    def require_block():
        if current is None:
            raise InputError("script: motion command outside camera/object block")
        return current

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        key = tok[0]
        try:
            if key == "frames":
                frames = int(tok[1])
            elif key == "size":
                size = (int(tok[1]), int(tok[2]))
            elif key == "intrinsics":
                intr = tuple(float(v) for v in tok[1:5])
            elif key == "noise":
                noise = float(tok[1])
            elif key == "seed":
                seed = int(tok[1])
            elif key == "camera":
                if frames is None:
                    raise InputError("script: 'frames' must come before blocks")
                cam_prog = PoseProgram(frames)
                current = cam_prog
            elif key == "object":
                if frames is None:
                    raise InputError("script: 'frames' must come before blocks")
                kind = tok[1]
                ndims = {"plane": 2, "box": 3, "sphere": 1}.get(kind)
                if ndims is None:
                    raise InputError(f"script:{lineno}: unknown primitive {kind!r}")
                dims = tuple(float(v) for v in tok[2 : 2 + ndims])
                tex = seed + len(blocks) + 1
                rest = tok[2 + ndims :]
                if rest[:1] == ["texture"]:
                    tex = int(rest[1])
                prog = PoseProgram(frames)
                blocks.append((kind, dims, tex, prog))
                current = prog
            elif key == "start":
                require_block().start([float(v) for v in tok[1:4]], [float(v) for v in tok[4:7]])
            elif key == "vel":
                require_block().vel(int(tok[1]), int(tok[2]), [float(v) for v in tok[3:6]])
            elif key == "spin":
                require_block().spin(int(tok[1]), int(tok[2]), [float(v) for v in tok[3:6]])
            elif key == "orbit":
                require_block().orbit(
                    int(tok[1]),
                    int(tok[2]),
                    [float(v) for v in tok[3:6]],
                    [float(v) for v in tok[6:9]],
                    float(tok[9]),
                )
            else:
                raise InputError(f"script:{lineno}: unknown directive {key!r}")
        except (IndexError, ValueError) as exc:
            raise InputError(f"script:{lineno}: malformed line {raw!r}") from exc

    if frames is None or size is None or intr is None:
        raise InputError("script must set frames, size and intrinsics")
    if not blocks:
        raise InputError("script must define at least one object")
    cam = CameraModel(intr[0], intr[1], intr[2], intr[3], size[0], size[1])
    cam_R, cam_t = (cam_prog or PoseProgram(frames)).build()
    primitives = []
    for kind, dims, tex, prog in blocks:
        R, t = prog.build()
        primitives.append(Primitive(kind, dims, tex, R, t))
    return SceneScript(cam, frames, primitives, cam_R, cam_t, noise, seed)


def load_script(path) -> SceneScript:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_script(fh.read())
