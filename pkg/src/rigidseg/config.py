"""Pipeline configuration: defaults, plain-text parsing and validation.

Config files are flat ``key = value`` text; '#' starts a comment. Every
tunable has a default so an empty file is valid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

from .errors import ConfigError


@dataclass
class PipelineConfig:
    # general
    seed: int = 0
    iterations: int = 7
    threads: int = 1
    frame_stride: int = 1
    frame_rate: float = 30.0
    sigma2: float = 1e-4  # sensor depth-noise variance, m^2

    # geometry
    normal_neighbors: int = 12
    sparse_voxel: float = 0.06
    clamp_mult: float = 5.0  # data-term clamp distance = clamp_mult * sigma

    # feature tracker
    track_min_length: int = 5
    track_max_length: int = 0  # 0 = unlimited
    track_max_features: int = 300
    track_patch: int = 7
    track_search_radius: int = 3
    track_pyramid_levels: int = 2
    track_fb_threshold: float = 0.5
    track_min_separation: float = 3.0
    track_depth_jump: float = 0.06  # per-frame depth step that cuts a track, m
    track_import: str = ""

    # trajectory soft clustering
    init_clusters: int = 10
    init_step_norm: float = 2.0
    init_max_iters: int = 200
    init_rel_tol: float = 1e-4
    init_jitter: float = 0.5

    # per-label motion refinement
    align_alpha: float = -1.0  # point-to-point balance; -1 = auto (2 * sigma2)
    icp_levels: int = 3
    icp_voxel_fine: float = 0.04
    icp_rounds_per_level: int = 3
    icp_dist_mult: float = 5.0  # correspondence rejection = mult * sigma
    icp_normal_angle_deg: float = 60.0
    icp_min_mass: float = 3.0
    icp_weight_floor: float = 0.05  # ignore correspondences with w_max below this
    icp_max_corr: int = 800  # per-pair correspondence cap (deterministic subsample)
    loop_budget: int = -1  # -1 = auto: max(4, frames // 10); 0 disables
    lm_max_iters: int = 100
    lm_rel_tol: float = 1e-8

    # label optimization
    like_floor: float = 1e-3
    inc_alpha: float = 0.5
    frame_budget: int = 12
    k_adjacent: int = 2
    graph_k1: int = 8
    graph_k2: int = 6
    smooth_weight: float = 1.0
    swap_max_sweeps: int = 8

    # label lifecycle
    lifecycle: bool = True
    event_top_k: int = 2
    event_box_width: int = 3
    usage_threshold: float = 0.005
    transfer_neighbors: int = 4

    # sparse-to-dense interpolation
    interp_neighbors: int = 8
    interp_bandwidth_mult: float = 1.0

    # post-processing
    fuse_max_increase: float = 0.02
    accumulate_target: int = -1  # -1 = middle frame

    # reporting
    snapshots: bool = True

    explicit: set = field(default_factory=set, repr=False, compare=False)

    # derived quantities -----------------------------------------------------

    def sigma(self):
        return math.sqrt(self.sigma2)

    def clamp_dist(self):
        return self.clamp_mult * self.sigma()

    def icp_reject_dist(self):
        return self.icp_dist_mult * self.sigma()

    def resolved_align_alpha(self):
        # the non-squared point term has constant gradient alpha, so it must
        # sit at the noise scale or it drowns the squared plane term
        return 2.0 * self.sigma2 if self.align_alpha < 0 else self.align_alpha

    def interp_bandwidth(self):
        return self.interp_bandwidth_mult * self.sparse_voxel

    def resolved_loop_budget(self, num_frames):
        if self.loop_budget >= 0:
            return self.loop_budget
        return max(4, num_frames // 10)

    # parsing / validation ----------------------------------------------------

    def set(self, key, raw, source="config"):
        ftypes = {f.name: f.type for f in fields(self) if f.name != "explicit"}
        if key not in ftypes:
            raise ConfigError(f"{source}: unknown config key '{key}'")
        ftype = ftypes[key]
        value = raw
        try:
            if ftype in ("bool", bool):
                if isinstance(raw, str):
                    low = raw.strip().lower()
                    if low in ("1", "true", "yes", "on"):
                        value = True
                    elif low in ("0", "false", "no", "off"):
                        value = False
                    else:
                        raise ValueError(raw)
                else:
                    value = bool(raw)
            elif ftype in ("int", int):
                value = int(str(raw).strip(), 0)
            elif ftype in ("float", float):
                value = float(raw)
            else:
                value = str(raw).strip()
        except (TypeError, ValueError):
            raise ConfigError(f"{source}: config key '{key}': cannot parse value {raw!r}") from None
        setattr(self, key, value)
        self.explicit.add(key)

    def update_from_text(self, text, source="config"):
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
            key, _, raw = line.partition("=")
            self.set(key.strip(), raw.strip(), source=f"{source}:{lineno}")
        return self

    def update_from_file(self, path):
        with open(path, "r", encoding="utf-8") as fh:
            return self.update_from_text(fh.read(), source=str(path))

    @classmethod
    def from_file(cls, path):
        cfg = cls()
        cfg.update_from_file(path)
        cfg.validate()
        return cfg

    def validate(self):
        checks = [
            ("seed", self.seed >= 0, ">= 0"),
            ("iterations", self.iterations >= 1, ">= 1"),
            ("threads", self.threads >= 1, ">= 1"),
            ("frame_stride", self.frame_stride >= 1, ">= 1"),
            ("frame_rate", self.frame_rate > 0, "> 0"),
            ("sigma2", self.sigma2 > 0, "> 0"),
            ("normal_neighbors", self.normal_neighbors >= 3, ">= 3"),
            ("sparse_voxel", self.sparse_voxel > 0, "> 0"),
            ("clamp_mult", self.clamp_mult > 0, "> 0"),
            ("track_min_length", self.track_min_length >= 2, ">= 2"),
            ("track_max_length", self.track_max_length >= 0, ">= 0"),
            ("track_max_features", self.track_max_features >= 1, ">= 1"),
            ("track_patch", self.track_patch >= 3 and self.track_patch % 2 == 1, "odd, >= 3"),
            ("track_search_radius", self.track_search_radius >= 1, ">= 1"),
            ("track_pyramid_levels", self.track_pyramid_levels >= 1, ">= 1"),
            ("track_fb_threshold", self.track_fb_threshold > 0, "> 0"),
            ("track_min_separation", self.track_min_separation > 0, "> 0"),
            ("track_depth_jump", self.track_depth_jump > 0, "> 0"),
            ("init_clusters", self.init_clusters >= 1, ">= 1"),
            ("init_step_norm", self.init_step_norm > 0, "> 0"),
            ("init_max_iters", self.init_max_iters >= 1, ">= 1"),
            ("init_rel_tol", self.init_rel_tol > 0, "> 0"),
            ("init_jitter", 0 <= self.init_jitter < 1, "in [0, 1)"),
            ("align_alpha", self.align_alpha >= 0 or self.align_alpha == -1.0, ">= 0, or -1 for auto"),
            ("icp_levels", self.icp_levels >= 1, ">= 1"),
            ("icp_voxel_fine", self.icp_voxel_fine > 0, "> 0"),
            ("icp_rounds_per_level", self.icp_rounds_per_level >= 1, ">= 1"),
            ("icp_dist_mult", self.icp_dist_mult > 0, "> 0"),
            ("icp_normal_angle_deg", 0 < self.icp_normal_angle_deg <= 180, "in (0, 180]"),
            ("icp_min_mass", self.icp_min_mass > 0, "> 0"),
            ("icp_weight_floor", 0 <= self.icp_weight_floor < 1, "in [0, 1)"),
            ("icp_max_corr", self.icp_max_corr >= 10, ">= 10"),
            ("loop_budget", self.loop_budget >= -1, ">= -1"),
            ("lm_max_iters", self.lm_max_iters >= 1, ">= 1"),
            ("lm_rel_tol", self.lm_rel_tol > 0, "> 0"),
            ("like_floor", 0 < self.like_floor < 1, "in (0, 1)"),
            ("inc_alpha", self.inc_alpha >= 0, ">= 0"),
            ("k_adjacent", self.k_adjacent >= 0, ">= 0"),
            ("frame_budget", self.frame_budget >= 2 * self.k_adjacent, ">= 2 * k_adjacent"),
            ("graph_k1", self.graph_k1 >= 1, ">= 1"),
            ("graph_k2", self.graph_k2 >= 0, ">= 0"),
            ("smooth_weight", self.smooth_weight >= 0, ">= 0"),
            ("swap_max_sweeps", self.swap_max_sweeps >= 1, ">= 1"),
            ("event_top_k", self.event_top_k >= 0, ">= 0"),
            (
                "event_box_width",
                self.event_box_width >= 1 and self.event_box_width % 2 == 1,
                "odd, >= 1",
            ),
            ("usage_threshold", 0 < self.usage_threshold < 1, "in (0, 1)"),
            ("transfer_neighbors", self.transfer_neighbors >= 1, ">= 1"),
            ("interp_neighbors", self.interp_neighbors >= 1, ">= 1"),
            ("interp_bandwidth_mult", self.interp_bandwidth_mult > 0, "> 0"),
            ("fuse_max_increase", self.fuse_max_increase >= 0, ">= 0"),
            ("accumulate_target", self.accumulate_target >= -1, ">= -1"),
        ]
        for key, ok, rule in checks:
            if not ok:
                raise ConfigError(f"config key '{key}' = {getattr(self, key)!r}: must be {rule}")
        return self

    def to_text(self):
        lines = []
        for f in fields(self):
            if f.name == "explicit":
                continue
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"
