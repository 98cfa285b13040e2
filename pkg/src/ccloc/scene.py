"""Synthetic street scene with image-source multipath.

The layout is two perpendicular streets crossing at the origin, lined by
building facades (vertical walls). Propagation is LoS plus single-bounce
specular reflections, computed in the horizontal plane with the height
difference folded into the path length.
"""
import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .array_model import ArrayConfig, SPEED_OF_LIGHT, steering_vector

BS_MODES = ("los_dominant", "nlos_dominant")

_T_EPS = 1e-9


class SceneConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    street_length: float = 200.0
    street_width: float = 20.0
    wall_height: float = 25.0
    bs_mode: str = "los_dominant"
    n_bs: int = 4
    bs_height: float = 6.0
    ue_height: tuple = (1.0, 2.0)
    reflection_coeff: float = 0.6
    carrier_hz: float = 28e9
    bs_antennas: int = 64
    ue_antennas: int = 16
    # nlos_dominant only: a pillar of half-width `pillar_halfwidth` stands
    # `pillar_offset` metres in front of each street-end BS
    pillar_offset: float = 10.0
    pillar_halfwidth: float = 1.0
    bs_jitter: float = 1.0
    ue_margin: float = 0.5
    seed: int = 7

    def validate(self):
        problems = []
        if not self.street_length > 0:
            problems.append("street_length must be > 0")
        if not 0 < self.street_width < self.street_length:
            problems.append("street_width must be in (0, street_length)")
        if not self.wall_height > 0:
            problems.append("wall_height must be > 0")
        if self.bs_mode not in BS_MODES:
            problems.append(f"bs_mode must be one of {BS_MODES}")
        if not 1 <= int(self.n_bs) <= 4:
            problems.append("n_bs must be in 1..4")
        if not 0 < self.bs_height <= self.wall_height:
            problems.append("bs_height must be in (0, wall_height]")
        lo, hi = self.ue_height
        if not 0 < lo <= hi <= self.wall_height:
            problems.append("ue_height must satisfy 0 < lo <= hi <= wall_height")
        if not 0 < self.reflection_coeff <= 1:
            problems.append("reflection_coeff must be in (0, 1]")
        if not self.carrier_hz > 0:
            problems.append("carrier_hz must be > 0")
        if self.bs_antennas < 1 or self.ue_antennas < 1:
            problems.append("antenna counts must be >= 1")
        if not 0 <= self.bs_jitter < self.street_width / 2 - 2:
            problems.append("bs_jitter must be in [0, street_width/2 - 2)")
        if not 0 <= self.ue_margin < self.street_width / 2:
            problems.append("ue_margin must be in [0, street_width/2)")
        if self.bs_mode == "nlos_dominant":
            if not 0 < self.pillar_offset < self.street_length / 2 - self.street_width:
                problems.append("pillar_offset must be in (0, street_length/2 - street_width)")
            if not 0 < self.pillar_halfwidth < self.street_width / 2:
                problems.append("pillar_halfwidth must be in (0, street_width/2)")
        if problems:
            raise SceneConfigError("; ".join(problems))
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise SceneConfigError(f"unknown scene keys: {sorted(unknown)}")
        d = dict(d)
        if "ue_height" in d:
            d["ue_height"] = tuple(d["ue_height"])
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["ue_height"] = list(self.ue_height)
        return d


@dataclass(frozen=True)
class Wall:
    """Vertical rectangle: the 2-D segment p0-p1 extruded over [z_min, z_max]."""

    p0: tuple
    p1: tuple
    z_min: float
    z_max: float
    gamma: float = 0.6
    name: str = ""


@dataclass(frozen=True)
class BaseStation:
    id: int
    position: tuple
    array: ArrayConfig
    boresight: float


@dataclass(frozen=True)
class Scene:
    bounds: tuple  # ((xmin, ymin, zmin), (xmax, ymax, zmax))
    walls: tuple
    base_stations: tuple
    ue_array: ArrayConfig
    rng_seed: int
    streets: tuple = ()  # walkable rectangles (xmin, ymin, xmax, ymax)
    ue_height: tuple = (1.0, 2.0)
    ue_boresight: float = 0.0
    config: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        lo, hi = np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
        for bs in self.base_stations:
            p = np.asarray(bs.position)
            if np.any(p < lo) or np.any(p > hi):
                raise SceneConfigError(f"BS {bs.id} at {bs.position} lies outside scene bounds")
        if not self.base_stations:
            raise SceneConfigError("scene needs at least one base station")
        # vectorised wall table for visibility tests
        object.__setattr__(self, "_wall_p0", np.array([w.p0 for w in self.walls], float).reshape(-1, 2))
        object.__setattr__(self, "_wall_p1", np.array([w.p1 for w in self.walls], float).reshape(-1, 2))
        object.__setattr__(self, "_wall_z", np.array([(w.z_min, w.z_max) for w in self.walls], float).reshape(-1, 2))

    @property
    def wavelength(self):
        return self.ue_array.wavelength

    def bs(self, bs_id):
        for b in self.base_stations:
            if b.id == bs_id:
                return b
        raise KeyError(f"no base station with id {bs_id}")

    def contains(self, pos):
        p = np.asarray(pos, float)
        return bool(np.all(p >= np.asarray(self.bounds[0])) and np.all(p <= np.asarray(self.bounds[1])))

    def walkable(self, xy):
        x, y = xy[0], xy[1]
        return any(r[0] <= x <= r[2] and r[1] <= y <= r[3] for r in self.streets)

    def sample_ue(self, rng):
        """Uniform draw over the walkable street area (rejection sampling)."""
        (xmin, ymin, _), (xmax, ymax, _) = self.bounds
        while True:
            x, y = rng.uniform(xmin, xmax), rng.uniform(ymin, ymax)
            if self.walkable((x, y)):
                z = rng.uniform(*self.ue_height)
                return np.array([x, y, z])

    def to_dict(self):
        return {
            "format": "ccloc.scene",
            "format_version": 1,
            "bounds": [list(map(float, self.bounds[0])), list(map(float, self.bounds[1]))],
            "walls": [{"p0": list(map(float, w.p0)), "p1": list(map(float, w.p1)),
                       "z_min": float(w.z_min), "z_max": float(w.z_max),
                       "gamma": float(w.gamma), "name": w.name} for w in self.walls],
            "base_stations": [{"id": int(b.id), "position": list(map(float, b.position)),
                               "array": b.array.to_dict(), "boresight": float(b.boresight)}
                              for b in self.base_stations],
            "ue_array": self.ue_array.to_dict(),
            "ue_boresight": float(self.ue_boresight),
            "ue_height": list(map(float, self.ue_height)),
            "streets": [list(map(float, r)) for r in self.streets],
            "rng_seed": int(self.rng_seed),
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "ccloc.scene" or d.get("format_version") != 1:
            raise SceneConfigError("not a version-1 ccloc scene document")
        return cls(
            bounds=(tuple(d["bounds"][0]), tuple(d["bounds"][1])),
            walls=tuple(Wall(tuple(w["p0"]), tuple(w["p1"]), w["z_min"], w["z_max"],
                             w["gamma"], w.get("name", "")) for w in d["walls"]),
            base_stations=tuple(BaseStation(b["id"], tuple(b["position"]),
                                            ArrayConfig.from_dict(b["array"]), b["boresight"])
                                for b in d["base_stations"]),
            ue_array=ArrayConfig.from_dict(d["ue_array"]),
            rng_seed=d["rng_seed"],
            streets=tuple(tuple(r) for r in d["streets"]),
            ue_height=tuple(d["ue_height"]),
            ue_boresight=d["ue_boresight"],
            config=d.get("config", {}),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def save_scene(scene, path):
    with open(path, "w") as fh:
        fh.write(scene.to_json())
        fh.write("\n")


def load_scene(path):
    with open(path) as fh:
        return Scene.from_dict(json.load(fh))


def build_scene(config=None):
    """Deterministic crossing-streets scene for ``config`` (a :class:`SceneConfig`).

    ``los_dominant`` puts the BSs at the corners of the crossing, each array
    facing diagonally across the crossing so that two of the four streets lie
    within 45 degrees of its boresight (a ULA is blind near endfire). ``nlos_dominant`` puts them at the far end of each street
    facing the crossing, each with a narrow pillar in front that shadows the
    direct path down the street while the facade reflections get around it.
    """
    cfg = (config or SceneConfig()).validate()
    S, w, H = float(cfg.street_length), float(cfg.street_width), float(cfg.wall_height)
    half, hw = S / 2, w / 2
    gamma = float(cfg.reflection_coeff)
    wavelength = SPEED_OF_LIGHT / cfg.carrier_hz
    rng = np.random.default_rng(cfg.seed)

    walls = []
    for sx, tag_x in ((1, "E"), (-1, "W")):
        for sy, tag_y in ((1, "N"), (-1, "S")):
            walls.append(Wall((sx * hw, sy * hw), (sx * half, sy * hw), 0.0, H, gamma, f"facade_{tag_y}{tag_x}_h"))
            walls.append(Wall((sx * hw, sy * hw), (sx * hw, sy * half), 0.0, H, gamma, f"facade_{tag_y}{tag_x}_v"))

    # street directions: E, N, W, S
    dirs = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)]
    jitter = rng.uniform(-cfg.bs_jitter, cfg.bs_jitter, size=(4, 2))
    bs_array = ArrayConfig(int(cfg.bs_antennas), wavelength)
    stations = []
    for i in range(int(cfg.n_bs)):
        dx, dy = dirs[i]
        if cfg.bs_mode == "los_dominant":
            # corner of the crossing, facing the opposite corner
            corner = np.array([dx - dy, dy + dx]) * (hw - 2.0)
            xy = corner + jitter[i]
            boresight = np.arctan2(-corner[1], -corner[0])
        else:
            xy = np.array([dx, dy]) * (half - 3.0) + jitter[i]
            boresight = np.arctan2(-dy, -dx)
            centre = xy - cfg.pillar_offset * np.array([dx, dy])
            perp = np.array([-dy, dx]) * cfg.pillar_halfwidth
            walls.append(Wall(tuple(centre - perp), tuple(centre + perp), 0.0, H, gamma, f"pillar_{i}"))
        stations.append(BaseStation(i, (float(xy[0]), float(xy[1]), float(cfg.bs_height)),
                                    bs_array, float(boresight)))

    m = cfg.ue_margin
    streets = ((-half, -hw + m, half, hw - m), (-hw + m, -half, hw - m, half))
    return Scene(
        bounds=((-half, -half, 0.0), (half, half, H)),
        walls=tuple(walls),
        base_stations=tuple(stations),
        ue_array=ArrayConfig(int(cfg.ue_antennas), wavelength),
        rng_seed=int(cfg.seed),
        streets=streets,
        ue_height=tuple(float(v) for v in cfg.ue_height),
        config=cfg.to_dict(),
    )


@dataclass(frozen=True)
class PathSet:
    """Ground-truth multipath for one link, sorted by ascending delay."""

    aod: np.ndarray
    aoa: np.ndarray
    toa: np.ndarray
    gain: np.ndarray
    los: bool
    lengths: np.ndarray = None
    bounces: np.ndarray = None

    @property
    def n_paths(self):
        return len(self.toa)

    @property
    def connected(self):
        return self.n_paths > 0

    @classmethod
    def disconnected(cls):
        e = np.zeros(0)
        return cls(e, e, e, np.zeros(0, complex), False, e, np.zeros(0, int))


def wrap_angle(a):
    """Map to [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def _blocked(scene, a, b, skip=-1):
    """True if the 3-D segment a->b crosses any wall (other than ``skip``)."""
    p0, p1, zr = scene._wall_p0, scene._wall_p1, scene._wall_z
    if len(p0) == 0:
        return False
    d = b[:2] - a[:2]
    e = p1 - p0
    denom = d[0] * e[:, 1] - d[1] * e[:, 0]
    ap = p0 - a[:2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (ap[:, 0] * e[:, 1] - ap[:, 1] * e[:, 0]) / denom
        s = (ap[:, 0] * d[1] - ap[:, 1] * d[0]) / denom
        z = a[2] + t * (b[2] - a[2])  # parallel walls give nan here; masked below
    hit = ((np.abs(denom) > 1e-12) & (t > _T_EPS) & (t < 1 - _T_EPS)
           & (s >= 0) & (s <= 1) & (z >= zr[:, 0]) & (z <= zr[:, 1]))
    if 0 <= skip < len(hit):
        hit[skip] = False
    return bool(hit.any())


def reflection_point(wall, src, dst):
    """Specular point on ``wall`` for src->wall->dst in the horizontal plane.

    Returns the 2-D point, or None when no valid reflection exists (endpoints
    on opposite sides, or the point falls off the wall segment).
    """
    p0, p1 = np.asarray(wall.p0, float), np.asarray(wall.p1, float)
    seg = p1 - p0
    seg_len = np.hypot(*seg)
    u = seg / seg_len
    nrm = np.array([-u[1], u[0]])
    side_s = float(np.dot(src[:2] - p0, nrm))
    side_d = float(np.dot(dst[:2] - p0, nrm))
    if side_s * side_d <= 0 or abs(side_s) < 1e-12 or abs(side_d) < 1e-12:
        return None
    image = src[:2] - 2 * side_s * nrm
    t = -side_s / (-side_s - side_d)
    r = image + t * (dst[:2] - image)
    s = float(np.dot(r - p0, u)) / seg_len
    if not 0.0 <= s <= 1.0:
        return None
    return r


def compute_paths(scene, bs_id, ue_pos, max_paths=5):
    """Image-source multipath between base station ``bs_id`` and a UE.

    Returns at most ``max_paths`` paths (strongest by |gain|) sorted by
    delay, or :meth:`PathSet.disconnected` if nothing reaches the UE.
    """
    if max_paths < 1:
        raise ValueError("max_paths must be >= 1")
    ue = np.asarray(ue_pos, float)
    if not scene.contains(ue):
        raise ValueError(f"UE position {ue.tolist()} outside scene bounds")
    bs = scene.bs(bs_id)
    b = np.asarray(bs.position, float)
    lam = scene.wavelength
    dz = ue[2] - b[2]

    found = []  # (length, aoa_dir_xy, aod_dir_xy, bounces, gamma)
    if not _blocked(scene, b, ue):
        d2 = np.hypot(*(ue[:2] - b[:2]))
        found.append((np.hypot(d2, dz), ue[:2] - b[:2], b[:2] - ue[:2], 0, 1.0))
    for i, wall in enumerate(scene.walls):
        r = reflection_point(wall, b, ue)
        if r is None:
            continue
        d1 = np.hypot(*(r - b[:2]))
        d2 = np.hypot(*(ue[:2] - r))
        unfolded = d1 + d2
        zr = b[2] + dz * d1 / unfolded
        if not wall.z_min <= zr <= wall.z_max:
            continue
        r3 = np.array([r[0], r[1], zr])
        if _blocked(scene, b, r3, skip=i) or _blocked(scene, r3, ue, skip=i):
            continue
        found.append((np.hypot(unfolded, dz), r - b[:2], r - ue[:2], 1, wall.gamma))

    if not found:
        return PathSet.disconnected()

    lengths = np.array([f[0] for f in found])
    mags = np.array([lam / (4 * np.pi * f[0]) * f[4] ** f[3] for f in found])
    keep = np.argsort(-mags, kind="stable")[:max_paths]
    keep = keep[np.argsort(lengths[keep], kind="stable")]

    aoa = np.array([wrap_angle(np.arctan2(found[k][1][1], found[k][1][0]) - bs.boresight) for k in keep])
    aod = np.array([wrap_angle(np.arctan2(found[k][2][1], found[k][2][0]) - scene.ue_boresight) for k in keep])
    L = lengths[keep]
    phase = wrap_angle(-2 * np.pi * L / lam)
    gain = mags[keep] * np.exp(1j * phase)
    bounces = np.array([found[k][3] for k in keep], int)
    return PathSet(aod=aod, aoa=aoa, toa=L / SPEED_OF_LIGHT, gain=gain,
                   los=bool(np.any(bounces == 0)), lengths=L, bounces=bounces)


def synthesize_channel(pathset, bs_array, ue_array):
    """Per-path rank-1 channels ``beta_l a_r(phi_l) a_t(psi_l)^H``, shape (L, M, N)."""
    if not pathset.connected:
        raise ValueError("cannot synthesise a channel for a disconnected link")
    Ar = steering_vector(bs_array, pathset.aoa).reshape(bs_array.n_elements, -1)
    At = steering_vector(ue_array, pathset.aod).reshape(ue_array.n_elements, -1)
    return np.einsum("l,ml,nl->lmn", pathset.gain, Ar, At.conj())
