"""Procedural object assets, surface point clouds, tabletop poses and splits.

Objects are unions of analytic primitives (box, cylinder, sphere, cone) so
surface sampling, settling and visibility all have closed forms. A category
is a primitive-kind template; instances within a category differ by size
jitter. Poses are rotate-then-settle: uniform rotation, xy in a disk, z
chosen so the lowest cloud point touches the table plane z = 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rotation import quat_rotate, random_quat

PRIMITIVE_KINDS = ("box", "cylinder", "sphere", "cone")


@dataclass(frozen=True)
class Primitive:
    """One analytic solid: kind, size parameters (m), local offset (m)."""

    kind: str
    size: tuple[float, ...]
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if self.kind not in PRIMITIVE_KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if any(s <= 0 for s in self.size):
            raise ValueError(f"degenerate {self.kind}: size {self.size}")


@dataclass
class ObjectAsset:
    """Procedural object: primitives plus a canonical surface cloud."""

    asset_id: int
    category_id: int
    primitives: tuple[Primitive, ...]
    canonical_cloud: np.ndarray          # (N, 3) float64, f32-representable
    extent: float                        # max radius from centroid
    seed: int

    @property
    def n_points(self) -> int:
        return self.canonical_cloud.shape[0]


@dataclass(frozen=True)
class TabletopPose:
    rotation: np.ndarray                 # unit quaternion (w, x, y, z)
    translation: np.ndarray              # (3,), z settles cloud onto z = 0
    seed: int


@dataclass
class PoseSplits:
    train: list[TabletopPose] = field(default_factory=list)
    generation: list[TabletopPose] = field(default_factory=list)
    evaluation: list[TabletopPose] = field(default_factory=list)


# ---------------------------------------------------------------------------
# analytic geometry


def _faces(prim: Primitive) -> list[float]:
    """Surface areas of the primitive's faces, in a fixed face order."""
    if prim.kind == "box":
        a, b, c = prim.size
        return [b * c, b * c, a * c, a * c, a * b, a * b]   # ±x, ±y, ±z
    if prim.kind == "cylinder":
        r, h = prim.size
        return [2 * np.pi * r * h, np.pi * r * r, np.pi * r * r]   # lateral, +z, -z
    if prim.kind == "sphere":
        (r,) = prim.size
        return [4 * np.pi * r * r]
    if prim.kind == "cone":
        r, h = prim.size
        return [np.pi * r * np.hypot(r, h), np.pi * r * r]   # lateral, base
    raise AssertionError(prim.kind)


def _sample_face(prim: Primitive, face: int, u: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Points on one face; u uniform (m, 3), g standard normal (m, 3)."""
    m = u.shape[0]
    out = np.zeros((m, 3))
    if prim.kind == "box":
        a, b, c = prim.size
        axis, sign = face // 2, 1.0 if face % 2 == 0 else -1.0
        half = np.array([a, b, c]) / 2.0
        spans = [i for i in range(3) if i != axis]
        out[:, axis] = sign * half[axis]
        out[:, spans[0]] = (u[:, 0] - 0.5) * 2 * half[spans[0]]
        out[:, spans[1]] = (u[:, 1] - 0.5) * 2 * half[spans[1]]
    elif prim.kind == "cylinder":
        r, h = prim.size
        theta = 2 * np.pi * u[:, 0]
        if face == 0:
            out[:, 0] = r * np.cos(theta)
            out[:, 1] = r * np.sin(theta)
            out[:, 2] = (u[:, 1] - 0.5) * h
        else:
            rho = r * np.sqrt(u[:, 1])
            out[:, 0] = rho * np.cos(theta)
            out[:, 1] = rho * np.sin(theta)
            out[:, 2] = h / 2.0 if face == 1 else -h / 2.0
    elif prim.kind == "sphere":
        (r,) = prim.size
        out = g / np.linalg.norm(g, axis=1, keepdims=True) * r
    elif prim.kind == "cone":
        r, h = prim.size
        theta = 2 * np.pi * u[:, 0]
        if face == 0:
            t = np.sqrt(u[:, 1])          # fraction of slant from the apex
            rho = r * t
            out[:, 0] = rho * np.cos(theta)
            out[:, 1] = rho * np.sin(theta)
            out[:, 2] = h / 2.0 - h * t
        else:
            rho = r * np.sqrt(u[:, 1])
            out[:, 0] = rho * np.cos(theta)
            out[:, 1] = rho * np.sin(theta)
            out[:, 2] = -h / 2.0
    return out + np.asarray(prim.offset)


def strictly_inside(points: np.ndarray, prim: Primitive, eps: float = 1e-9) -> np.ndarray:
    """Boolean mask: point lies strictly inside the primitive volume."""
    p = np.atleast_2d(points) - np.asarray(prim.offset)
    if prim.kind == "box":
        half = np.asarray(prim.size) / 2.0
        return np.all(np.abs(p) < half - eps, axis=1)
    if prim.kind == "sphere":
        (r,) = prim.size
        return np.linalg.norm(p, axis=1) < r - eps
    rho = np.hypot(p[:, 0], p[:, 1])
    if prim.kind == "cylinder":
        r, h = prim.size
        return (np.abs(p[:, 2]) < h / 2.0 - eps) & (rho < r - eps)
    if prim.kind == "cone":
        r, h = prim.size
        rho_max = r * (h / 2.0 - p[:, 2]) / h
        return (np.abs(p[:, 2]) < h / 2.0 - eps) & (rho < rho_max - eps)
    raise AssertionError(prim.kind)


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2D point-to-segment distances; p is (m, 2)."""
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(p - closest, axis=1)


def surface_distance(points: np.ndarray, prim: Primitive) -> np.ndarray:
    """Unsigned distance from points to the primitive's surface."""
    p = np.atleast_2d(points) - np.asarray(prim.offset)
    if prim.kind == "sphere":
        (r,) = prim.size
        return np.abs(np.linalg.norm(p, axis=1) - r)
    if prim.kind == "box":
        half = np.asarray(prim.size) / 2.0
        q = np.abs(p) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return np.abs(outside + inside)
    rho = np.hypot(p[:, 0], p[:, 1])
    rz = np.stack([rho, p[:, 2]], axis=1)
    if prim.kind == "cylinder":
        r, h = prim.size
        profile = [((0.0, -h / 2), (r, -h / 2)), ((r, -h / 2), (r, h / 2)), ((r, h / 2), (0.0, h / 2))]
    elif prim.kind == "cone":
        r, h = prim.size
        profile = [((0.0, -h / 2), (r, -h / 2)), ((r, -h / 2), (0.0, h / 2))]
    else:
        raise AssertionError(prim.kind)
    dists = [_segment_distance(rz, np.asarray(a), np.asarray(b)) for a, b in profile]
    return np.min(np.stack(dists, axis=1), axis=1)


def union_surface_distance(points: np.ndarray, primitives: tuple[Primitive, ...]) -> np.ndarray:
    """Distance to the nearest primitive surface of the union."""
    return np.min(
        np.stack([surface_distance(points, prim) for prim in primitives], axis=1), axis=1
    )


# ---------------------------------------------------------------------------
# sampling


def sample_surface_points(
    primitives: tuple[Primitive, ...] | list[Primitive], n: int, seed: int
) -> np.ndarray:
    """Area-weighted uniform sample of n points on the union surface.

    Candidate points that fall strictly inside another primitive are
    rejected, so buried faces never contribute. Deterministic given seed.
    """
    if n < 4:
        raise ValueError(f"need n >= 4 points, got {n}")
    primitives = tuple(primitives)
    faces = []
    for pi, prim in enumerate(primitives):
        for fi, area in enumerate(_faces(prim)):
            faces.append((pi, fi, area))
    areas = np.array([a for _, _, a in faces])
    weights = areas / areas.sum()
    rng = np.random.default_rng(seed)

    accepted: list[np.ndarray] = []
    total = 0
    while total < n:
        m = max(n, 64)
        face_idx = rng.choice(len(faces), size=m, p=weights)
        u = rng.random((m, 3))
        g = rng.standard_normal((m, 3))
        batch = np.zeros((m, 3))
        for k in np.unique(face_idx):
            sel = face_idx == k
            pi, fi, _ = faces[k]
            batch[sel] = _sample_face(primitives[pi], fi, u[sel], g[sel])
        if len(primitives) > 1:
            keep = np.ones(m, dtype=bool)
            for k in np.unique(face_idx):
                pi = faces[k][0]
                sel = face_idx == k
                for pj, other in enumerate(primitives):
                    if pj != pi:
                        keep[sel] &= ~strictly_inside(batch[sel], other)
            batch = batch[keep]
        accepted.append(batch)
        total += batch.shape[0]
    return np.concatenate(accepted, axis=0)[:n]


# ---------------------------------------------------------------------------
# object-set generation

# Fixed template catalog; index >= len extends procedurally. The first four
# are compact singles so tiny smoke sets stay easily graspable.
_CATALOG: list[tuple[Primitive, ...]] = [
    (Primitive("sphere", (0.05,)),),
    (Primitive("box", (0.07, 0.07, 0.07)),),
    (Primitive("cylinder", (0.045, 0.10)),),
    (Primitive("cone", (0.06, 0.10)),),
    (
        Primitive("sphere", (0.04,)),
        Primitive("box", (0.05, 0.05, 0.08), (0.02, 0.0, 0.02)),
    ),
    (Primitive("box", (0.05, 0.05, 0.12)),),
    (Primitive("cylinder", (0.07, 0.04)),),
    (
        Primitive("sphere", (0.035,), (-0.025, 0.0, 0.0)),
        Primitive("sphere", (0.035,), (0.025, 0.0, 0.0)),
    ),
    (Primitive("sphere", (0.08,)),),
    (
        Primitive("cylinder", (0.03, 0.09)),
        Primitive("box", (0.09, 0.04, 0.04), (0.0, 0.0, -0.03)),
    ),
]


def _template(index: int) -> tuple[Primitive, ...]:
    if index < len(_CATALOG):
        return _CATALOG[index]
    rng = np.random.default_rng(100_000 + index)
    kind = PRIMITIVE_KINDS[index % 4]
    scale = float(rng.uniform(0.04, 0.09))
    if kind == "sphere":
        prim = Primitive("sphere", (scale * 0.8,))
    elif kind == "box":
        prim = Primitive("box", tuple(float(x) for x in rng.uniform(0.6, 1.4, 3) * scale))
    elif kind == "cylinder":
        prim = Primitive("cylinder", (scale * 0.6, scale * float(rng.uniform(1.0, 2.0))))
    else:
        prim = Primitive("cone", (scale * 0.8, scale * float(rng.uniform(1.2, 2.0))))
    if index % 3 == 2:   # every third extended template is a union of two
        partner = Primitive("sphere", (scale * 0.5,), (scale * 0.5, 0.0, 0.0))
        return (prim, partner)
    return (prim,)


def _jitter(primitives: tuple[Primitive, ...], rng: np.random.Generator) -> tuple[Primitive, ...]:
    out = []
    for prim in primitives:
        size = tuple(float(s * rng.uniform(0.8, 1.2)) for s in prim.size)
        out.append(Primitive(prim.kind, size, prim.offset))
    return tuple(out)


def _build_asset(
    asset_id: int,
    category_id: int,
    template_index: int,
    seed: int,
    n_points: int,
    extent_min: float,
    extent_max: float,
) -> ObjectAsset:
    rng = np.random.default_rng(seed)
    primitives = _jitter(_template(template_index), rng)
    cloud_seed = int(rng.integers(0, 2**63 - 1))
    cloud = sample_surface_points(primitives, n_points, cloud_seed)

    centroid = cloud.mean(axis=0)
    cloud = cloud - centroid
    primitives = tuple(
        Primitive(p.kind, p.size, tuple(np.asarray(p.offset) - centroid)) for p in primitives
    )
    extent = float(np.linalg.norm(cloud, axis=1).max())
    factor = np.clip(extent, extent_min, extent_max) / extent
    if factor != 1.0:
        cloud = cloud * factor
        primitives = tuple(
            Primitive(
                p.kind,
                tuple(float(s * factor) for s in p.size),
                tuple(float(o * factor) for o in p.offset),
            )
            for p in primitives
        )
    cloud = cloud.astype(np.float32).astype(np.float64)   # f32-representable for exact file round trips
    extent = float(np.linalg.norm(cloud, axis=1).max())
    return ObjectAsset(asset_id, category_id, primitives, cloud, extent, seed)


def _derive_seed(*entropy: int) -> int:
    state = np.random.SeedSequence(entropy).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


def generate_object_set(
    categories: int,
    per_category: int,
    unseen_categories: int,
    seed: int,
    n_points: int = 512,
    extent_min: float = 0.03,
    extent_max: float = 0.12,
) -> dict[str, list[ObjectAsset]]:
    """Build seen / unseen-seen-category / unseen-unseen-category asset sets.

    Seen: per_category instances of each of `categories` templates. The
    unseen-seen-cat split reuses the seen templates with fresh jitter (one
    per category); unseen-unseen-cat uses held-out templates.
    """
    if categories < 1 or per_category < 1:
        raise ValueError("categories and per_category must be >= 1")
    if unseen_categories < 0:
        raise ValueError("unseen_categories must be >= 0")

    sets: dict[str, list[ObjectAsset]] = {"seen": [], "unseen_seen_cat": [], "unseen_unseen_cat": []}
    next_id = 0
    for cat in range(categories):
        for inst in range(per_category):
            asset_seed = _derive_seed(seed, 0, cat, inst)
            sets["seen"].append(
                _build_asset(next_id, cat, cat, asset_seed, n_points, extent_min, extent_max)
            )
            next_id += 1
    for cat in range(categories):
        asset_seed = _derive_seed(seed, 1, cat, 0)
        sets["unseen_seen_cat"].append(
            _build_asset(next_id, cat, cat, asset_seed, n_points, extent_min, extent_max)
        )
        next_id += 1
    for k in range(unseen_categories):
        cat = categories + k
        asset_seed = _derive_seed(seed, 2, cat, 0)
        sets["unseen_unseen_cat"].append(
            _build_asset(next_id, cat, cat, asset_seed, n_points, extent_min, extent_max)
        )
        next_id += 1
    return sets


# ---------------------------------------------------------------------------
# poses


def sample_tabletop_pose(
    asset: ObjectAsset,
    seed: int,
    disk_radius: float = 0.05,
    rotation: np.ndarray | None = None,
) -> TabletopPose:
    """Rotate uniformly, place xy in a disk, settle the lowest point to z=0."""
    rng = np.random.default_rng(seed)
    quat = random_quat(rng) if rotation is None else np.asarray(rotation, dtype=float)
    radius = disk_radius * np.sqrt(rng.random())
    theta = 2 * np.pi * rng.random()
    rotated = quat_rotate(quat, asset.canonical_cloud)
    z = -float(rotated[:, 2].min())
    translation = np.array([radius * np.cos(theta), radius * np.sin(theta), z])
    return TabletopPose(quat, translation, seed)


def world_cloud(asset: ObjectAsset, pose: TabletopPose) -> np.ndarray:
    return quat_rotate(pose.rotation, asset.canonical_cloud) + pose.translation


def build_pose_splits(
    asset: ObjectAsset,
    counts: tuple[int, int, int],
    seed: int,
    disk_radius: float = 0.05,
) -> PoseSplits:
    """Disjoint-by-seed train / generation / evaluation pose lists."""
    if any(c <= 0 for c in counts):
        raise ValueError(f"pose counts must be positive, got {counts}")
    splits = PoseSplits()
    for split_idx, (name, count) in enumerate(
        zip(("train", "generation", "evaluation"), counts)
    ):
        poses = [
            sample_tabletop_pose(
                asset, _derive_seed(seed, asset.asset_id, split_idx, i), disk_radius
            )
            for i in range(count)
        ]
        setattr(splits, name, poses)
    return splits


# ---------------------------------------------------------------------------
# serialization: assets.json manifest + one f32 cloud file per asset


def _asset_record(asset: ObjectAsset) -> dict:
    return {
        "asset_id": asset.asset_id,
        "category_id": asset.category_id,
        "seed": asset.seed,
        "extent": asset.extent,
        "n_points": asset.n_points,
        "primitives": [
            {"kind": p.kind, "size": list(p.size), "offset": list(p.offset)}
            for p in asset.primitives
        ],
    }


def save_asset_set(directory: str | Path, sets: dict[str, list[ObjectAsset]]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {name: [_asset_record(a) for a in assets] for name, assets in sets.items()}
    for assets in sets.values():
        for asset in assets:
            cloud32 = asset.canonical_cloud.astype("<f4")
            (directory / f"cloud_{asset.asset_id}.f32").write_bytes(cloud32.tobytes())
    path = directory / "assets.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_asset_set(directory: str | Path) -> dict[str, list[ObjectAsset]]:
    directory = Path(directory)
    manifest = json.loads((directory / "assets.json").read_text())
    sets: dict[str, list[ObjectAsset]] = {}
    for name, records in manifest.items():
        assets = []
        for rec in records:
            raw = (directory / f"cloud_{rec['asset_id']}.f32").read_bytes()
            cloud = np.frombuffer(raw, dtype="<f4").reshape(rec["n_points"], 3).astype(np.float64)
            primitives = tuple(
                Primitive(p["kind"], tuple(p["size"]), tuple(p["offset"]))
                for p in rec["primitives"]
            )
            assets.append(
                ObjectAsset(
                    rec["asset_id"], rec["category_id"], primitives, cloud,
                    rec["extent"], rec["seed"],
                )
            )
        sets[name] = assets
    return sets
