"""Synthetic 2.5D view sequences for the five occlusion/pan protocols.

Every frame of a sequence is voxelized in that frame's own camera coordinate
frame ("unregistered" views): the grid axes follow the camera, with the grid
extent centered on the scene centroid's camera-frame position. Each frame's
ground-truth target is the full scene occupancy expressed in the same frame,
so predictions always live in the reference frame of the newest observation.

Camera convention: x right, y down, z forward (view direction), world z up.
Protocols:
  * camera_pan / two_object_pan - camera positions equally spaced on a
    horizontal circle of radius PAN_RADIUS about the scene centroid, pitched
    down at it.
  * object_hiding - fixed camera; a one-voxel-thick planar curtain sweeps
    along the camera x-axis; object points at or behind the curtain plane are
    removed from the input. Targets stay the full object.
  * object_reveal - mirror image: the curtain starts covering everything and
    recedes the way it came, so reversing a hiding schedule reproduces the
    reveal visibility masks exactly.
  * slide_behind - fixed camera; a mover translates behind a static occluder
    with randomized start and standoff; targets contain both objects.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .objects import OBJECT_KINDS, SolidObject, gen_object, rotation_about_z
from .voxel import PointCloud, VoxelGrid, read_vxg, voxelize, write_vxg

PROTOCOLS = ("camera_pan", "two_object_pan", "object_hiding", "object_reveal",
             "slide_behind")
TWO_OBJECT_PROTOCOLS = ("two_object_pan", "slide_behind")

DEFAULT_EXTENT = 0.30       # world edge of the voxel grid cube, meters
DEFAULT_VIEWS = 12
DEFAULT_IMAGE_SIZE = 64     # depth image is image_size x image_size rays
DEFAULT_FOV_DEG = 50.0
PAN_RADIUS = 0.5            # horizontal pan circle radius, meters
PAN_HEIGHT = 0.25           # circle height above the centroid plane
FIXED_CAM_DISTANCE = 0.55   # fixed-camera protocols: standoff from centroid
FIXED_CAM_HEIGHT = 0.15     # lower pitch keeps the occluder's shadow flat
MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# camera
# ---------------------------------------------------------------------------


@dataclass
class CameraPose:
    """Camera-to-world rigid transform; columns of rotation are the camera
    x/y/z axes expressed in world coordinates."""

    rotation: np.ndarray
    position: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(points) - self.position) @ self.rotation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.atleast_2d(points) @ self.rotation.T + self.position


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> CameraPose:
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    return CameraPose(np.stack([right, down, forward], axis=1), position)


def render_depth_view(objects: list[SolidObject], pose: CameraPose,
                      image_size: int = DEFAULT_IMAGE_SIZE,
                      fov_deg: float = DEFAULT_FOV_DEG,
                      t_range: tuple = (0.05, 1.5), step: float = 0.004,
                      refine_iters: int = 30) -> PointCloud:
    """First-hit surface points of a pinhole raycast, in the camera frame.

    One ray per pixel; ray marching at ``step`` followed by bisection, so hit
    points sit on the surface (approached from inside) to ~1e-9 m. Back faces
    and self-occluded regions never appear. No intersection -> empty cloud.
    """
    if any(obj.contains(pose.position[None, :])[0] for obj in objects):
        raise ValueError("camera position lies inside an object")
    w = image_size
    focal = (w / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
    px = (np.arange(w) + 0.5 - w / 2.0) / focal
    u, v = np.meshgrid(px, px, indexing="xy")
    dirs = np.stack([u, v, np.ones_like(u)], axis=-1).reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs_world = dirs @ pose.rotation.T

    def inside(points: np.ndarray) -> np.ndarray:
        mask = np.zeros(len(points), dtype=bool)
        for obj in objects:
            mask |= obj.contains(points)
        return mask

    t_lo, t_hi = t_range
    n_rays = len(dirs_world)
    hit_t = np.full(n_rays, -1.0)
    alive = np.ones(n_rays, dtype=bool)
    for t in np.arange(t_lo, t_hi, step):
        if not alive.any():
            break
        pts = pose.position + t * dirs_world[alive]
        hits = inside(pts)
        if hits.any():
            idx = np.flatnonzero(alive)[hits]
            hit_t[idx] = t
            alive[idx] = False
    hit = hit_t > 0
    if not hit.any():
        return PointCloud.empty()
    lo = hit_t[hit] - step
    hi = hit_t[hit].copy()
    d = dirs_world[hit]
    for _ in range(refine_iters):
        mid = 0.5 * (lo + hi)
        m = inside(pose.position + mid[:, None] * d)
        hi = np.where(m, mid, hi)
        lo = np.where(m, lo, mid)
    pts_world = pose.position + hi[:, None] * d
    return PointCloud(pose.world_to_camera(pts_world))


# ---------------------------------------------------------------------------
# sequences
# ---------------------------------------------------------------------------


@dataclass
class ViewSequence:
    protocol: str
    frames: list[VoxelGrid]       # partial inputs, camera-frame aligned
    targets: list[VoxelGrid]      # full occupancy in the same frame
    camera_poses: list[CameraPose]

    def __len__(self) -> int:
        return len(self.frames)


def _grid_origin(pose: CameraPose, centroid_world: np.ndarray, extent: float) -> np.ndarray:
    centroid_cam = pose.world_to_camera(centroid_world)[0]
    return centroid_cam - extent / 2.0


def _target_grid(objects: list[SolidObject], pose: CameraPose, centroid: np.ndarray,
                 resolution: int, extent: float) -> VoxelGrid:
    grid = VoxelGrid.zeros(resolution, _grid_origin(pose, centroid, extent),
                           extent / resolution)
    centers_world = pose.camera_to_world(grid.voxel_centers())
    occ = np.zeros(len(centers_world), dtype=bool)
    for obj in objects:
        occ |= obj.contains(centers_world)
    r = resolution
    grid.values[:] = occ.reshape(r, r, r).transpose(2, 1, 0)  # centers are x-fastest
    return grid


def _input_grid(cloud: PointCloud, target: VoxelGrid) -> VoxelGrid:
    """Voxelize visible surface points, kept within the target occupancy so
    partial stays a subset of full (surface hits can straddle cell borders)."""
    raw, _ = voxelize(cloud, target.resolution, target.origin, target.voxel_size)
    return VoxelGrid(raw.values * target.binarize().values, target.origin,
                     target.voxel_size)


def _pan_poses(centroid: np.ndarray, count: int) -> list[CameraPose]:
    poses = []
    for i in range(count):
        angle = 2.0 * np.pi * i / count
        position = centroid + np.array([PAN_RADIUS * np.cos(angle),
                                        PAN_RADIUS * np.sin(angle), PAN_HEIGHT])
        poses.append(look_at(position, centroid))
    return poses


def _fixed_pose(centroid: np.ndarray) -> CameraPose:
    position = centroid + np.array([FIXED_CAM_DISTANCE, 0.0, FIXED_CAM_HEIGHT])
    return look_at(position, centroid)


def _curtain_cutoffs(resolution: int, origin_x: float, voxel_size: float,
                     length: int, reveal: bool) -> list[float]:
    """Camera-x curtain plane positions, snapped to voxel columns; the sweep
    completes by the final frame."""
    cutoffs = []
    for i in range(length):
        progress = i / (length - 1) if length > 1 else 0.0
        if reveal:
            progress = 1.0 - progress
        cols = int(np.floor(progress * resolution + 1e-9))
        cutoffs.append(origin_x + cols * voxel_size)
    return cutoffs


def make_sequence(protocol: str, objects: list[SolidObject], length: int, seed: int,
                  resolution: int = 16, extent: float = DEFAULT_EXTENT,
                  image_size: int = DEFAULT_IMAGE_SIZE) -> ViewSequence:
    """Generate one sequence; deterministic in (protocol, objects, seed)."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    if length < 1:
        raise ValueError(f"sequence length must be >= 1, got {length}")
    if protocol in TWO_OBJECT_PROTOCOLS and len(objects) < 2:
        raise ValueError(f"{protocol} needs 2 objects, got {len(objects)}")
    rng = np.random.default_rng(seed)
    centroid = np.zeros(3)
    step = extent / resolution / 2.0  # ray-march step: half a voxel

    if protocol in ("camera_pan", "two_object_pan"):
        if protocol == "camera_pan":
            scene = [objects[0].with_pose(translation=centroid)]
        else:
            a, b = objects[0], objects[1]
            gap = extent / 4.0
            scene = [a.with_pose(translation=centroid + np.array([0.0, -gap / 2 - 0.02, 0.0])),
                     b.with_pose(translation=centroid + np.array([0.0, gap / 2 + 0.02, 0.0]))]
        poses = _pan_poses(centroid, length)
        frames, targets = [], []
        for pose in poses:
            target = _target_grid(scene, pose, centroid, resolution, extent)
            cloud = render_depth_view(scene, pose, image_size, step=step)
            frames.append(_input_grid(cloud, target))
            targets.append(target)
        return ViewSequence(protocol, frames, targets, poses)

    if protocol in ("object_hiding", "object_reveal"):
        scene = [objects[0].with_pose(translation=centroid)]
        pose = _fixed_pose(centroid)
        target = _target_grid(scene, pose, centroid, resolution, extent)
        cloud = render_depth_view(scene, pose, image_size, step=step)
        cutoffs = _curtain_cutoffs(resolution, _grid_origin(pose, centroid, extent)[0],
                                   extent / resolution, length,
                                   reveal=(protocol == "object_reveal"))
        frames, targets, poses = [], [], []
        for c in cutoffs:
            if len(cloud) > 0:
                visible = PointCloud(cloud.points[cloud.points[:, 0] > c])
            else:
                visible = cloud
            frames.append(_input_grid(visible, target))
            targets.append(target)
            poses.append(pose)
        return ViewSequence(protocol, frames, targets, poses)

    # slide_behind: objects[0] = static occluder near the camera, objects[1] =
    # mover crossing behind it; start position and standoff vary per seed
    occluder = objects[0].with_pose(translation=centroid + np.array([0.06, 0.0, 0.0]))
    standoff = float(rng.uniform(0.09, 0.125))
    y0 = float(rng.uniform(-0.070, -0.055))
    y1 = float(rng.uniform(0.055, 0.070))
    pose = _fixed_pose(centroid)
    frames, targets, poses = [], [], []
    for i in range(length):
        frac = i / (length - 1) if length > 1 else 0.0
        mover_pos = centroid + np.array([0.06 - standoff, y0 + frac * (y1 - y0), 0.0])
        scene = [occluder, objects[1].with_pose(translation=mover_pos)]
        target = _target_grid(scene, pose, centroid, resolution, extent)
        cloud = render_depth_view(scene, pose, image_size, step=step)
        frames.append(_input_grid(cloud, target))
        targets.append(target)
        poses.append(pose)
    return ViewSequence("slide_behind", frames, targets, poses)


def fully_occluded_frames(seq: ViewSequence) -> list[int]:
    """Frames whose input grid is entirely empty but whose target is not."""
    return [i for i, (f, t) in enumerate(zip(seq.frames, seq.targets))
            if not f.occupancy().any() and t.occupancy().any()]


# ---------------------------------------------------------------------------
# dataset manifest, splits, storage
# ---------------------------------------------------------------------------


@dataclass
class ObjectSpec:
    object_id: str
    kind: str
    seed: int
    scale: float = 1.0
    split: str = ""

    def build(self) -> SolidObject:
        return gen_object(self.kind, self.seed, self.scale)


@dataclass
class SequenceSpec:
    seq_id: str
    object_ids: list[str]
    seed: int
    split: str = ""


@dataclass
class DatasetManifest:
    protocol: str
    resolution: int
    views: int
    seed: int
    extent: float = DEFAULT_EXTENT
    image_size: int = DEFAULT_IMAGE_SIZE
    version: int = MANIFEST_VERSION
    objects: list[ObjectSpec] = field(default_factory=list)
    sequences: list[SequenceSpec] = field(default_factory=list)

    def objects_by_id(self) -> dict[str, ObjectSpec]:
        return {o.object_id: o for o in self.objects}

    def split_sequences(self, split: str) -> list[SequenceSpec]:
        return [s for s in self.sequences if s.split == split]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        raw = json.loads(text)
        if raw.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {raw.get('version')}")
        raw["objects"] = [ObjectSpec(**o) for o in raw["objects"]]
        raw["sequences"] = [SequenceSpec(**s) for s in raw["sequences"]]
        return cls(**raw)


def split_objects(count: int, ratios: tuple = (0.8, 0.1, 0.1), seed: int = 0) -> list[str]:
    """Assign each of ``count`` objects to train/val/test, deterministically.

    Splitting is at object granularity so test objects are never seen in
    training. Rejects fewer objects than splits.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    if count < 3:
        raise ValueError(f"need at least 3 objects to form 3 splits, got {count}")
    n_val = max(1, int(np.floor(count * ratios[1])))
    n_test = max(1, int(np.floor(count * ratios[2])))
    order = np.random.default_rng(seed).permutation(count)
    labels = [""] * count
    for pos, obj_idx in enumerate(order):
        if pos < n_test:
            labels[obj_idx] = "test"
        elif pos < n_test + n_val:
            labels[obj_idx] = "val"
        else:
            labels[obj_idx] = "train"
    return labels


def build_manifest(protocol: str, n_objects: int, resolution: int, views: int,
                   seed: int, ratios: tuple = (0.8, 0.1, 0.1)) -> DatasetManifest:
    """Objects, split assignment and sequence pairings for one protocol."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    if protocol in TWO_OBJECT_PROTOCOLS and n_objects < 2:
        raise ValueError(f"{protocol} needs at least 2 objects, got {n_objects}")
    rng = np.random.default_rng(seed)
    two_object = protocol in TWO_OBJECT_PROTOCOLS
    scale = 0.6 if two_object else 1.0
    kinds = [OBJECT_KINDS[int(rng.integers(0, len(OBJECT_KINDS)))] for _ in range(n_objects)]
    labels = split_objects(n_objects, ratios, seed)
    objects = [
        ObjectSpec(object_id=f"obj{i:04d}", kind=kinds[i],
                   seed=int(rng.integers(0, 2 ** 31)), scale=scale, split=labels[i])
        for i in range(n_objects)
    ]
    sequences = []
    if two_object:
        # pair objects within their split so no split leaks into another
        for split in ("train", "val", "test"):
            members = [o for o in objects if o.split == split]
            for j, obj in enumerate(members):
                partner = members[(j + 1) % len(members)]
                sequences.append(SequenceSpec(
                    seq_id=f"{protocol}-{len(sequences):04d}",
                    object_ids=[obj.object_id, partner.object_id],
                    seed=int(seed * 7919 + len(sequences)), split=split))
    else:
        for obj in objects:
            sequences.append(SequenceSpec(
                seq_id=f"{protocol}-{len(sequences):04d}",
                object_ids=[obj.object_id],
                seed=int(seed * 7919 + len(sequences)), split=obj.split))
    return DatasetManifest(protocol=protocol, resolution=resolution, views=views,
                           seed=seed, objects=objects, sequences=sequences)


def realize_sequence(manifest: DatasetManifest, spec: SequenceSpec) -> ViewSequence:
    by_id = manifest.objects_by_id()
    objs = [by_id[oid].build() for oid in spec.object_ids]
    return make_sequence(manifest.protocol, objs, manifest.views, spec.seed,
                         resolution=manifest.resolution, extent=manifest.extent,
                         image_size=manifest.image_size)


def write_dataset(manifest: DatasetManifest, out_dir) -> None:
    """Materialize every sequence as {seq_id}_{frame_idx}_{in|gt}.vxg files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(manifest.to_json())
    for spec in manifest.sequences:
        seq = realize_sequence(manifest, spec)
        for i, (frame, target) in enumerate(zip(seq.frames, seq.targets)):
            write_vxg(frame, out / f"{spec.seq_id}_{i}_in.vxg")
            write_vxg(target, out / f"{spec.seq_id}_{i}_gt.vxg")


def read_manifest(data_dir) -> DatasetManifest:
    return DatasetManifest.from_json((Path(data_dir) / "manifest.json").read_text())


def read_sequence_grids(data_dir, manifest: DatasetManifest,
                        spec: SequenceSpec) -> tuple[list[VoxelGrid], list[VoxelGrid]]:
    data = Path(data_dir)
    frames, targets = [], []
    for i in range(manifest.views):
        frames.append(read_vxg(data / f"{spec.seq_id}_{i}_in.vxg"))
        targets.append(read_vxg(data / f"{spec.seq_id}_{i}_gt.vxg"))
    return frames, targets
