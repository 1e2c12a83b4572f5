"""SceneBundle on-disk format, point containers, and checkpoints.

All binary payloads are little-endian f32 blobs behind a JSON header, with
sections aligned to 16 bytes. Manifest numerics rely on Python's shortest
round-trip float repr, so every value survives JSON exactly.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import SceneValidationError, UnsupportedVersionError
from .gaussians import CameraView, GaussianCloud, sh_coeff_count

POINTS_MAGIC = b"SPTS1"
CHECKPOINT_MAGIC = b"ASPL1"
CHECKPOINT_VERSION = 1

LABEL_OTHER = 0
LABEL_ROAD = 1
LABEL_SKY = 2


def _align16(n: int) -> int:
    return (n + 15) // 16 * 16


def _write_container(path: Path, magic: bytes, header: dict,
                     arrays: dict[str, np.ndarray]):
    sections = {}
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr).tobytes()
        sections[name] = {"offset": offset, "nbytes": len(data),
                          "dtype": str(arr.dtype), "shape": list(arr.shape)}
        padded = _align16(len(data))
        blobs.append(data + b"\0" * (padded - len(data)))
        offset += padded
    header = dict(header)
    header["sections"] = sections
    hjson = json.dumps(header, sort_keys=True).encode()
    hjson += b" " * (_align16(len(magic) + 4 + len(hjson)) - (len(magic) + 4 + len(hjson)))
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(hjson)))
        fh.write(hjson)
        for blob in blobs:
            fh.write(blob)


def _read_container(path: Path, magic: bytes):
    raw = Path(path).read_bytes()
    if raw[:len(magic)] != magic:
        raise SceneValidationError(f"{path}: bad magic, expected {magic!r}")
    hlen, = struct.unpack_from("<I", raw, len(magic))
    header = json.loads(raw[len(magic) + 4:len(magic) + 4 + hlen])
    blob = raw[len(magic) + 4 + hlen:]
    arrays = {}
    for name, sec in header["sections"].items():
        start, n = sec["offset"], sec["nbytes"]
        buf = blob[start:start + n]
        if len(buf) != n:
            raise SceneValidationError(
                f"{path}: truncated blob for section {name!r} "
                f"({len(buf)} of {n} bytes)")
        arrays[name] = np.frombuffer(buf, dtype=np.dtype(sec["dtype"])).reshape(sec["shape"]).copy()
    return header, arrays


def save_points(path, xyz: np.ndarray, rgb: np.ndarray | None = None,
                extra_header: dict | None = None):
    arrays = {"xyz": np.asarray(xyz, dtype="<f4")}
    if rgb is not None:
        arrays["rgb"] = np.asarray(rgb, dtype="<f4")
    header = {"count": int(len(xyz)), **(extra_header or {})}
    _write_container(Path(path), POINTS_MAGIC, header, arrays)


def load_points(path):
    header, arrays = _read_container(Path(path), POINTS_MAGIC)
    return arrays["xyz"].astype(np.float64), \
        (arrays["rgb"].astype(np.float64) if "rgb" in arrays else None)


@dataclass
class FrameRecord:
    index: int
    image_path: str
    label_mask_path: str
    instance_mask_path: str
    K: np.ndarray
    cam_to_world: np.ndarray
    timestamp: float
    split: str = "train"

    def view(self, width: int, height: int) -> CameraView:
        return CameraView(K=self.K, cam_to_world=self.cam_to_world,
                          width=width, height=height, frame_index=self.index)


@dataclass
class SceneBundle:
    root: Path
    width: int
    height: int
    frames: list
    points_xyz: np.ndarray
    points_rgb: np.ndarray | None
    tracks: dict  # object_id -> ObjectTrack (see foreground module)
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    up_axis: str = "+Z"

    def train_frames(self):
        return [f for f in self.frames if f.split == "train"]

    def test_frames(self):
        return [f for f in self.frames if f.split == "test"]

    def frame_by_index(self, index: int) -> FrameRecord:
        for f in self.frames:
            if f.index == index:
                return f
        raise KeyError(f"no frame with index {index}")

    def load_image(self, frame: FrameRecord) -> torch.Tensor:
        arr = np.asarray(Image.open(self.root / frame.image_path), dtype=np.float32) / 255.0
        return torch.tensor(arr)

    def load_masks(self, frame: FrameRecord):
        labels = np.asarray(Image.open(self.root / frame.label_mask_path))
        inst = np.asarray(Image.open(self.root / frame.instance_mask_path))
        return labels.astype(np.int64), inst.astype(np.int64)

    def view(self, frame: FrameRecord) -> CameraView:
        return frame.view(self.width, self.height)


def save_scene(bundle: SceneBundle, root: Path):
    root = Path(root)
    manifest = {
        "format": "splatsim-scene",
        "version": 1,
        "width": bundle.width,
        "height": bundle.height,
        "points": "points.bin",
        "frames": [{
            "index": f.index, "image": f.image_path,
            "label_mask": f.label_mask_path, "instance_mask": f.instance_mask_path,
            "K": np.asarray(f.K).tolist(),
            "cam_to_world": np.asarray(f.cam_to_world).tolist(),
            "timestamp": f.timestamp, "split": f.split,
        } for f in bundle.frames],
        "tracks": [_track_to_json(oid, tr) for oid, tr in sorted(bundle.tracks.items())],
        "metadata": {"bounds_min": bundle.bounds_min.tolist(),
                     "bounds_max": bundle.bounds_max.tolist(),
                     "up_axis": bundle.up_axis},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    save_points(root / "points.bin", bundle.points_xyz, bundle.points_rgb)


def _track_to_json(oid, tr):
    return {"object_id": int(oid),
            "bbox_dims": np.asarray(tr.bbox_dims).tolist(),
            "symmetry_axis": np.asarray(tr.symmetry_axis).tolist(),
            "poses": {str(t): np.asarray(p).tolist() for t, p in sorted(tr.poses.items())}}


def _check_rigid(M, where):
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (4, 4):
        raise SceneValidationError(f"{where}: transform must be 4x4")
    R = M[:3, :3]
    if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
        raise SceneValidationError(f"{where}: transform is not rigid")
    return M


def load_scene(path) -> SceneBundle:
    from .foreground import ObjectTrack  # local import avoids a cycle

    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise SceneValidationError(f"{mpath} does not exist")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise SceneValidationError(f"{mpath}: invalid JSON ({e})") from e
    if manifest.get("format") != "splatsim-scene":
        raise SceneValidationError(f"{mpath}: not a splatsim scene manifest")
    if manifest.get("version") != 1:
        raise UnsupportedVersionError(
            f"{mpath}: unsupported scene version {manifest.get('version')}")
    if len(manifest.get("frames", [])) < 2:
        raise SceneValidationError(f"{mpath}: at least 2 frames required")

    frames = []
    for i, fr in enumerate(manifest["frames"]):
        for key in ("image", "label_mask", "instance_mask"):
            rel = fr.get(key)
            if rel is None or not (root / rel).exists():
                raise SceneValidationError(
                    f"{mpath}: frames[{i}].{key} missing or file not found: {rel}")
        frames.append(FrameRecord(
            index=int(fr["index"]), image_path=fr["image"],
            label_mask_path=fr["label_mask"], instance_mask_path=fr["instance_mask"],
            K=np.asarray(fr["K"], dtype=np.float64),
            cam_to_world=_check_rigid(fr["cam_to_world"], f"frames[{i}].cam_to_world"),
            timestamp=float(fr["timestamp"]), split=fr.get("split", "train")))

    ppath = root / manifest["points"]
    if not ppath.exists():
        raise SceneValidationError(f"{mpath}: points file not found: {manifest['points']}")
    xyz, rgb = load_points(ppath)

    tracks = {}
    for tr in manifest.get("tracks", []):
        oid = int(tr["object_id"])
        poses = {int(t): _check_rigid(p, f"tracks[{oid}].poses[{t}]")
                 for t, p in tr["poses"].items()}
        dims = np.asarray(tr["bbox_dims"], dtype=np.float64)
        if (dims <= 0).any():
            raise SceneValidationError(f"tracks[{oid}]: bbox_dims must be positive")
        tracks[oid] = ObjectTrack(
            object_id=oid, poses=poses, bbox_dims=dims,
            symmetry_axis=np.asarray(tr["symmetry_axis"], dtype=np.float64))

    meta = manifest["metadata"]
    return SceneBundle(
        root=root, width=int(manifest["width"]), height=int(manifest["height"]),
        frames=frames, points_xyz=xyz, points_rgb=rgb, tracks=tracks,
        bounds_min=np.asarray(meta["bounds_min"], dtype=np.float64),
        bounds_max=np.asarray(meta["bounds_max"], dtype=np.float64),
        up_axis=meta.get("up_axis", "+Z"))


# --- checkpoints ------------------------------------------------------------

def _cloud_arrays(prefix: str, cloud: GaussianCloud) -> dict:
    return {
        f"{prefix}.mu": cloud.mu.detach().numpy().astype("<f4"),
        f"{prefix}.rot": cloud.rot.detach().numpy().astype("<f4"),
        f"{prefix}.log_scale": cloud.log_scale.detach().numpy().astype("<f4"),
        f"{prefix}.opacity_logit": cloud.opacity_logit.detach().numpy().astype("<f4"),
        f"{prefix}.sh": cloud.sh.detach().numpy().astype("<f4"),
        f"{prefix}.class_tag": cloud.class_tag.numpy().astype(np.int8),
        f"{prefix}.object_id": cloud.object_id.numpy().astype("<i4"),
    }


def _arrays_to_cloud(prefix: str, arrays: dict, sh_degree: int) -> GaussianCloud:
    return GaussianCloud(
        mu=torch.tensor(arrays[f"{prefix}.mu"], dtype=torch.float32),
        rot=torch.tensor(arrays[f"{prefix}.rot"], dtype=torch.float32),
        log_scale=torch.tensor(arrays[f"{prefix}.log_scale"], dtype=torch.float32),
        opacity_logit=torch.tensor(arrays[f"{prefix}.opacity_logit"], dtype=torch.float32),
        sh=torch.tensor(arrays[f"{prefix}.sh"], dtype=torch.float32),
        class_tag=torch.tensor(arrays[f"{prefix}.class_tag"], dtype=torch.int8),
        object_id=torch.tensor(arrays[f"{prefix}.object_id"], dtype=torch.int32),
        sh_degree=sh_degree)


def save_checkpoint(path, background: GaussianCloud | None = None,
                    objects: dict | None = None, config: dict | None = None):
    """objects: object_id -> ForegroundObject (cloud, track, correction, appearance)."""
    arrays = {}
    header = {"version": CHECKPOINT_VERSION, "config": config or {}, "objects": []}
    if background is not None:
        arrays.update(_cloud_arrays("background", background))
        header["background"] = {"sh_degree": background.sh_degree}
    for oid, obj in sorted((objects or {}).items()):
        prefix = f"object{oid}"
        arrays.update(_cloud_arrays(prefix, obj.cloud))
        entry = {"object_id": int(oid), "sh_degree": obj.cloud.sh_degree,
                 "track": _track_to_json(oid, obj.track)}
        arrays[f"{prefix}.correction"] = obj.correction.detach().numpy().astype("<f4")
        if obj.appearance is not None:
            for name, tensor in obj.appearance.named_tensors():
                arrays[f"{prefix}.appearance.{name}"] = tensor.detach().numpy().astype("<f4")
            entry["appearance"] = obj.appearance.meta()
        header["objects"].append(entry)
    _write_container(Path(path), CHECKPOINT_MAGIC, header, arrays)


def load_checkpoint(path):
    from .foreground import DynamicAppearanceModel, ForegroundObject, ObjectTrack

    header, arrays = _read_container(Path(path), CHECKPOINT_MAGIC)
    if header.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: checkpoint version {header.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})")
    background = None
    if "background" in header:
        background = _arrays_to_cloud("background", arrays,
                                      header["background"]["sh_degree"])
    objects = {}
    for entry in header.get("objects", []):
        oid = entry["object_id"]
        prefix = f"object{oid}"
        cloud = _arrays_to_cloud(prefix, arrays, entry["sh_degree"])
        tr = entry["track"]
        track = ObjectTrack(
            object_id=oid,
            poses={int(t): np.asarray(p, dtype=np.float64)
                   for t, p in tr["poses"].items()},
            bbox_dims=np.asarray(tr["bbox_dims"], dtype=np.float64),
            symmetry_axis=np.asarray(tr["symmetry_axis"], dtype=np.float64))
        appearance = None
        if "appearance" in entry:
            tensors = {name: torch.tensor(arrays[f"{prefix}.appearance.{name}"],
                                          dtype=torch.float32)
                       for name in DynamicAppearanceModel.TENSOR_NAMES}
            appearance = DynamicAppearanceModel.from_tensors(entry["appearance"], tensors)
        objects[oid] = ForegroundObject(
            object_id=oid, cloud=cloud, track=track,
            correction=torch.tensor(arrays[f"{prefix}.correction"], dtype=torch.float32),
            appearance=appearance)
    return background, objects, header.get("config", {})
