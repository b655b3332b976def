"""Scene ingestion and serialization.

Covers the COLMAP text format (cameras.txt / images.txt / points3D.txt),
binary PLY checkpoints following the common splat property layout, PFM depth
maps, PNG/PPM images, RANSAC alignment of predicted depth to the sparse
point cloud, and seed-point densification by back-projection.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import Camera, GaussianSet, quat_to_rotmat


class ColmapParseError(ValueError):
    pass


class UnsupportedCameraModelError(ColmapParseError):
    def __init__(self, model: str):
        super().__init__(f"unsupported camera model: {model}")
        self.model = model


class PlySchemaError(ValueError):
    pass


class AlignmentUnavailableError(RuntimeError):
    """Too few usable depth/point correspondences; disable the depth loss."""


@dataclass
class SparseReconstruction:
    cameras: list[Camera]
    points: np.ndarray  # (P, 3) float64
    colors: np.ndarray  # (P, 3) uint8


@dataclass
class DepthAlignment:
    scale: float
    inlier_ratio: float
    threshold: float


@dataclass
class Scene:
    """Everything the trainer needs: posed cameras with ground truth (and
    optional aligned depth priors), seed points, and the scene extent."""

    cameras: list[Camera]
    points: np.ndarray
    colors: np.ndarray
    extent: float
    warnings: list[str] = field(default_factory=list)


# --------------------------------------------------------------------------
# COLMAP text format


def _data_lines(path: Path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line


def parse_colmap(colmap_dir) -> SparseReconstruction:
    """Parse a COLMAP text model; PINHOLE and SIMPLE_PINHOLE only."""
    colmap_dir = Path(colmap_dir)
    intrinsics = {}
    for lineno, line in _data_lines(colmap_dir / "cameras.txt"):
        parts = line.split()
        try:
            cam_id = int(parts[0])
            model = parts[1]
            width, height = int(parts[2]), int(parts[3])
            params = [float(v) for v in parts[4:]]
        except (IndexError, ValueError) as exc:
            raise ColmapParseError(f"cameras.txt line {lineno}: {exc}") from exc
        if model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                raise ColmapParseError(f"cameras.txt line {lineno}: expected 3 params")
            fx = fy = params[0]
            cx, cy = params[1], params[2]
        elif model == "PINHOLE":
            if len(params) != 4:
                raise ColmapParseError(f"cameras.txt line {lineno}: expected 4 params")
            fx, fy, cx, cy = params
        else:
            raise UnsupportedCameraModelError(model)
        intrinsics[cam_id] = (fx, fy, cx, cy, width, height)

    images = []
    expecting_pose = True
    with open(colmap_dir / "images.txt") as fh:
        raw_lines = list(enumerate(fh, start=1))
    for lineno, raw in raw_lines:
        line = raw.strip()
        if line.startswith("#"):
            continue
        if not expecting_pose:
            expecting_pose = True  # 2D-point line (may be empty), skipped
            continue
        if not line:
            continue  # tolerate stray blank lines between records
        parts = line.split()
        try:
            image_id = int(parts[0])
            qw, qx, qy, qz = (float(v) for v in parts[1:5])
            tx, ty, tz = (float(v) for v in parts[5:8])
            cam_id = int(parts[8])
            name = parts[9]
        except (IndexError, ValueError) as exc:
            raise ColmapParseError(f"images.txt line {lineno}: {exc}") from exc
        if cam_id not in intrinsics:
            raise ColmapParseError(
                f"images.txt line {lineno}: undeclared camera id {cam_id}")
        images.append((image_id, (qw, qx, qy, qz), (tx, ty, tz), cam_id, name))
        expecting_pose = False

    cameras = []
    for image_id, quat, trans, cam_id, name in sorted(images):
        fx, fy, cx, cy, width, height = intrinsics[cam_id]
        R = quat_to_rotmat(np.array(quat))[0]
        cameras.append(Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width,
                              height=height, rotation=R, translation=np.array(trans),
                              name=name, camera_id=cam_id))

    pts, cols = [], []
    for lineno, line in _data_lines(colmap_dir / "points3D.txt"):
        parts = line.split()
        try:
            pts.append([float(v) for v in parts[1:4]])
            cols.append([int(v) for v in parts[4:7]])
        except (IndexError, ValueError) as exc:
            raise ColmapParseError(f"points3D.txt line {lineno}: {exc}") from exc
    points = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(cols, dtype=np.uint8).reshape(-1, 3)
    return SparseReconstruction(cameras=cameras, points=points, colors=colors)


def rotmat_to_quat(R):
    """Inverse of quat_to_rotmat for a proper rotation (w >= 0)."""
    R = np.asarray(R)
    w = 0.5 * np.sqrt(max(0.0, 1.0 + R[0, 0] + R[1, 1] + R[2, 2]))
    if w > 1e-6:
        x = (R[2, 1] - R[1, 2]) / (4 * w)
        y = (R[0, 2] - R[2, 0]) / (4 * w)
        z = (R[1, 0] - R[0, 1]) / (4 * w)
    else:
        # w ~ 0: pick the dominant diagonal term
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            x = 0.5 * np.sqrt(max(0.0, 1 + R[0, 0] - R[1, 1] - R[2, 2]))
            y = (R[0, 1] + R[1, 0]) / (4 * x)
            z = (R[0, 2] + R[2, 0]) / (4 * x)
            w = (R[2, 1] - R[1, 2]) / (4 * x)
        elif i == 1:
            y = 0.5 * np.sqrt(max(0.0, 1 - R[0, 0] + R[1, 1] - R[2, 2]))
            x = (R[0, 1] + R[1, 0]) / (4 * y)
            z = (R[1, 2] + R[2, 1]) / (4 * y)
            w = (R[0, 2] - R[2, 0]) / (4 * y)
        else:
            z = 0.5 * np.sqrt(max(0.0, 1 - R[0, 0] - R[1, 1] + R[2, 2]))
            x = (R[0, 2] + R[2, 0]) / (4 * z)
            y = (R[1, 2] + R[2, 1]) / (4 * z)
            w = (R[1, 0] - R[0, 1]) / (4 * z)
    q = np.array([w, x, y, z])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def write_colmap_text(recon: SparseReconstruction, colmap_dir) -> None:
    """Serialize back to COLMAP text (PINHOLE); round-trips parse_colmap."""
    colmap_dir = Path(colmap_dir)
    colmap_dir.mkdir(parents=True, exist_ok=True)
    with open(colmap_dir / "cameras.txt", "w") as fh:
        fh.write("# Camera list\n")
        for i, cam in enumerate(recon.cameras):
            fh.write(f"{i + 1} PINHOLE {cam.width} {cam.height} "
                     f"{float(cam.fx)!r} {float(cam.fy)!r} "
                     f"{float(cam.cx)!r} {float(cam.cy)!r}\n")
    with open(colmap_dir / "images.txt", "w") as fh:
        fh.write("# Image list, two lines per image\n")
        for i, cam in enumerate(recon.cameras):
            q = [float(v) for v in rotmat_to_quat(cam.rotation)]
            t = [float(v) for v in cam.translation]
            name = cam.name or f"view_{i:04d}.png"
            fh.write(f"{i + 1} {q[0]!r} {q[1]!r} {q[2]!r} {q[3]!r} "
                     f"{t[0]!r} {t[1]!r} {t[2]!r} {i + 1} {name}\n")
            fh.write("\n")
    with open(colmap_dir / "points3D.txt", "w") as fh:
        fh.write("# 3D point list\n")
        for j, (p, c) in enumerate(zip(recon.points, recon.colors)):
            fh.write(f"{j + 1} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r} "
                     f"{int(c[0])} {int(c[1])} {int(c[2])} 0.0\n")


# --------------------------------------------------------------------------
# Images and depth maps


def read_image(path) -> np.ndarray:
    """8-bit PNG/PPM to linear [0, 1] floats (H, W, 3) by /255."""
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return img / 255.0


def write_png(path, img01) -> None:
    arr = (np.clip(img01, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def write_ppm(path, img01) -> None:
    arr = (np.clip(img01, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def write_pfm(path, depth) -> None:
    """Grayscale little-endian PFM, rows bottom-to-top per convention."""
    data = np.asarray(depth, dtype=np.float32)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode())
        fh.write(np.flipud(data).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header != b"Pf":
            raise ValueError(f"{path}: not a grayscale PFM")
        dims = re.match(rb"^(\d+)\s+(\d+)\s*$", fh.readline())
        if not dims:
            raise ValueError(f"{path}: malformed PFM dimensions")
        w, h = int(dims.group(1)), int(dims.group(2))
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(w * h * 4), dtype=dtype).reshape(h, w)
    return np.flipud(data).astype(np.float64)


# --------------------------------------------------------------------------
# PLY checkpoints


def _ply_property_names(n_coeffs: int) -> list[str]:
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (n_coeffs - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2",
              "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def write_ply(gset: GaussianSet, path) -> None:
    """Binary little-endian PLY with double precision so read(write(s)) is
    bit-for-bit. Colors: f_dc holds the DC term, f_rest the higher SH
    coefficients flattened channel-major."""
    n = len(gset)
    n_coeffs = gset.colors.shape[1]
    names = _ply_property_names(n_coeffs)
    rest = gset.colors[:, 1:, :]  # (N, C-1, 3)
    columns = [gset.positions, gset.colors[:, 0, :],
               np.transpose(rest, (0, 2, 1)).reshape(n, 3 * (n_coeffs - 1)),
               gset.opacity_logits[:, None], gset.log_scales, gset.rotations]
    data = np.concatenate(columns, axis=1) if n else np.empty((0, len(names)))

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property double {name}" for name in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode())
        fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def read_ply(path) -> GaussianSet:
    """Read a splat PLY; accepts float or double properties."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise PlySchemaError(f"{path}: not a PLY file")
        n = None
        props: list[tuple[str, str]] = []
        while True:
            line = fh.readline()
            if not line:
                raise PlySchemaError(f"{path}: unterminated header")
            tokens = line.decode().strip().split()
            if not tokens:
                continue
            if tokens[0] == "format" and tokens[1] != "binary_little_endian":
                raise PlySchemaError(f"{path}: unsupported format {tokens[1]}")
            if tokens[0] == "element":
                if tokens[1] != "vertex":
                    raise PlySchemaError(f"{path}: unexpected element {tokens[1]}")
                n = int(tokens[2])
            if tokens[0] == "property":
                props.append((tokens[2], tokens[1]))
            if tokens[0] == "end_header":
                break
        if n is None:
            raise PlySchemaError(f"{path}: missing vertex element")
        typemap = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8"}
        try:
            dtype = np.dtype([(name, typemap[t]) for name, t in props])
        except KeyError as exc:
            raise PlySchemaError(f"{path}: unsupported property type {exc}") from exc
        raw = np.frombuffer(fh.read(dtype.itemsize * n), dtype=dtype, count=n)

    have = {name for name, _ in props}
    n_rest = len([name for name in have if name.startswith("f_rest_")])
    if n_rest % 3:
        raise PlySchemaError(f"{path}: f_rest count {n_rest} not divisible by 3")
    n_coeffs = n_rest // 3 + 1
    for required in _ply_property_names(n_coeffs):
        if required not in have:
            raise PlySchemaError(f"{path}: missing property \"{required}\"")

    def col(name):
        return raw[name].astype(np.float64)

    positions = np.stack([col("x"), col("y"), col("z")], axis=1)
    colors = np.empty((n, n_coeffs, 3))
    colors[:, 0, :] = np.stack([col(f"f_dc_{i}") for i in range(3)], axis=1)
    for ch in range(3):
        for j in range(n_coeffs - 1):
            colors[:, j + 1, ch] = col(f"f_rest_{ch * (n_coeffs - 1) + j}")
    log_scales = np.stack([col(f"scale_{i}") for i in range(3)], axis=1)
    rotations = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)
    return GaussianSet(positions, log_scales, rotations, col("opacity"), colors)


# --------------------------------------------------------------------------
# Depth alignment and seed densification


def _project_to_pixels(points, camera: Camera, near=1e-9):
    p_cam = camera.world_to_cam(points)
    z = p_cam[:, 2]
    front = z > near
    u = camera.fx * p_cam[:, 0] / np.where(front, z, 1.0) + camera.cx
    v = camera.fy * p_cam[:, 1] / np.where(front, z, 1.0) + camera.cy
    ix = np.floor(u).astype(np.int64)
    iy = np.floor(v).astype(np.int64)
    inside = front & (ix >= 0) & (ix < camera.width) & (iy >= 0) & (iy < camera.height)
    return ix, iy, z, inside


def align_depth_scale(depth_prior, sparse_points, camera: Camera,
                      iterations: int = 256, rel_threshold: float = 0.05,
                      seed: int = 0) -> DepthAlignment:
    """RANSAC over 1-point scale hypotheses s = z_sparse / z_pred.

    A correspondence is an inlier when |s * z_pred - z_sparse| is within
    rel_threshold * z_sparse; the winning consensus is refit by the median
    ratio over its inliers. The prior itself is never mutated.
    """
    depth_prior = np.asarray(depth_prior, dtype=np.float64)
    ix, iy, z, inside = _project_to_pixels(np.asarray(sparse_points, dtype=np.float64),
                                           camera)
    usable = inside.copy()
    pred = np.full(len(z), np.nan)
    pred[inside] = depth_prior[iy[inside], ix[inside]]
    if camera.depth_valid is not None:
        usable[inside] &= camera.depth_valid[iy[inside], ix[inside]]
    usable &= np.isfinite(pred) & (pred > 0)
    z_pred = pred[usable]
    z_sparse = z[usable]
    n = len(z_pred)
    if n < 10:
        raise AlignmentUnavailableError(
            f"only {n} usable depth correspondences (need >= 10)")

    rng = np.random.default_rng(seed)
    picks = rng.integers(0, n, size=iterations)
    best_count, best_scale = -1, 1.0
    for idx in picks:
        s = z_sparse[idx] / z_pred[idx]
        count = int((np.abs(s * z_pred - z_sparse) < rel_threshold * z_sparse).sum())
        if count > best_count:
            best_count, best_scale = count, s
    inliers = np.abs(best_scale * z_pred - z_sparse) < rel_threshold * z_sparse
    scale = float(np.median(z_sparse[inliers] / z_pred[inliers]))
    final_inliers = np.abs(scale * z_pred - z_sparse) < rel_threshold * z_sparse
    return DepthAlignment(scale=scale,
                          inlier_ratio=float(final_inliers.mean()),
                          threshold=rel_threshold)


def densify_seed_points(recon: SparseReconstruction, depth_priors,
                        alignments, samples_per_view: int, seed: int = 0):
    """Back-project sampled valid depth pixels from every aligned view and
    concatenate them with the sparse points.

    depth_priors / alignments are per-camera lists (None where missing).
    Returns (points, colors, warned) where warned flags the no-aligned-views
    fallback that returns the sparse cloud unchanged.
    """
    rng = np.random.default_rng(seed)
    new_pts, new_cols = [], []
    any_aligned = False
    for cam, prior, alignment in zip(recon.cameras, depth_priors, alignments):
        if prior is None or alignment is None:
            continue
        any_aligned = True
        if samples_per_view <= 0:
            continue
        prior = np.asarray(prior, dtype=np.float64)
        valid = np.isfinite(prior) & (prior > 0)
        if cam.depth_valid is not None:
            valid &= cam.depth_valid
        flat = np.flatnonzero(valid)
        if len(flat) == 0:
            continue
        chosen = rng.choice(flat, size=samples_per_view, replace=len(flat) < samples_per_view)
        v, u = np.divmod(chosen, cam.width)
        d = alignment.scale * prior[v, u]
        x_cam = np.stack([(u + 0.5 - cam.cx) / cam.fx * d,
                          (v + 0.5 - cam.cy) / cam.fy * d, d], axis=1)
        world = (x_cam - cam.translation) @ cam.rotation
        new_pts.append(world)
        if cam.gt_image is not None:
            new_cols.append((cam.gt_image[v, u] * 255.0).round().astype(np.uint8))
        else:
            new_cols.append(np.full((samples_per_view, 3), 128, dtype=np.uint8))

    if not any_aligned:
        return recon.points.copy(), recon.colors.copy(), True
    points = np.concatenate([recon.points] + new_pts) if new_pts else recon.points.copy()
    colors = np.concatenate([recon.colors] + new_cols) if new_cols else recon.colors.copy()
    return points, colors, False


# --------------------------------------------------------------------------
# Full scene loading


def scene_extent(cameras, points) -> float:
    centers = np.array([cam.center() for cam in cameras])
    if len(centers) >= 2:
        mid = centers.mean(axis=0)
        radius = np.linalg.norm(centers - mid, axis=1).max()
        if radius > 0:
            return float(radius * 1.1)
    if len(points):
        mid = points.mean(axis=0)
        return float(max(np.linalg.norm(points - mid, axis=1).max(), 1e-6) * 1.1)
    return 1.0


def load_scene(colmap_dir, images_dir, depth_dir=None, *,
               depth_samples_per_view: int = 0, ransac_iterations: int = 256,
               rel_threshold: float = 0.05, seed: int = 0) -> Scene:
    """Load a COLMAP scene, attach ground-truth images (matched by name) and
    optional PFM depth priors (<image stem>.pfm), align prior scales, and
    optionally densify the seed cloud."""
    recon = parse_colmap(colmap_dir)
    images_dir = Path(images_dir)
    warnings = []

    priors: list[np.ndarray | None] = []
    alignments: list[DepthAlignment | None] = []
    for cam in recon.cameras:
        img_path = images_dir / cam.name
        if not img_path.exists():
            raise FileNotFoundError(f"missing ground-truth image {img_path}")
        cam.gt_image = read_image(img_path)
        if cam.gt_image.shape[:2] != (cam.height, cam.width):
            raise ValueError(f"{img_path}: image is {cam.gt_image.shape[:2]}, "
                             f"camera declares {(cam.height, cam.width)}")
        prior = None
        alignment = None
        if depth_dir is not None:
            pfm = Path(depth_dir) / (Path(cam.name).stem + ".pfm")
            if pfm.exists():
                prior = read_pfm(pfm)
                try:
                    alignment = align_depth_scale(
                        prior, recon.points, cam, iterations=ransac_iterations,
                        rel_threshold=rel_threshold, seed=seed)
                    cam.depth_prior = prior * alignment.scale
                    cam.depth_valid = np.isfinite(prior) & (prior > 0)
                except AlignmentUnavailableError as exc:
                    warnings.append(f"{cam.name}: {exc}; depth loss disabled")
                    prior = None
        priors.append(prior)
        alignments.append(alignment)

    points, colors = recon.points, recon.colors
    if depth_samples_per_view > 0:
        points, colors, warned = densify_seed_points(
            recon, priors, alignments, depth_samples_per_view, seed=seed)
        if warned:
            warnings.append("no aligned depth views; seed cloud unchanged")

    return Scene(cameras=recon.cameras, points=points, colors=colors,
                 extent=scene_extent(recon.cameras, points), warnings=warnings)
