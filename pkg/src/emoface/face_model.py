"""Linear parametric head model and its geometric utilities.

The model maps identity shape coefficients, expression coefficients and
pose coefficients to mesh vertices through pure linear blendshape bases:

    vertices = template + shape_basis @ beta
                        + expression_basis @ phi
                        + pose_basis @ theta

Linearity keeps every downstream oracle exact and the map trivially
differentiable. A deterministic synthetic head builder stands in for
licensed large-scale head model assets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from . import blobs
from .errors import ConfigurationError

# Mirror across the x=0 (sagittal) plane.
_MIRROR = np.array([-1.0, 1.0, 1.0])

LIP_KEYPOINT_COUNT = 24


class MouthExtremities(NamedTuple):
    top: int
    bottom: int
    left: int
    right: int


@dataclass
class FlameParams:
    """One frame of face parameters: expression phi and pose theta."""

    expression: np.ndarray
    pose: np.ndarray
    stage: str = "raw"  # "raw" or "enhanced"

    def __post_init__(self):
        if self.stage not in ("raw", "enhanced"):
            raise ConfigurationError(f"unknown params stage {self.stage!r}")
        for vec in (self.expression, self.pose):
            finite = torch.isfinite(vec).all() if torch.is_tensor(vec) else np.all(np.isfinite(vec))
            if not finite:
                raise ConfigurationError("face parameters must be finite")

    def vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.expression), np.asarray(self.pose)])

    @classmethod
    def from_vector(cls, vec, n_expression: int, stage: str = "raw") -> "FlameParams":
        vec = np.asarray(vec, dtype=np.float64)
        return cls(expression=vec[:n_expression], pose=vec[n_expression:], stage=stage)


@dataclass
class FaceModel:
    """Template mesh plus linear shape/expression/pose bases and index sets."""

    template_vertices: np.ndarray  # (V, 3) meters
    faces: np.ndarray  # (F, 3) int
    shape_basis: np.ndarray  # (V, 3, S)
    expression_basis: np.ndarray  # (V, 3, E)
    pose_basis: np.ndarray  # (V, 3, P)
    vertex_mask: np.ndarray  # (V,) bool, front face minus ears/eyes
    lip_keypoints: np.ndarray  # (24,) int, outer ring then inner ring
    mouth_extremities: MouthExtremities
    symmetry_pairs: np.ndarray  # (K, 2) int, (left, right)
    midline: np.ndarray  # (M,) int, template x == 0
    expression_names: list[str] = field(default_factory=list)
    pose_names: list[str] = field(default_factory=list)
    _torch_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def n_expression(self) -> int:
        return self.expression_basis.shape[2]

    @property
    def n_pose(self) -> int:
        return self.pose_basis.shape[2]

    @property
    def n_params(self) -> int:
        return self.n_expression + self.n_pose

    def validate(self) -> None:
        v = self.n_vertices
        for name, idx in (
            ("faces", self.faces),
            ("lip_keypoints", self.lip_keypoints),
            ("symmetry_pairs", self.symmetry_pairs),
            ("midline", self.midline),
        ):
            arr = np.asarray(idx)
            if arr.size and (arr.min() < 0 or arr.max() >= v):
                raise ConfigurationError(f"{name} contains indices outside [0, {v})")
        if len(set(self.lip_keypoints.tolist())) != LIP_KEYPOINT_COUNT:
            raise ConfigurationError(
                f"lip_keypoints must hold {LIP_KEYPOINT_COUNT} distinct indices"
            )
        lips = set(self.lip_keypoints.tolist())
        if not set(self.mouth_extremities).issubset(lips):
            raise ConfigurationError("mouth extremities must be lip-region vertices")
        flat = self.symmetry_pairs.reshape(-1).tolist()
        if len(set(flat)) != len(flat):
            raise ConfigurationError("symmetry_pairs must pair each vertex at most once")
        if set(flat) & set(self.midline.tolist()):
            raise ConfigurationError("midline vertices cannot appear in symmetry_pairs")
        if self.midline.size and np.abs(self.template_vertices[self.midline, 0]).max() > 1e-9:
            raise ConfigurationError("midline vertices must sit on the x=0 plane")
        if self.vertex_mask.shape != (v,):
            raise ConfigurationError("vertex_mask length must equal vertex count")

    def torch_tensor(self, name: str) -> torch.Tensor:
        """Float64 torch view of a model array, cached per model."""
        if name not in self._torch_cache:
            self._torch_cache[name] = torch.from_numpy(
                np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            )
        return self._torch_cache[name]


def _check_length(vec, expected: int, axis: str):
    vec_len = vec.shape[-1] if hasattr(vec, "shape") else len(vec)
    if vec_len != expected:
        raise ConfigurationError(
            f"{axis} coefficient length {vec_len} does not match basis size {expected}"
        )


def _as_coeffs(vec, n: int):
    if vec is None:
        return np.zeros(n)
    return vec


def evaluate_mesh(model: FaceModel, shape, params: FlameParams):
    """Evaluate the linear model at (beta, phi, theta).

    Accepts numpy arrays or torch tensors for the coefficients; with torch
    inputs the returned vertices carry gradients w.r.t. phi and theta.
    """
    shape = _as_coeffs(shape, model.n_shape)
    expression, pose = params.expression, params.pose
    _check_length(shape, model.n_shape, "shape")
    _check_length(expression, model.n_expression, "expression")
    _check_length(pose, model.n_pose, "pose")

    if torch.is_tensor(expression) or torch.is_tensor(pose):
        t_shape = torch.as_tensor(shape, dtype=torch.float64)
        t_expr = torch.as_tensor(expression, dtype=torch.float64)
        t_pose = torch.as_tensor(pose, dtype=torch.float64)
        verts = model.torch_tensor("template_vertices")
        verts = verts + torch.einsum("vcs,s->vc", model.torch_tensor("shape_basis"), t_shape)
        verts = verts + torch.einsum("vce,e->vc", model.torch_tensor("expression_basis"), t_expr)
        verts = verts + torch.einsum("vcp,p->vc", model.torch_tensor("pose_basis"), t_pose)
        return verts

    verts = model.template_vertices.copy()
    verts += model.shape_basis @ np.asarray(shape, dtype=np.float64)
    verts += model.expression_basis @ np.asarray(expression, dtype=np.float64)
    verts += model.pose_basis @ np.asarray(pose, dtype=np.float64)
    return verts


def evaluate_sequence(model: FaceModel, shape, param_seq):
    """Vectorized evaluate_mesh over a (T, E+P) parameter sequence."""
    ne = model.n_expression
    _check_length(param_seq, model.n_params, "params")
    if torch.is_tensor(param_seq):
        base = evaluate_mesh(
            model,
            shape,
            FlameParams(np.zeros(ne), np.zeros(model.n_pose)),
        )
        base_t = torch.as_tensor(base, dtype=torch.float64)
        expr = param_seq[:, :ne]
        pose = param_seq[:, ne:]
        verts = base_t.unsqueeze(0)
        verts = verts + torch.einsum("vce,te->tvc", model.torch_tensor("expression_basis"), expr)
        verts = verts + torch.einsum("vcp,tp->tvc", model.torch_tensor("pose_basis"), pose)
        return verts
    param_seq = np.asarray(param_seq, dtype=np.float64)
    base = evaluate_mesh(model, shape, FlameParams(np.zeros(ne), np.zeros(model.n_pose)))
    verts = base[None] + np.einsum("vce,te->tvc", model.expression_basis, param_seq[:, :ne])
    verts += np.einsum("vcp,tp->tvc", model.pose_basis, param_seq[:, ne:])
    return verts


def mouth_shape(vertices, model: FaceModel):
    """Mouth width H = |v_l - v_r| and height V = |v_t - v_b| in meters."""
    ext = model.mouth_extremities

    def dist(a, b):
        d = vertices[a] - vertices[b]
        return ((d * d).sum()) ** 0.5

    return dist(ext.left, ext.right), dist(ext.top, ext.bottom)


def apply_bilateral_symmetry(vertices, model: FaceModel) -> np.ndarray:
    """Project vertices onto the mirror-symmetric subspace.

    Paired vertices are averaged with the mirror image of their partner;
    midline vertices get x snapped to 0. Idempotent by construction.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    out = vertices.copy()
    left = model.symmetry_pairs[:, 0]
    right = model.symmetry_pairs[:, 1]
    out[left] = 0.5 * (vertices[left] + vertices[right] * _MIRROR)
    out[right] = out[left] * _MIRROR
    out[model.midline, 0] = 0.0
    return out


# ---------------------------------------------------------------------------
# Synthetic head builder
# ---------------------------------------------------------------------------


@dataclass
class SyntheticModelConfig:
    rows: int = 14  # latitude bands between the poles
    cols: int = 24  # longitudes; multiple of 4 for exact midline columns
    n_expression: int = 50
    n_pose: int = 6
    n_shape: int = 4
    half_axes: tuple = (0.075, 0.095, 0.080)  # x, y, z extents in meters
    mouth_colatitude: float = 0.72  # fraction of pi down from the top pole
    lip_half_width: float = 0.024  # outer contour, meters
    lip_half_height: float = 0.012
    inner_lip_scale: tuple = (0.6, 0.3)  # (width, height) vs outer contour
    eye_radius: float = 0.014
    ear_x_fraction: float = 0.75  # |x| beyond this fraction of the x axis is "ear"

    @property
    def n_vertices(self) -> int:
        return 2 + self.rows * self.cols + LIP_KEYPOINT_COUNT


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _gauss_field(points, centers, amps, scales):
    """Sum of vector-valued Gaussian bumps evaluated at each point."""
    disp = np.zeros_like(points)
    for c, a, s in zip(centers, amps, scales):
        d2 = ((points - c) ** 2).sum(axis=1)
        disp += np.exp(-d2 / (2.0 * s * s))[:, None] * a
    return disp


def _symmetrize(field_fn, points):
    """Average a displacement field with its mirror image; exactly symmetric."""
    direct = field_fn(points)
    mirrored = field_fn(points * _MIRROR)
    return 0.5 * (direct + mirrored * _MIRROR)


def build_synthetic_model(config: SyntheticModelConfig, seed: int) -> FaceModel:
    """Deterministic desk-scale head model with smooth symmetric bases."""
    rows, cols = config.rows, config.cols
    if cols < 4 or cols % 4 != 0:
        raise ConfigurationError("cols must be a positive multiple of 4")
    if config.n_vertices < 64:
        raise ConfigurationError(
            f"{config.n_vertices} vertices is too small to place "
            f"{LIP_KEYPOINT_COUNT} lip keypoints on a usable head"
        )
    ax, ay, az = config.half_axes
    rng = np.random.default_rng(seed)

    # Grid vertices: poles first, then latitude rings, then lip contours.
    verts = np.zeros((config.n_vertices, 3))
    verts[0] = (0.0, ay, 0.0)
    verts[1] = (0.0, -ay, 0.0)

    def ring_index(i, j):
        return 2 + i * cols + (j % cols)

    thetas = np.pi * (np.arange(1, rows + 1)) / (rows + 1)
    phis = 2.0 * np.pi * np.arange(cols) / cols
    for i, th in enumerate(thetas):
        for j, ph in enumerate(phis):
            verts[ring_index(i, j)] = (
                ax * np.sin(th) * np.cos(ph),
                ay * np.cos(th),
                az * np.sin(th) * np.sin(ph),
            )

    # Lip contours on the ellipsoid surface, parametrized in (theta, phi).
    theta_m = np.pi * config.mouth_colatitude
    phi_m = 0.5 * np.pi  # front midline
    dphi_outer = config.lip_half_width / (ax * np.sin(theta_m))
    dtheta_outer = config.lip_half_height / (ay * np.sin(theta_m))
    dphi_inner = dphi_outer * config.inner_lip_scale[0]
    dtheta_inner = dtheta_outer * config.inner_lip_scale[1]
    lip_base = 2 + rows * cols
    alphas = 2.0 * np.pi * np.arange(12) / 12.0
    for k, (dph, dth) in enumerate(((dphi_outer, dtheta_outer), (dphi_inner, dtheta_inner))):
        for m, al in enumerate(alphas):
            th = theta_m - dth * np.sin(al)
            ph = phi_m - dph * np.cos(al)  # alpha=0 lands at x > 0 (the mouth's right)
            verts[lip_base + 12 * k + m] = (
                ax * np.sin(th) * np.cos(ph),
                ay * np.cos(th),
                az * np.sin(th) * np.sin(ph),
            )

    # Symmetry bookkeeping. Grid column j mirrors to (cols/2 - j) mod cols;
    # lip angle slot m mirrors to (6 - m) mod 12.
    pairs = []
    midline = [0, 1]
    for i in range(rows):
        for j in range(cols):
            jm = (cols // 2 - j) % cols
            if jm == j:
                midline.append(ring_index(i, j))
            elif j < jm:
                pairs.append((ring_index(i, j), ring_index(i, jm)))
    for k in range(2):
        for m in range(12):
            mm = (6 - m) % 12
            a, b = lip_base + 12 * k + m, lip_base + 12 * k + mm
            if mm == m:
                midline.append(a)
            elif m < mm:
                pairs.append((a, b))

    # Snap the mesh to exact symmetry: rebuild one side from the other and
    # zero the midline x coordinate (cos/sin identities only hold to ulp).
    pairs = np.asarray(pairs, dtype=np.int64)
    midline = np.asarray(sorted(midline), dtype=np.int64)
    verts[midline, 0] = 0.0
    verts[pairs[:, 1]] = verts[pairs[:, 0]] * _MIRROR
    # Orient pairs as (left, right) by template x.
    swap = verts[pairs[:, 0], 0] > 0
    pairs[swap] = pairs[swap][:, ::-1]

    # Faces: pole fans, latitude strips, lip annulus.
    faces = []
    for j in range(cols):
        faces.append((0, ring_index(0, j), ring_index(0, j + 1)))
    for i in range(rows - 1):
        for j in range(cols):
            a, b = ring_index(i, j), ring_index(i + 1, j)
            c, d = ring_index(i + 1, j + 1), ring_index(i, j + 1)
            faces.append((a, b, c))
            faces.append((a, c, d))
    for j in range(cols):
        faces.append((1, ring_index(rows - 1, j + 1), ring_index(rows - 1, j)))
    for m in range(12):
        o1, o2 = lip_base + m, lip_base + (m + 1) % 12
        i1, i2 = lip_base + 12 + m, lip_base + 12 + (m + 1) % 12
        faces.append((o1, o2, i2))
        faces.append((o1, i2, i1))
    faces = np.asarray(faces, dtype=np.int64)

    lip_keypoints = np.arange(lip_base, lip_base + LIP_KEYPOINT_COUNT, dtype=np.int64)
    extremities = MouthExtremities(
        top=int(lip_base + 12 + 3),  # inner contour, alpha = 90 deg
        bottom=int(lip_base + 12 + 9),  # inner contour, alpha = 270 deg
        left=int(lip_base + 6),  # outer contour, alpha = 180 deg
        right=int(lip_base + 0),  # outer contour, alpha = 0
    )

    # Vertex mask: front of the face, excluding ear strips and eye discs.
    mouth_center = np.array([0.0, ay * np.cos(theta_m), az * np.sin(theta_m)])
    eye_th, eye_dph = 0.40 * np.pi, 0.30
    eyes = np.array(
        [
            (
                ax * np.sin(eye_th) * np.cos(phi_m + s * eye_dph),
                ay * np.cos(eye_th),
                az * np.sin(eye_th) * np.sin(phi_m + s * eye_dph),
            )
            for s in (-1.0, 1.0)
        ]
    )
    mask = verts[:, 2] > 0.25 * az
    mask &= np.abs(verts[:, 0]) < config.ear_x_fraction * ax
    for eye in eyes:
        mask &= np.linalg.norm(verts - eye, axis=1) > config.eye_radius

    # --- Expression basis ---------------------------------------------------
    y_mouth = mouth_center[1]

    def jaw_weight(p):
        w_y = 1.0 / (1.0 + np.exp((p[:, 1] - (y_mouth - 0.002)) / 0.003))
        w_z = _smoothstep((p[:, 2] + 0.01) / 0.05)
        return w_y * w_z

    def jaw_open_field(p):
        return jaw_weight(p)[:, None] * np.array([0.0, -0.020, 0.004])

    corner_r = verts[extremities.right].copy()

    def mouth_wide_field(p):
        d2 = ((p - corner_r) ** 2).sum(axis=1)
        bump = np.exp(-d2 / (2.0 * 0.016**2))
        return bump[:, None] * np.array([0.012, 0.004, 0.0])

    def random_field(n_bumps, amp_scale):
        dirs = rng.normal(size=(n_bumps, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        centers = dirs * np.array(config.half_axes) * rng.uniform(0.9, 1.1, (n_bumps, 1))
        amps = rng.normal(size=(n_bumps, 3)) * amp_scale
        scales = rng.uniform(0.02, 0.05, n_bumps)

        def fn(p):
            return _gauss_field(p, centers, amps, scales)

        return fn

    expr_modes = [
        _symmetrize(jaw_open_field, verts),
        _symmetrize(mouth_wide_field, verts),
    ]
    expression_names = ["jaw_open", "mouth_wide"]
    for k in range(2, config.n_expression):
        expr_modes.append(_symmetrize(random_field(5, 0.006), verts))
        expression_names.append(f"expr_{k:02d}")
    expression_basis = np.stack(expr_modes, axis=2)

    # --- Pose basis ----------------------------------------------------------
    def rotation_field(center, scale, weight_fn):
        def fn(p):
            rel = p - center
            disp = np.stack(
                [np.zeros(len(p)), -rel[:, 2], rel[:, 1]], axis=1
            )  # x-axis angular velocity, linearized
            return disp * scale * weight_fn(p)[:, None]

        return fn

    def translation_field(vec, weight_fn):
        def fn(p):
            return weight_fn(p)[:, None] * np.asarray(vec)

        return fn

    def everywhere(p):
        return np.ones(len(p))

    hinge = np.array([0.0, y_mouth + 0.015, -0.01])
    neck = np.array([0.0, -ay, -0.01])
    pose_defs = [
        ("jaw_pitch", rotation_field(hinge, 0.25, jaw_weight)),
        ("jaw_thrust", translation_field([0.0, 0.0, 0.008], jaw_weight)),
        ("jaw_clench", translation_field([0.0, -0.006, 0.0], jaw_weight)),
        ("neck_pitch", rotation_field(neck, 0.12, everywhere)),
        ("neck_bob", translation_field([0.0, 0.006, 0.0], everywhere)),
        ("neck_thrust", translation_field([0.0, 0.0, 0.006], everywhere)),
    ]
    pose_modes, pose_names = [], []
    for k in range(config.n_pose):
        if k < len(pose_defs):
            name, fn = pose_defs[k]
        else:
            name, fn = f"pose_{k:02d}", random_field(4, 0.004)
        pose_modes.append(_symmetrize(fn, verts))
        pose_names.append(name)
    pose_basis = np.stack(pose_modes, axis=2)

    # --- Shape basis ----------------------------------------------------------
    shape_modes = [
        _symmetrize(random_field(4, 0.010), verts) for _ in range(config.n_shape)
    ]
    shape_basis = np.stack(shape_modes, axis=2)

    model = FaceModel(
        template_vertices=verts,
        faces=faces,
        shape_basis=shape_basis,
        expression_basis=expression_basis,
        pose_basis=pose_basis,
        vertex_mask=mask,
        lip_keypoints=lip_keypoints,
        mouth_extremities=extremities,
        symmetry_pairs=pairs,
        midline=midline,
        expression_names=expression_names,
        pose_names=pose_names,
    )
    model.validate()
    return model


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_model(model: FaceModel, path) -> None:
    arrays = {
        "template_vertices": model.template_vertices,
        "faces": model.faces,
        "shape_basis": model.shape_basis,
        "expression_basis": model.expression_basis,
        "pose_basis": model.pose_basis,
        "vertex_mask": model.vertex_mask.astype(np.int64),
    }
    meta = {
        "kind": "face_model",
        "dims": {
            "V": model.n_vertices,
            "F": int(model.faces.shape[0]),
            "S": model.n_shape,
            "E": model.n_expression,
            "P": model.n_pose,
        },
        "lip_keypoints": model.lip_keypoints.tolist(),
        "mouth_extremities": list(model.mouth_extremities),
        "symmetry_pairs": model.symmetry_pairs.tolist(),
        "midline": model.midline.tolist(),
        "expression_names": model.expression_names,
        "pose_names": model.pose_names,
    }
    blobs.save_archive(path, arrays, meta)


def load_model(path) -> FaceModel:
    arrays, meta = blobs.load_archive(path)
    if meta.get("kind") != "face_model":
        raise ConfigurationError(f"{path} is not a face model archive")
    model = FaceModel(
        template_vertices=arrays["template_vertices"],
        faces=arrays["faces"],
        shape_basis=arrays["shape_basis"],
        expression_basis=arrays["expression_basis"],
        pose_basis=arrays["pose_basis"],
        vertex_mask=arrays["vertex_mask"].astype(bool),
        lip_keypoints=np.asarray(meta["lip_keypoints"], dtype=np.int64),
        mouth_extremities=MouthExtremities(*meta["mouth_extremities"]),
        symmetry_pairs=np.asarray(meta["symmetry_pairs"], dtype=np.int64),
        midline=np.asarray(meta["midline"], dtype=np.int64),
        expression_names=list(meta["expression_names"]),
        pose_names=list(meta["pose_names"]),
    )
    model.validate()
    return model


def obj_text(vertices, faces) -> str:
    """Wavefront OBJ text: `v x y z` lines then 1-based `f i j k` lines."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    lines = [f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}" for v in vertices]
    lines += [f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}" for f in faces]
    return "\n".join(lines) + "\n"


def export_obj(vertices, faces, path) -> None:
    Path(path).write_text(obj_text(vertices, faces))


def parse_obj(text: str):
    """Minimal OBJ reader for round-trip tests; triangles only."""
    verts, faces = [], []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64)
