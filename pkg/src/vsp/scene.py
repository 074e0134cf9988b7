"""Procedural renderer for a mock spacecraft seen from any viewpoint.

Stands in for simulator/CAD imagery: a software rasterizer draws a
parameterized target (bus with asymmetric markings, twin solar-panel wings
with internal struts, a radiometer cylinder) under configurable directional
lighting, in two shading modes. "visible" uses textured, lighting-dependent
flat shading; "thermal" suppresses textures, flattens lighting contrast,
equalizes the color channels, and renders the panels semi-transparent so
the support struts show through. The panel wings are symmetric under a
180-degree azimuth rotation; only the bus markings break that symmetry.

Outputs are 8-bit RGBA samples (alpha marks target coverage) plus a
JSON-lines manifest with one row per sample.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .viewsphere import PHASE2, Viewpoint, bin_viewpoint, los_vector

VISIBLE = "visible"
THERMAL = "thermal"

MANIFEST_NAME = "manifest.jsonl"


# ---------------------------------------------------------------------------
# target geometry


@dataclass
class TargetModel:
    """Dimensions of the procedural target, in model units."""

    bus_half: float = 0.5
    panel_inner: float = 0.7  # wing start along the hinge axis
    panel_outer: float = 2.3  # wing tip
    panel_halfwidth: float = 0.45
    panel_thickness: float = 0.02
    strut_count: int = 3
    radiometer_radius: float = 0.22
    radiometer_height: float = 0.6
    radiometer_segments: int = 12


# material table: (albedo rgb for visible, emission level for thermal)
_MATERIALS = {
    "bus": ((0.82, 0.66, 0.26), 0.75),
    "radiator": ((0.86, 0.89, 0.93), 0.40),
    "antenna": ((0.74, 0.74, 0.78), 0.88),
    "panel_front": ((0.10, 0.14, 0.34), 0.52),
    "panel_back": ((0.44, 0.43, 0.41), 0.52),
    "strut": ((0.62, 0.62, 0.62), 0.95),
    "radiometer": ((0.80, 0.78, 0.74), 0.62),
}

_PANEL_LINE_RGB = (0.58, 0.62, 0.70)


def _quad(a, b, c, d, mat, uv=False, face=None):
    # two triangles with the outward normal implied by ccw order a,b,c,d
    uvs = [((0, 0), (1, 0), (1, 1)), ((0, 0), (1, 1), (0, 1))] if uv else [None, None]
    return [
        {"verts": (a, b, c), "mat": mat, "uv": uvs[0], "face": face},
        {"verts": (a, c, d), "mat": mat, "uv": uvs[1], "face": face},
    ]


def _box(lo, hi, mat):
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    tris = []
    tris += _quad((x1, y0, z0), (x1, y1, z0), (x1, y1, z1), (x1, y0, z1), mat)  # +x
    tris += _quad((x0, y1, z0), (x0, y0, z0), (x0, y0, z1), (x0, y1, z1), mat)  # -x
    tris += _quad((x1, y1, z0), (x0, y1, z0), (x0, y1, z1), (x1, y1, z1), mat)  # +y
    tris += _quad((x0, y0, z0), (x1, y0, z0), (x1, y0, z1), (x0, y0, z1), mat)  # -y
    tris += _quad((x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1), mat)  # +z
    tris += _quad((x0, y1, z0), (x1, y1, z0), (x1, y0, z0), (x0, y0, z0), mat)  # -z
    return tris


def _cylinder(radius, z0, z1, segments, mat):
    tris = []
    for k in range(segments):
        a0 = 2.0 * math.pi * k / segments
        a1 = 2.0 * math.pi * (k + 1) / segments
        p0 = (radius * math.cos(a0), radius * math.sin(a0))
        p1 = (radius * math.cos(a1), radius * math.sin(a1))
        tris += _quad(
            (p0[0], p0[1], z0), (p1[0], p1[1], z0), (p1[0], p1[1], z1), (p0[0], p0[1], z1), mat
        )
        tris.append({"verts": ((0, 0, z1), (p0[0], p0[1], z1), (p1[0], p1[1], z1)),
                     "mat": mat, "uv": None, "face": None})
        tris.append({"verts": ((0, 0, z0), (p1[0], p1[1], z0), (p0[0], p0[1], z0)),
                     "mat": mat, "uv": None, "face": None})
    return tris


def build_mesh(model: TargetModel | None = None):
    """Triangle list for the target; geometry is identical in both modalities."""
    m = model or TargetModel()
    b = m.bus_half
    t = m.panel_thickness
    tris = []

    tris += _box((-b, -b, -b), (b, b, b), "bus")

    # asymmetric bus markings: antenna blobs on the +x face, radiator decal on -x
    tris += _box((b, 0.12, 0.08), (b + 0.30, 0.34, 0.30), "antenna")
    tris += _box((b, -0.32, -0.36), (b + 0.22, -0.14, -0.16), "antenna")
    tris += _quad(
        (-b - 0.002, 0.06, -0.30),
        (-b - 0.002, -0.36, -0.30),
        (-b - 0.002, -0.36, 0.26),
        (-b - 0.002, 0.06, 0.26),
        "radiator",
    )

    tris += _cylinder(m.radiometer_radius, b, b + m.radiometer_height, m.radiometer_segments,
                      "radiometer")

    # panel wings: front/back faces (translucent in thermal) with struts between
    hw = m.panel_halfwidth
    for side, tag in ((1.0, "p"), (-1.0, "n")):
        y0, y1 = side * m.panel_inner, side * m.panel_outer
        if side < 0:
            y0, y1 = y1, y0
        tris += _quad((t, y0, -hw), (t, y1, -hw), (t, y1, hw), (t, y0, hw),
                      "panel_front", uv=True, face=f"wing_{tag}_front")
        tris += _quad((-t, y1, -hw), (-t, y0, -hw), (-t, y0, hw), (-t, y1, hw),
                      "panel_back", face=f"wing_{tag}_back")
        for s in range(m.strut_count):
            zc = -hw + (s + 0.5) * (2 * hw / m.strut_count)
            tris += _box((-0.008, min(y0, y1), zc - 0.02), (0.008, max(y0, y1), zc + 0.02), "strut")
        # hinge boom from bus to wing
        tris += _box((-0.03, min(side * b, side * m.panel_inner), -0.03),
                     (0.03, max(side * b, side * m.panel_inner), 0.03), "strut")

    return tris


# ---------------------------------------------------------------------------
# lighting


@dataclass
class LightingSetup:
    """Directional lights (unit direction toward the light) plus ambient."""

    directions: list
    intensities: list
    ambient: float
    setup_id: int = 0

    def __post_init__(self):
        if self.ambient <= 0:
            raise ValueError("ambient level must be positive so the target is never fully black")
        if len(self.directions) != len(self.intensities):
            raise ValueError("one intensity per light direction")


_LIGHT_ELEVATIONS = [25.0, -20.0, 40.0, -5.0, 10.0, -35.0, 55.0]
_LIGHT_INTENSITIES = [0.85, 0.55, 1.15]

LIGHTING_VARIANTS = 21  # 7 key-light directions x 3 intensity levels


def make_lighting(lighting_id: int) -> LightingSetup:
    """One of the 21 canonical variants: direction index * 3 + intensity index."""
    if not 0 <= lighting_id < LIGHTING_VARIANTS:
        raise ValueError(f"lighting_id must be in [0,{LIGHTING_VARIANTS}), got {lighting_id}")
    d, k = divmod(lighting_id, 3)
    az = 35.0 + d * (360.0 / 7.0)
    direction = los_vector(Viewpoint(az, _LIGHT_ELEVATIONS[d]))
    return LightingSetup([direction], [_LIGHT_INTENSITIES[k]], ambient=0.25, setup_id=lighting_id)


# ---------------------------------------------------------------------------
# camera and rasterization


_CAMERA_DISTANCE = 7.0
_FOV_HALF_DEG = 24.0
_PANEL_ALPHA = 0.55  # per-face opacity of panels in thermal mode
_THERMAL_BASE = 0.80  # emission weight; remainder follows (flattened) lighting


def _camera_basis(vp: Viewpoint):
    los = np.array(los_vector(vp))
    cam_pos = los * _CAMERA_DISTANCE
    fwd = -los
    az = math.radians(vp.azimuth_deg)
    el = math.radians(vp.elevation_deg)
    # spherical "north" tangent d(los)/d(el): well-defined at the poles too
    up = np.array([-math.sin(el) * math.cos(az), -math.sin(el) * math.sin(az), math.cos(el)])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    return cam_pos, right, up, fwd


def _light_factor(normal, lighting: LightingSetup) -> float:
    lam = 0.0
    for direction, intensity in zip(lighting.directions, lighting.intensities):
        lam += max(0.0, float(np.dot(normal, direction))) * intensity
    return lighting.ambient + lam


def _shade(mat: str, normal, lighting: LightingSetup, modality: str):
    factor = _light_factor(normal, lighting)
    albedo, emission = _MATERIALS[mat]
    if modality == THERMAL:
        v = emission * (_THERMAL_BASE + (1.0 - _THERMAL_BASE) * factor)
        return np.array([v, v, v])
    return np.array(albedo) * factor


def _panel_albedo(u, v):
    # grid of bright cell borders over dark cells, on the wing front only
    gu = (u * 8.0) % 1.0
    gv = (v * 3.0) % 1.0
    line = (gu < 0.07) | (gu > 0.93) | (gv < 0.10) | (gv > 0.90)
    base = np.array(_MATERIALS["panel_front"][0])
    return np.where(line[:, None], np.array(_PANEL_LINE_RGB), base)


def render(
    vp: Viewpoint,
    modality: str = VISIBLE,
    lighting: LightingSetup | None = None,
    resolution: int = 128,
    seed: int = 0,
    model: TargetModel | None = None,
):
    """Rasterize the target from `vp`; returns a Sample with an RGBA image.

    Pinhole projection, target centered, depth-buffered flat shading, no
    anti-aliasing. Deterministic: identical arguments give bit-identical
    rasters.
    """
    if modality not in (VISIBLE, THERMAL):
        raise ValueError(f"modality must be '{VISIBLE}' or '{THERMAL}', got {modality!r}")
    if resolution < 32:
        raise ValueError(f"resolution {resolution} too small to resolve the target (minimum 32)")
    if resolution % 2:
        raise ValueError(f"resolution must be a multiple of 2, got {resolution}")
    lighting = lighting if lighting is not None else make_lighting(0)

    tris = build_mesh(model)
    cam_pos, right, up, fwd = _camera_basis(vp)
    focal = 1.0 / math.tan(math.radians(_FOV_HALF_DEG))
    res = resolution

    color = np.zeros((res, res, 3), dtype=np.float64)
    zbuf = np.zeros((res, res), dtype=np.float64)  # stores 1/z; larger is closer
    covered = np.zeros((res, res), dtype=bool)

    # translucent panel fragments, keyed per face so quad seams blend once
    layers: dict[str, list] = {}

    for tri in tris:
        verts = np.array(tri["verts"], dtype=np.float64)
        e1 = verts[1] - verts[0]
        e2 = verts[2] - verts[0]
        normal = np.cross(e1, e2)
        nn = np.linalg.norm(normal)
        if nn < 1e-12:
            continue
        normal /= nn
        if np.dot(normal, cam_pos - verts[0]) <= 0.0:
            continue  # back-facing

        rel = verts - cam_pos
        zc = rel @ fwd
        if np.any(zc <= 1e-6):
            continue  # behind the camera; cannot happen for a centered target
        xc = rel @ right
        yc = rel @ up
        px = (focal * xc / zc + 1.0) * 0.5 * res
        py = (1.0 - focal * yc / zc) * 0.5 * res
        inv_z = 1.0 / zc

        x0 = max(int(math.floor(px.min() - 0.5)), 0)
        x1 = min(int(math.ceil(px.max() + 0.5)), res - 1)
        y0 = max(int(math.floor(py.min() - 0.5)), 0)
        y1 = min(int(math.ceil(py.max() + 0.5)), res - 1)
        if x0 > x1 or y0 > y1:
            continue

        xs = np.arange(x0, x1 + 1) + 0.5
        ys = np.arange(y0, y1 + 1) + 0.5
        gx, gy = np.meshgrid(xs, ys)

        def edge(ax, ay, bx, by):
            return (bx - ax) * (gy - ay) - (by - ay) * (gx - ax)

        area = (px[1] - px[0]) * (py[2] - py[0]) - (py[1] - py[0]) * (px[2] - px[0])
        if abs(area) < 1e-12:
            continue
        w0 = edge(px[1], py[1], px[2], py[2]) / area
        w1 = edge(px[2], py[2], px[0], py[0]) / area
        w2 = edge(px[0], py[0], px[1], py[1]) / area
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue

        frag_inv_z = w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2]
        mat = tri["mat"]
        window = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        covered[window] |= inside

        if modality == THERMAL and mat in ("panel_front", "panel_back"):
            shade = float(_shade(mat, normal, lighting, modality)[0])
            face = layers.setdefault(
                tri["face"],
                [np.zeros((res, res), dtype=bool), np.zeros((res, res)), shade],
            )
            face[0][window] |= inside
            zslab = face[1][window]
            zslab[inside] = frag_inv_z[inside]
            continue

        if tri["uv"] is not None and modality == VISIBLE:
            uvs = np.array(tri["uv"], dtype=np.float64)
            u_over_z = w0 * uvs[0, 0] * inv_z[0] + w1 * uvs[1, 0] * inv_z[1] + w2 * uvs[2, 0] * inv_z[2]
            v_over_z = w0 * uvs[0, 1] * inv_z[0] + w1 * uvs[1, 1] * inv_z[1] + w2 * uvs[2, 1] * inv_z[2]
            with np.errstate(invalid="ignore", divide="ignore"):
                uu = np.where(inside, u_over_z / frag_inv_z, 0.0)
                vv = np.where(inside, v_over_z / frag_inv_z, 0.0)
            factor = _light_factor(normal, lighting)
            frag_rgb = np.zeros(inside.shape + (3,))
            frag_rgb[inside] = _panel_albedo(uu[inside].ravel(), vv[inside].ravel()) * factor
        else:
            frag_rgb = np.broadcast_to(_shade(mat, normal, lighting, modality), inside.shape + (3,))

        zwin = zbuf[window]
        take = inside & (frag_inv_z > zwin)
        zwin[take] = frag_inv_z[take]
        color[window][take] = frag_rgb[take]

    # composite translucent panel faces far-to-near over the opaque result
    if layers:
        entries = [layers[k] for k in sorted(layers)]
        frag_m = np.stack([e[0] for e in entries])
        frag_z = np.stack([e[1] for e in entries])
        shades = [e[2] for e in entries]
        order = np.argsort(frag_z, axis=0, kind="stable")  # far to near
        shade_arr = np.array(shades)
        for rank in range(len(entries)):
            idx = order[rank]
            lz = np.take_along_axis(frag_z, idx[None], axis=0)[0]
            lm = np.take_along_axis(frag_m, idx[None], axis=0)[0]
            lval = shade_arr[idx]
            blend = lm & (lz > zbuf)
            for ch in range(3):
                cc = color[..., ch]
                cc[blend] = (1.0 - _PANEL_ALPHA) * cc[blend] + _PANEL_ALPHA * lval[blend]

    rgba = np.zeros((res, res, 4), dtype=np.uint8)
    rgba[..., :3] = np.clip(np.rint(color * 255.0), 0, 255).astype(np.uint8)
    rgba[..., 3] = np.where(covered, 255, 0).astype(np.uint8)

    return Sample(
        image=rgba,
        viewpoint=vp,
        labels=bin_viewpoint(vp, PHASE2),
        modality=modality,
        lighting_id=lighting.setup_id,
        split="train",
    )


# ---------------------------------------------------------------------------
# samples, manifests, datasets


@dataclass
class Sample:
    """One rendered, labeled raster: HxWx4 uint8 (RGB + coverage alpha)."""

    image: np.ndarray
    viewpoint: Viewpoint
    labels: object
    modality: str
    lighting_id: int
    split: str
    frame_index: int | None = None


@dataclass
class TrajectorySpec:
    """Constant-elevation sweep: frame i sits at wrap(start + i*rate) degrees."""

    elevation_deg: float = 0.0
    rate_deg_per_frame: float = 0.6
    frames: int = 1174
    modality: str = THERMAL
    lighting_id: int = 0
    start_azimuth_deg: float = 0.0

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError(f"frame count must be >= 1, got {self.frames}")
        if self.rate_deg_per_frame == 0:
            raise ValueError("azimuth rate must be nonzero")


def manifest_row(sample: Sample, rel_path: str) -> dict:
    row = {
        "path": rel_path,
        "azimuth_deg": sample.viewpoint.azimuth_deg,
        "elevation_deg": sample.viewpoint.elevation_deg,
        "az_class": sample.labels.az_class,
        "el_class": sample.labels.el_class,
        "modality": sample.modality,
        "lighting_id": sample.lighting_id,
        "split": sample.split,
    }
    if sample.frame_index is not None:
        row["frame_index"] = sample.frame_index
    return row


def write_manifest(rows, out_dir):
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def read_manifest(path):
    """Rows of a manifest file; each gains a '_dir' key for resolving paths."""
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            row["_dir"] = base
            rows.append(row)
    return rows


def load_image(row) -> np.ndarray:
    """Decode a manifest row's PNG back to HxWx4 uint8."""
    path = os.path.join(row["_dir"], row["path"]) if "_dir" in row else row["path"]
    with Image.open(path) as im:
        return np.asarray(im.convert("RGBA"))


def _save_png(rgba: np.ndarray, path: str):
    Image.fromarray(rgba, "RGBA").save(path)


def _run_jobs(fn, jobs, threads):
    if threads <= 1:
        return [fn(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, jobs))


def generate_grid(
    az_step: float = 10.0,
    el_step: float = 10.0,
    lighting_count: int = 21,
    modality: str = VISIBLE,
    out_dir: str = ".",
    resolution: int = 128,
    seed: int = 0,
    threads: int = 1,
    model: TargetModel | None = None,
):
    """Render every (azimuth, elevation, lighting) triple at bin centers.

    Azimuths sit at k*az_step; elevations at -90 + el_step*(i + 1/2), so a
    10-degree grid lands exactly on the class centers of the 36x18 scheme.
    Returns the manifest rows.
    """
    if az_step <= 0 or 360.0 % az_step != 0:
        raise ValueError(f"--az-step must divide 360, got {az_step}")
    if el_step <= 0 or 180.0 % el_step != 0:
        raise ValueError(f"--el-step must divide 180, got {el_step}")
    if not 1 <= lighting_count <= LIGHTING_VARIANTS:
        raise ValueError(f"--lighting must be in [1,{LIGHTING_VARIANTS}], got {lighting_count}")
    os.makedirs(out_dir, exist_ok=True)

    jobs = []
    for ai in range(int(round(360.0 / az_step))):
        for ei in range(int(round(180.0 / el_step))):
            for lid in range(lighting_count):
                az = ai * az_step
                el = -90.0 + el_step * (ei + 0.5)
                name = f"az{ai:03d}_el{ei:02d}_l{lid:02d}.png"
                jobs.append((az, el, lid, name))

    def render_one(job):
        az, el, lid, name = job
        return render(
            Viewpoint(az, el), modality, make_lighting(lid), resolution, seed=seed, model=model
        )

    samples = _run_jobs(render_one, jobs, threads)
    rows = []
    for (az, el, lid, name), sample in zip(jobs, samples):
        _save_png(sample.image, os.path.join(out_dir, name))
        rows.append(manifest_row(sample, name))
    write_manifest(rows, out_dir)
    return rows


def generate_trajectory(
    spec: TrajectorySpec,
    out_dir: str = ".",
    resolution: int = 128,
    seed: int = 0,
    threads: int = 1,
    model: TargetModel | None = None,
):
    """Render a continuous sweep; frames land between grid viewpoints."""
    os.makedirs(out_dir, exist_ok=True)
    lighting = make_lighting(spec.lighting_id)

    def render_one(i):
        az = (spec.start_azimuth_deg + i * spec.rate_deg_per_frame) % 360.0
        s = render(Viewpoint(az, spec.elevation_deg), spec.modality, lighting, resolution,
                   seed=seed, model=model)
        s.split = "test"
        s.frame_index = i
        return s

    samples = _run_jobs(render_one, list(range(spec.frames)), threads)
    rows = []
    for i, sample in enumerate(samples):
        name = f"f{i:06d}.png"
        _save_png(sample.image, os.path.join(out_dir, name))
        rows.append(manifest_row(sample, name))
    write_manifest(rows, out_dir)
    return rows
