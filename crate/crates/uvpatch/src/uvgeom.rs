//! UV-space geometry: the analytic face-patch mesh, z-buffered UV
//! rasterization, binary patch-region masks, differentiable patch
//! application, random similarity transforms, and Beta pose sampling.
//!
//! The mesh is a half-ellipsoid grid standing in for a regressed face mesh;
//! its constants are fixed so UV lookups are reproducible. Projection is
//! orthographic into normalized image coordinates (x right, y down, both in
//! [-1,1]); smaller depth values are nearer to the camera.

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::radiance::Pose;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

// Mesh constants (normalized-image units).
pub const MESH_GRID: usize = 24;
pub const MESH_SEMI_AXES: [f32; 3] = [0.45, 0.6, 0.35];
/// Latitude span of the ellipsoid patch as a fraction of a half-turn.
const MESH_LAT_SPAN: f32 = 0.84;

/// Triangle mesh with per-vertex UVs in [0,1]^2.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<[f32; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub uv: Vec<[f32; 2]>,
}

/// Half-ellipsoid "face" patch rotated to `pose`, with cylindrical UVs.
pub fn build_face_mesh(pose: &Pose) -> Mesh {
    let n = MESH_GRID;
    let [a, b, c] = MESH_SEMI_AXES;
    let yaw = pose.yaw_deg.to_radians();
    let pitch = pose.pitch_deg.to_radians();
    let (sy, cy) = (-yaw).sin_cos();
    let (sp, cp) = pitch.sin_cos();

    let mut vertices = Vec::with_capacity(n * n);
    let mut uv = Vec::with_capacity(n * n);
    for iv in 0..n {
        let v = iv as f32 / (n - 1) as f32;
        // v = 0 is the top of the face; positive image y points down.
        let lat = (0.5 - v) * MESH_LAT_SPAN * std::f32::consts::PI;
        for iu in 0..n {
            let u = iu as f32 / (n - 1) as f32;
            let lon = (u - 0.5) * std::f32::consts::PI;
            let x0 = a * lon.sin() * lat.cos();
            let y0 = -b * lat.sin();
            let z0 = c * lon.cos() * lat.cos();
            // Apparent rotation opposite the camera orbit: yaw about y,
            // then pitch about x.
            let x1 = cy * x0 + sy * z0;
            let z1 = -sy * x0 + cy * z0;
            let y2 = cp * y0 - sp * z1;
            let z2 = sp * y0 + cp * z1;
            vertices.push([x1, y2, z2]);
            uv.push([u, v]);
        }
    }
    let mut faces = Vec::with_capacity(2 * (n - 1) * (n - 1));
    for iv in 0..n - 1 {
        for iu in 0..n - 1 {
            let i00 = iv * n + iu;
            let i01 = i00 + 1;
            let i10 = i00 + n;
            let i11 = i10 + 1;
            faces.push([i00, i10, i01]);
            faces.push([i01, i10, i11]);
        }
    }
    Mesh {
        vertices,
        faces,
        uv,
    }
}

/// Per-pixel UV lookup produced by rasterization. Invalid pixels are left
/// untouched by patch application.
#[derive(Debug, Clone)]
pub struct UvLookup {
    pub resolution: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub valid: Vec<bool>,
    pub depth: Vec<f32>,
    pub degenerate_triangles: usize,
}

impl UvLookup {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// NFTP blob payload: [4, res, res] tensor (u, v, valid, depth).
    pub fn to_tensor(&self) -> Tensor {
        let n = self.resolution * self.resolution;
        let mut data = Vec::with_capacity(4 * n);
        data.extend_from_slice(&self.u);
        data.extend_from_slice(&self.v);
        data.extend(self.valid.iter().map(|&b| b as u8 as f32));
        data.extend_from_slice(&self.depth);
        Tensor::new(vec![4, self.resolution, self.resolution], data).unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [four, res, res2] = t.shape() else {
            return Err(Error::shape_mismatch(
                "UvLookup::from_tensor",
                "[4,res,res]",
                format!("{:?}", t.shape()),
            ));
        };
        if *four != 4 || res != res2 {
            return Err(Error::shape_mismatch(
                "UvLookup::from_tensor",
                "[4,res,res]",
                format!("{:?}", t.shape()),
            ));
        }
        let n = res * res;
        let d = t.data();
        Ok(UvLookup {
            resolution: *res,
            u: d[..n].to_vec(),
            v: d[n..2 * n].to_vec(),
            valid: d[2 * n..3 * n].iter().map(|&v| v >= 0.5).collect(),
            depth: d[3 * n..].to_vec(),
            degenerate_triangles: 0,
        })
    }
}

/// Z-buffered barycentric rasterization of mesh UVs into screen space.
/// Degenerate (zero-area) triangles are skipped and counted.
pub fn rasterize_uv(mesh: &Mesh, resolution: usize) -> Result<UvLookup> {
    for f in &mesh.faces {
        if f.iter().any(|&i| i >= mesh.vertices.len()) {
            return Err(Error::InvalidArgument(format!(
                "rasterize_uv: face index out of range: {f:?}"
            )));
        }
    }
    let n = resolution * resolution;
    let mut out = UvLookup {
        resolution,
        u: vec![0.0; n],
        v: vec![0.0; n],
        valid: vec![false; n],
        depth: vec![f32::INFINITY; n],
        degenerate_triangles: 0,
    };
    let res = resolution as f32;
    // Normalized [-1,1] coordinates to pixel indices (pixel centers).
    let to_px = |c: f32| (c + 1.0) * 0.5 * res - 0.5;

    for face in &mesh.faces {
        let p: Vec<[f32; 2]> = face
            .iter()
            .map(|&i| [to_px(mesh.vertices[i][0]), to_px(mesh.vertices[i][1])])
            .collect();
        // Smaller depth is nearer; vertices store +z toward the viewer.
        let depths: Vec<f32> = face.iter().map(|&i| -mesh.vertices[i][2]).collect();
        let uvs: Vec<[f32; 2]> = face.iter().map(|&i| mesh.uv[i]).collect();

        let area = edge(p[0], p[1], p[2]);
        if area.abs() < 1e-12 {
            out.degenerate_triangles += 1;
            continue;
        }
        let fmin_x = p.iter().map(|q| q[0]).fold(f32::MAX, f32::min).ceil();
        let fmax_x = p.iter().map(|q| q[0]).fold(f32::MIN, f32::max).floor();
        let fmin_y = p.iter().map(|q| q[1]).fold(f32::MAX, f32::min).ceil();
        let fmax_y = p.iter().map(|q| q[1]).fold(f32::MIN, f32::max).floor();
        if fmax_x < 0.0 || fmax_y < 0.0 || fmin_x >= res || fmin_y >= res {
            continue;
        }
        let min_x = fmin_x.max(0.0) as usize;
        let max_x = (fmax_x as usize).min(resolution - 1);
        let min_y = fmin_y.max(0.0) as usize;
        let max_y = (fmax_y as usize).min(resolution - 1);
        for py in min_y..=max_y {
            for px in min_x..=max_x {
                let q = [px as f32, py as f32];
                // Barycentric weights via edge functions; sign flips with
                // triangle winding, so normalize by the signed area.
                let w0 = edge(p[1], p[2], q) / area;
                let w1 = edge(p[2], p[0], q) / area;
                let w2 = edge(p[0], p[1], q) / area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let depth = w0 * depths[0] + w1 * depths[1] + w2 * depths[2];
                let idx = py * resolution + px;
                if depth < out.depth[idx] {
                    out.depth[idx] = depth;
                    out.u[idx] = w0 * uvs[0][0] + w1 * uvs[1][0] + w2 * uvs[2][0];
                    out.v[idx] = w0 * uvs[0][1] + w1 * uvs[1][1] + w2 * uvs[2][1];
                    out.valid[idx] = true;
                }
            }
        }
    }
    Ok(out)
}

fn edge(a: [f32; 2], b: [f32; 2], c: [f32; 2]) -> f32 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

// ── Masks ────────────────────────────────────────────────────────────

/// Binary patch-region selector in UV space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Eye,
    EyeNose,
    Respirator,
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MaskKind::Eye => "eye",
            MaskKind::EyeNose => "eye_nose",
            MaskKind::Respirator => "respirator",
        };
        write!(f, "{s}")
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eye" => Ok(MaskKind::Eye),
            "eye_nose" => Ok(MaskKind::EyeNose),
            "respirator" => Ok(MaskKind::Respirator),
            other => Err(Error::InvalidArgument(format!(
                "unknown mask kind {other:?} (expected eye, eye_nose, respirator)"
            ))),
        }
    }
}

// Region constants; texel membership is tested at texel centers.
const EYE_CENTERS: [[f32; 2]; 2] = [[0.3, 0.35], [0.7, 0.35]];
const EYE_RADII: [f32; 2] = [0.14, 0.09];
const EYE_BAND_U: [f32; 2] = [0.3, 0.7];
const EYE_BAND_V: [f32; 2] = [0.32, 0.38];
const NOSE_U: [f32; 2] = [0.42, 0.58];
const NOSE_V: [f32; 2] = [0.35, 0.62];
const RESPIRATOR_CENTER: [f32; 2] = [0.5, 0.75];
const RESPIRATOR_RADII: [f32; 2] = [0.32, 0.2];

fn in_ellipse(u: f32, v: f32, center: [f32; 2], radii: [f32; 2]) -> bool {
    let du = (u - center[0]) / radii[0];
    let dv = (v - center[1]) / radii[1];
    du * du + dv * dv <= 1.0
}

fn in_box(u: f32, v: f32, urange: [f32; 2], vrange: [f32; 2]) -> bool {
    (urange[0]..=urange[1]).contains(&u) && (vrange[0]..=vrange[1]).contains(&v)
}

/// Procedural 0-1 mask grid of the given kind.
pub fn make_mask(kind: MaskKind, resolution: usize) -> Result<Tensor> {
    if resolution < 16 {
        return Err(Error::InvalidArgument(format!(
            "make_mask: resolution {resolution} below minimum 16"
        )));
    }
    let mut data = vec![0.0f32; resolution * resolution];
    for i in 0..resolution {
        let v = (i as f32 + 0.5) / resolution as f32;
        for j in 0..resolution {
            let u = (j as f32 + 0.5) / resolution as f32;
            let eye = in_ellipse(u, v, EYE_CENTERS[0], EYE_RADII)
                || in_ellipse(u, v, EYE_CENTERS[1], EYE_RADII)
                || in_box(u, v, EYE_BAND_U, EYE_BAND_V);
            let inside = match kind {
                MaskKind::Eye => eye,
                MaskKind::EyeNose => eye || in_box(u, v, NOSE_U, NOSE_V),
                MaskKind::Respirator => in_ellipse(u, v, RESPIRATOR_CENTER, RESPIRATOR_RADII),
            };
            if inside {
                data[i * resolution + j] = 1.0;
            }
        }
    }
    Tensor::new(vec![resolution, resolution], data)
}

fn bilinear_scalar(data: &[f32], h: usize, w: usize, u: f32, v: f32) -> f32 {
    let fx = u * w as f32 - 0.5;
    let fy = v * h as f32 - 0.5;
    let x0f = fx.floor();
    let y0f = fy.floor();
    let tx = fx - x0f;
    let ty = fy - y0f;
    let x0 = (x0f as isize).clamp(0, w as isize - 1) as usize;
    let x1 = (x0f as isize + 1).clamp(0, w as isize - 1) as usize;
    let y0 = (y0f as isize).clamp(0, h as isize - 1) as usize;
    let y1 = (y0f as isize + 1).clamp(0, h as isize - 1) as usize;
    (1.0 - ty) * ((1.0 - tx) * data[y0 * w + x0] + tx * data[y0 * w + x1])
        + ty * ((1.0 - tx) * data[y1 * w + x0] + tx * data[y1 * w + x1])
}

/// Pixels the patch occupies: valid under the lookup AND bilinear-sampled
/// mask value >= 0.5 at the pixel's (u,v). The hard threshold keeps the 0-1
/// mask semantics; gradients flow through texture sampling only.
pub fn patch_selection(lookup: &UvLookup, mask: &Tensor) -> Vec<bool> {
    let (mh, mw) = (mask.shape()[0], mask.shape()[1]);
    lookup
        .valid
        .iter()
        .enumerate()
        .map(|(i, &ok)| {
            ok && bilinear_scalar(mask.data(), mh, mw, lookup.u[i], lookup.v[i]) >= 0.5
        })
        .collect()
}

/// Paste the UV texture onto the image under the lookup and mask (no
/// gradient tracking). Unselected pixels are returned bit-identical.
pub fn apply_patch(
    x: &Tensor,
    lookup: &UvLookup,
    texture: &Tensor,
    mask: &Tensor,
) -> Result<Tensor> {
    let [c, h, w] = x.shape() else {
        return Err(Error::shape_mismatch(
            "apply_patch",
            "[C,H,W]",
            format!("{:?}", x.shape()),
        ));
    };
    let (c, h, w) = (*c, *h, *w);
    if h != lookup.resolution || w != lookup.resolution {
        return Err(Error::shape_mismatch(
            "apply_patch",
            format!("lookup resolution {}", lookup.resolution),
            format!("image [{c},{h},{w}]"),
        ));
    }
    let (th, tw) = (texture.shape()[1], texture.shape()[2]);
    let sel = patch_selection(lookup, mask);
    let mut out = x.clone();
    for i in 0..h * w {
        if !sel[i] {
            continue;
        }
        for ch in 0..c {
            let plane = &texture.data()[ch * th * tw..(ch + 1) * th * tw];
            out.data_mut()[ch * h * w + i] =
                bilinear_scalar(plane, th, tw, lookup.u[i], lookup.v[i]);
        }
    }
    Ok(out)
}

/// Graph version of [`apply_patch`]; differentiable w.r.t. the texture and
/// the image (the mask decision itself is hard by design).
pub fn build_apply_patch(
    g: &mut Graph,
    x: NodeId,
    lookup: &UvLookup,
    texture: NodeId,
    mask: &Tensor,
) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let [c, h, w] = shape[..] else {
        return Err(Error::shape_mismatch(
            "apply_patch",
            "[C,H,W]",
            format!("{shape:?}"),
        ));
    };
    if h != lookup.resolution || w != lookup.resolution {
        return Err(Error::shape_mismatch(
            "apply_patch",
            format!("lookup resolution {}", lookup.resolution),
            format!("image [{c},{h},{w}]"),
        ));
    }
    let sel = patch_selection(lookup, mask);
    let n = h * w;
    // Unselected pixels sample the texture center; their contribution is
    // zeroed by the selection product, gradients included.
    let mut coords = Vec::with_capacity(n * 2);
    for i in 0..n {
        if sel[i] {
            coords.extend_from_slice(&[lookup.u[i], lookup.v[i]]);
        } else {
            coords.extend_from_slice(&[0.5, 0.5]);
        }
    }
    let coords = g.leaf(Tensor::new(vec![n, 2], coords)?);
    let sampled = g.grid_sample(texture, coords)?;
    let sampled = g.reshape(sampled, &[c, h, w])?;
    let mut sel_data = vec![0.0f32; c * n];
    let mut inv_data = vec![0.0f32; c * n];
    for i in 0..n {
        for ch in 0..c {
            if sel[i] {
                sel_data[ch * n + i] = 1.0;
            } else {
                inv_data[ch * n + i] = 1.0;
            }
        }
    }
    let sel_leaf = g.leaf(Tensor::new(vec![c, h, w], sel_data)?);
    let inv_leaf = g.leaf(Tensor::new(vec![c, h, w], inv_data)?);
    let patched = g.mul(sampled, sel_leaf)?;
    let kept = g.mul(x, inv_leaf)?;
    g.add(patched, kept)
}

// ── Random similarity transforms ─────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TransformParams {
    pub max_rot_deg: f32,
    pub max_scale_dev: f32,
    pub max_shift_px: f32,
}

impl Default for TransformParams {
    fn default() -> Self {
        TransformParams {
            max_rot_deg: 5.0,
            max_scale_dev: 0.05,
            max_shift_px: 2.0,
        }
    }
}

/// A sampled similarity transform (rotation, uniform scale, translation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub rot_rad: f32,
    pub scale: f32,
    pub shift_px: [f32; 2],
}

impl Similarity {
    pub const IDENTITY: Similarity = Similarity {
        rot_rad: 0.0,
        scale: 1.0,
        shift_px: [0.0, 0.0],
    };
}

pub fn sample_similarity(params: &TransformParams, rng: &mut impl Rng) -> Similarity {
    let mut sym = |m: f32| if m == 0.0 { 0.0 } else { rng.gen_range(-m..=m) };
    let rot_deg = sym(params.max_rot_deg);
    let scale = 1.0 + sym(params.max_scale_dev);
    let tx = sym(params.max_shift_px);
    let ty = sym(params.max_shift_px);
    Similarity {
        rot_rad: rot_deg.to_radians(),
        scale,
        shift_px: [tx, ty],
    }
}

/// Sampling grid for resampling an HxW image under the similarity transform
/// about the image center; edge clamping is the sampler's.
fn similarity_coords(t: &Similarity, h: usize, w: usize) -> Tensor {
    let (s, c) = t.rot_rad.sin_cos();
    let cx = w as f32 * 0.5;
    let cy = h as f32 * 0.5;
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            // Destination pixel center relative to the pivot.
            let dx = (j as f32 + 0.5) - cx - t.shift_px[0];
            let dy = (i as f32 + 0.5) - cy - t.shift_px[1];
            // Inverse map: un-rotate and un-scale.
            let sx = (c * dx + s * dy) / t.scale;
            let sy = (-s * dx + c * dy) / t.scale;
            data.extend_from_slice(&[(sx + cx) / w as f32, (sy + cy) / h as f32]);
        }
    }
    Tensor::new(vec![h * w, 2], data).unwrap()
}

/// Resample `x` under a sampled similarity transform (no gradient tracking).
pub fn apply_similarity(x: &Tensor, t: &Similarity) -> Result<Tensor> {
    let mut g = Graph::new();
    let xid = g.leaf(x.clone());
    let out = build_apply_similarity(&mut g, xid, t)?;
    Ok(g.value(out).clone())
}

/// Graph version; differentiable w.r.t. the image.
pub fn build_apply_similarity(g: &mut Graph, x: NodeId, t: &Similarity) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let [c, h, w] = shape[..] else {
        return Err(Error::shape_mismatch(
            "similarity_transform",
            "[C,H,W]",
            format!("{shape:?}"),
        ));
    };
    let coords = g.leaf(similarity_coords(t, h, w));
    let sampled = g.grid_sample(x, coords)?;
    g.reshape(sampled, &[c, h, w])
}

/// Convenience: sample a transform and apply it.
pub fn random_similarity_transform(
    x: &Tensor,
    params: &TransformParams,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let t = sample_similarity(params, rng);
    apply_similarity(x, &t)
}

// ── Beta pose sampling ───────────────────────────────────────────────

/// Perturb yaw and pitch independently by tau * (2*beta - 1) with
/// beta ~ Beta(alpha, alpha); the result is clamped to the pose validity
/// ranges. Offsets are always within [-tau, tau].
pub fn sample_pose(base: &Pose, alpha: f32, tau: f32, rng: &mut impl Rng) -> Result<Pose> {
    if alpha <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sample_pose: alpha must be positive, got {alpha}"
        )));
    }
    if tau < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sample_pose: tau must be non-negative, got {tau}"
        )));
    }
    if tau == 0.0 {
        return Ok(*base);
    }
    let beta =
        Beta::new(alpha, alpha).map_err(|e| Error::InvalidArgument(format!("sample_pose: {e}")))?;
    let mut draw = || tau * (2.0 * beta.sample(rng) - 1.0);
    let yaw = (base.yaw_deg + draw()).clamp(
        -crate::radiance::YAW_LIMIT_DEG,
        crate::radiance::YAW_LIMIT_DEG,
    );
    let pitch = (base.pitch_deg + draw()).clamp(
        -crate::radiance::PITCH_LIMIT_DEG,
        crate::radiance::PITCH_LIMIT_DEG,
    );
    Ok(Pose {
        yaw_deg: yaw,
        pitch_deg: pitch,
        camera_distance: base.camera_distance,
    })
}
