//! Mutual visual adapter: turns a subject/object pair of region features into
//! one interaction-aware embedding.
//!
//! One direction, with `q` the query region and `k` the key/value region:
//!
//! ```text
//! low   = q.patches · down_proj                          M × d
//! attn  = MultiHead(low · Wq, k.patches · Wk, k.patches · Wv) · Wo
//! mixed = LayerNorm(low + attn)                          M × d
//! up    = mixed · up_proj                                M × D
//! fused = [up | marker] · fuse_weight + fuse_bias        M × D
//! out   = mean_rows(fused) + q.cls                       D
//! ```
//!
//! The pair embedding averages the subject→object direction (subject marker)
//! with the object→subject direction (object marker).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{norm, Scalar, Tape, Tensor, Var, LAYER_NORM_EPS};

/// Scale applied to the marker-fusion weights at init, which keeps the
/// initial output close to the CLS residual.
pub const FUSE_INIT_GAIN: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterDims {
    /// Width of region features and text embeddings.
    pub embed_dim: usize,
    /// Width of the down-projected query patches.
    pub down_dim: usize,
    /// Shared query/key/value width inside the attention.
    pub attn_dim: usize,
    pub heads: usize,
}

impl AdapterDims {
    /// CLIP ViT-B/32 sized adapter with 8 heads.
    pub const CLIP_B32: AdapterDims = AdapterDims {
        embed_dim: 512,
        down_dim: 64,
        attn_dim: 256,
        heads: 8,
    };

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.down_dim == 0 || self.attn_dim == 0 || self.heads == 0 {
            return Err(Error::Config(format!("adapter dims must be positive: {self:?}")));
        }
        if !self.attn_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide attention width {}",
                self.heads, self.attn_dim
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.attn_dim / self.heads
    }

    /// Desk-scale adapter for a given embedding width.
    pub fn small(embed_dim: usize) -> Self {
        Self {
            embed_dim,
            down_dim: (embed_dim / 2).max(1),
            attn_dim: embed_dim,
            heads: 4.min(embed_dim).max(1),
        }
    }
}

/// Every trainable tensor, in checkpoint order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Param {
    DownProj,
    QueryProj,
    KeyProj,
    ValueProj,
    OutProj,
    LnGain,
    LnBias,
    UpProj,
    FuseWeight,
    FuseBias,
}

impl Param {
    pub const ALL: [Param; 10] = [
        Param::DownProj,
        Param::QueryProj,
        Param::KeyProj,
        Param::ValueProj,
        Param::OutProj,
        Param::LnGain,
        Param::LnBias,
        Param::UpProj,
        Param::FuseWeight,
        Param::FuseBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Param::DownProj => "down_proj",
            Param::QueryProj => "attn.query",
            Param::KeyProj => "attn.key",
            Param::ValueProj => "attn.value",
            Param::OutProj => "attn.out",
            Param::LnGain => "ln.gain",
            Param::LnBias => "ln.bias",
            Param::UpProj => "up_proj",
            Param::FuseWeight => "marker_fuse.weight",
            Param::FuseBias => "marker_fuse.bias",
        }
    }

    pub fn from_name(name: &str) -> Option<Param> {
        Param::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn shape(self, d: &AdapterDims) -> Vec<usize> {
        let (e, lo, a) = (d.embed_dim, d.down_dim, d.attn_dim);
        match self {
            Param::DownProj => vec![e, lo],
            Param::QueryProj => vec![lo, a],
            Param::KeyProj | Param::ValueProj => vec![e, a],
            Param::OutProj => vec![a, lo],
            Param::LnGain | Param::LnBias => vec![lo],
            Param::UpProj => vec![lo, e],
            Param::FuseWeight => vec![2 * e, e],
            Param::FuseBias => vec![e],
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams<T: Scalar = f32> {
    dims: AdapterDims,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> AdapterParams<T> {
    pub fn from_tensors(dims: AdapterDims, tensors: Vec<Tensor<T>>) -> Result<Self> {
        dims.validate()?;
        if tensors.len() != Param::ALL.len() {
            return Err(Error::Validation(format!(
                "adapter needs {} tensors, got {}",
                Param::ALL.len(),
                tensors.len()
            )));
        }
        for (p, t) in Param::ALL.iter().zip(&tensors) {
            let want = p.shape(&dims);
            if t.shape() != want.as_slice() {
                return Err(Error::dim(p.name(), &want, t.shape()));
            }
        }
        Ok(Self { dims, tensors })
    }

    pub fn zeros(dims: AdapterDims) -> Result<Self> {
        dims.validate()?;
        let tensors = Param::ALL.iter().map(|p| Tensor::zeros(&p.shape(&dims))).collect();
        Ok(Self { dims, tensors })
    }

    pub fn dims(&self) -> &AdapterDims {
        &self.dims
    }

    pub fn get(&self, p: Param) -> &Tensor<T> {
        &self.tensors[p.index()]
    }

    pub fn get_mut(&mut self, p: Param) -> &mut Tensor<T> {
        &mut self.tensors[p.index()]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor<T>> {
        self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> AdapterParams<U> {
        AdapterParams {
            dims: self.dims,
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Record every tensor as a leaf. Returned handles follow [`Param::ALL`].
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }
}

/// Tape handles for one set of adapter parameters.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, p: Param) -> Var {
        self.vars[p.index()]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Deterministic init. Projections are Xavier-uniform; the marker-fusion
/// weights are additionally scaled by [`FUSE_INIT_GAIN`] and its bias starts
/// at zero, so a fresh adapter returns roughly the query region's CLS vector.
pub fn init_params(dims: AdapterDims, seed: u64) -> Result<AdapterParams<f32>> {
    use rand::Rng;
    dims.validate()?;
    let mut rng = rng::seeded(seed);
    let tensors = Param::ALL
        .iter()
        .map(|&p| {
            let shape = p.shape(&dims);
            match p {
                Param::LnGain => Tensor::filled(&shape, 1.0),
                Param::LnBias | Param::FuseBias => Tensor::zeros(&shape),
                _ => {
                    let (fan_in, fan_out) = (shape[0], shape[1]);
                    let mut bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    if p == Param::FuseWeight {
                        bound *= FUSE_INIT_GAIN;
                    }
                    let data = (0..fan_in * fan_out)
                        .map(|_| rng.random_range(-bound..bound) as f32)
                        .collect();
                    Tensor::new(shape, data).expect("shape matches")
                }
            }
        })
        .collect();
    AdapterParams::from_tensors(dims, tensors)
}

/// CLS token plus M patch tokens of one cropped region.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatures<T: Scalar = f32> {
    pub cls: Vec<T>,
    /// M × D.
    pub patches: Tensor<T>,
}

impl<T: Scalar> RegionFeatures<T> {
    pub fn new(cls: Vec<T>, patches: Tensor<T>) -> Result<Self> {
        let r = Self { cls, patches };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patches.shape().len() != 2 {
            return Err(Error::Degenerate(format!(
                "patches must be M × D, got shape {:?}",
                self.patches.shape()
            )));
        }
        if self.patches.cols() != self.cls.len() {
            return Err(Error::dim("region features", &[self.cls.len()], self.patches.shape()));
        }
        if !self.patches.all_finite() || self.cls.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("region features contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.cls.len()
    }

    pub fn patch_count(&self) -> usize {
        self.patches.rows()
    }

    pub fn cast<U: Scalar>(&self) -> RegionFeatures<U> {
        RegionFeatures {
            cls: self.cls.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            patches: self.patches.cast(),
        }
    }
}

/// Text embeddings that tell the adapter which branch is the subject.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionalMarkers<T: Scalar = f32> {
    pub subject: Vec<T>,
    pub object: Vec<T>,
}

impl<T: Scalar> DirectionalMarkers<T> {
    pub fn new(subject: Vec<T>, object: Vec<T>) -> Result<Self> {
        for (side, m) in [("subject", &subject), ("object", &object)] {
            let n = norm(m);
            if (n - 1.0).abs() > crate::pack::UNIT_NORM_TOLERANCE {
                return Err(Error::Validation(format!("{side} marker has norm {n:.6}, expected 1")));
            }
        }
        if subject.len() != object.len() {
            return Err(Error::dim("markers", &[subject.len()], &[object.len()]));
        }
        Ok(Self { subject, object })
    }

    pub fn swapped(&self) -> Self {
        Self {
            subject: self.object.clone(),
            object: self.subject.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> DirectionalMarkers<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        DirectionalMarkers {
            subject: c(&self.subject),
            object: c(&self.object),
        }
    }
}

fn check_region<T: Scalar>(r: &RegionFeatures<T>, dims: &AdapterDims, which: &'static str) -> Result<()> {
    if r.patches.shape().len() != 2 || r.patch_count() == 0 {
        return Err(Error::Degenerate(format!("{which} region has no patches")));
    }
    if r.dim() != dims.embed_dim || r.patches.cols() != dims.embed_dim {
        return Err(Error::dim(which, &[dims.embed_dim], r.patches.shape()));
    }
    Ok(())
}

/// Record one adapter direction on `tape`; returns a `1 × D` row.
pub fn one_direction_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    dims: &AdapterDims,
    query: &RegionFeatures<T>,
    kv: &RegionFeatures<T>,
    marker: &[T],
) -> Result<Var> {
    check_region(query, dims, "query")?;
    check_region(kv, dims, "key/value")?;
    if marker.len() != dims.embed_dim {
        return Err(Error::dim("marker", &[dims.embed_dim], &[marker.len()]));
    }
    let m = query.patch_count();
    let q_patches = tape.constant(query.patches.clone());
    let kv_patches = tape.constant(kv.patches.clone());

    let low = tape.matmul(q_patches, params.var(Param::DownProj))?;
    let q = tape.matmul(low, params.var(Param::QueryProj))?;
    let k = tape.matmul(kv_patches, params.var(Param::KeyProj))?;
    let v = tape.matmul(kv_patches, params.var(Param::ValueProj))?;

    let hd = dims.head_dim();
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut heads: Option<Var> = None;
    for h in 0..dims.heads {
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let kh = tape.slice_cols(k, h * hd, hd)?;
        let vh = tape.slice_cols(v, h * hd, hd)?;
        let kt = tape.transpose(kh);
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale);
        let weights = tape.softmax_rows(logits);
        let out = tape.matmul(weights, vh)?;
        heads = Some(match heads {
            None => out,
            Some(acc) => tape.concat_cols(acc, out)?,
        });
    }
    let attn = tape.matmul(heads.expect("at least one head"), params.var(Param::OutProj))?;
    let mixed = tape.add(low, attn)?;
    let mixed = tape.layer_norm(mixed, params.var(Param::LnGain), params.var(Param::LnBias), LAYER_NORM_EPS)?;
    let up = tape.matmul(mixed, params.var(Param::UpProj))?;

    let marker = tape.constant(Tensor::row(marker.to_vec()));
    let marker_rows = tape.broadcast_rows(marker, m)?;
    let cat = tape.concat_cols(up, marker_rows)?;
    let fused = tape.matmul(cat, params.var(Param::FuseWeight))?;
    let fused = tape.add_row(fused, params.var(Param::FuseBias))?;

    let pooled = tape.mean_rows(fused);
    let cls = tape.constant(Tensor::row(query.cls.clone()));
    tape.add(pooled, cls)
}

/// Record the symmetric two-direction pair embedding on `tape`.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    dims: &AdapterDims,
    subject: &RegionFeatures<T>,
    object: &RegionFeatures<T>,
    markers: &DirectionalMarkers<T>,
) -> Result<Var> {
    let so = one_direction_on_tape(tape, params, dims, subject, object, &markers.subject)?;
    let os = one_direction_on_tape(tape, params, dims, object, subject, &markers.object)?;
    let sum = tape.add(so, os)?;
    Ok(tape.scale(sum, T::from_f64(0.5)))
}

pub fn mva_one_direction<T: Scalar>(
    query: &RegionFeatures<T>,
    kv: &RegionFeatures<T>,
    marker: &[T],
    params: &AdapterParams<T>,
) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = one_direction_on_tape(&mut tape, &bound, params.dims(), query, kv, marker)?;
    Ok(tape.value(out).data().to_vec())
}

pub fn mva_forward<T: Scalar>(
    subject: &RegionFeatures<T>,
    object: &RegionFeatures<T>,
    markers: &DirectionalMarkers<T>,
    params: &AdapterParams<T>,
) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = forward_on_tape(&mut tape, &bound, params.dims(), subject, object, markers)?;
    Ok(tape.value(out).data().to_vec())
}
