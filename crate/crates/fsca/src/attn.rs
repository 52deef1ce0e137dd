//! Same-type cross-attention fusion between two domains' feature maps.
//!
//! Feature maps become token grids (one token per spatial position), queries
//! come from the target domain and keys/values from the partner domain, and
//! the attention output is fused back onto the originals by a residual add.
//! Attention between different feature types (DI vs DS) is a contract error.

use crate::error::{Error, Result};
use crate::tensor::{rf, GradTensor, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    DomainInvariant,
    DomainSpecific,
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureKind::DomainInvariant => write!(f, "di"),
            FeatureKind::DomainSpecific => write!(f, "ds"),
        }
    }
}

/// An `[n, d]` token matrix (n = h*w spatial positions) tagged with its
/// origin geometry and feature type. Converting to and from `[d, h, w]`
/// feature maps is lossless.
#[derive(Debug, Clone)]
pub struct TokenGrid<F: Real> {
    pub tokens: GradTensor<F>,
    pub h: usize,
    pub w: usize,
    pub kind: FeatureKind,
}

impl<F: Real> TokenGrid<F> {
    pub fn token_count(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Flatten a `[c, h, w]` feature map into `[h*w, c]` tokens.
pub fn tokens_from_feature<F: Real>(
    feat: &GradTensor<F>,
    kind: FeatureKind,
) -> Result<TokenGrid<F>> {
    let s = feat.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!(
            "tokens_from_feature: expected [c,h,w], got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let tokens = feat.reshape(vec![c, h * w])?.transpose()?;
    Ok(TokenGrid { tokens, h, w, kind })
}

/// Inverse of `tokens_from_feature`.
pub fn feature_from_tokens<F: Real>(grid: &TokenGrid<F>) -> Result<GradTensor<F>> {
    let d = grid.dim();
    grid.tokens
        .transpose()?
        .reshape(vec![d, grid.h, grid.w])
}

/// Softmax(Q K^T / sqrt(d_k)) attention weights; rows sum to one.
pub fn attention_weights<F: Real>(
    q_feat: &TokenGrid<F>,
    kv_feat: &TokenGrid<F>,
) -> Result<GradTensor<F>> {
    if q_feat.kind != kv_feat.kind {
        return Err(Error::Contract(format!(
            "cross_attend: mixed feature types {} and {}",
            q_feat.kind, kv_feat.kind
        )));
    }
    if q_feat.dim() != kv_feat.dim() {
        return Err(Error::Dimension(format!(
            "cross_attend: query dim {} != key dim {}",
            q_feat.dim(),
            kv_feat.dim()
        )));
    }
    let scale = rf::<F>(1.0 / (q_feat.dim() as f64).sqrt());
    q_feat
        .tokens
        .matmul(&kv_feat.tokens.transpose()?)?
        .scale(scale)
        .softmax_rows()
}

/// Attention output with keys and values both taken from `kv_feat`.
pub fn cross_attend<F: Real>(
    q_feat: &TokenGrid<F>,
    kv_feat: &TokenGrid<F>,
) -> Result<TokenGrid<F>> {
    let weights = attention_weights(q_feat, kv_feat)?;
    let out = weights.matmul(&kv_feat.tokens)?;
    Ok(TokenGrid {
        tokens: out,
        h: q_feat.h,
        w: q_feat.w,
        kind: q_feat.kind,
    })
}

/// Residual fusion: the fused tokens are exactly `original + attn_out`.
pub fn fuse_residual<F: Real>(
    original: &TokenGrid<F>,
    attn_out: &TokenGrid<F>,
) -> Result<TokenGrid<F>> {
    if original.kind != attn_out.kind {
        return Err(Error::Contract(
            "fuse_residual: mixed feature types".into(),
        ));
    }
    Ok(TokenGrid {
        tokens: original.tokens.add(&attn_out.tokens)?,
        h: original.h,
        w: original.w,
        kind: original.kind,
    })
}

/// Assemble the decoder input by channel concatenation, DI block first.
pub fn build_ds_di<F: Real>(
    fusion_di: &TokenGrid<F>,
    fusion_ds: &TokenGrid<F>,
) -> Result<GradTensor<F>> {
    if fusion_di.kind != FeatureKind::DomainInvariant
        || fusion_ds.kind != FeatureKind::DomainSpecific
    {
        return Err(Error::Contract(
            "build_ds_di: arguments must be (DI, DS) in that order".into(),
        ));
    }
    if fusion_di.h != fusion_ds.h || fusion_di.w != fusion_ds.w {
        return Err(Error::Dimension(format!(
            "build_ds_di: spatial shapes {}x{} and {}x{} differ",
            fusion_di.h, fusion_di.w, fusion_ds.h, fusion_ds.w
        )));
    }
    let di = feature_from_tokens(fusion_di)?;
    let ds = feature_from_tokens(fusion_ds)?;
    concat_channels(&di, &ds)
}

/// Channel-concatenate two `[c,h,w]` maps into `[c1+c2,h,w]`.
pub fn concat_channels<F: Real>(a: &GradTensor<F>, b: &GradTensor<F>) -> Result<GradTensor<F>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
        return Err(Error::Dimension(format!(
            "concat_channels: shapes {sa:?} and {sb:?} incompatible"
        )));
    }
    GradTensor::concat_flat(&[a.clone(), b.clone()])?
        .reshape(vec![sa[0] + sb[0], sa[1], sa[2]])
}
