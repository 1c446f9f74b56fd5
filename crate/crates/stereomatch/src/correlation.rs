//! Epipolar correlation: the per-row cost volume, its pooled pyramid, and
//! the differentiable lookup operator that samples it around the current
//! disparity estimate.
//!
//! Matching is restricted to pixels sharing a row, so the volume for one
//! image pair is `[H, W, W]`: entry `(i, j, k)` is the feature dot product
//! between left pixel `(i, j)` and right pixel `(i, k)`. Rows are built by
//! one GEMM each. The pyramid pools only the last (right-x) dimension,
//! keeping full spatial resolution.

use crate::audit::flops;
use crate::error::{Error, Result};
use crate::tensor::autograd::from_op;
use crate::tensor::{ops, sc, Scalar, Tensor};

/// Lookup geometry: how many pyramid levels and what offset radius.
#[derive(Clone, Copy, Debug)]
pub struct LookupConfig {
    /// Integer offsets sampled on each side of the estimate.
    pub radius: usize,
    /// Pyramid depth.
    pub levels: usize,
    /// Scale dot products by `1/sqrt(D)`. Unnormalized 256-dim products
    /// destabilize toy-scale training, so this defaults to on.
    pub normalize: bool,
}

impl Default for LookupConfig {
    fn default() -> Self {
        LookupConfig {
            radius: 4,
            levels: 4,
            normalize: true,
        }
    }
}

impl LookupConfig {
    /// Channels produced per pixel by a lookup.
    pub fn output_channels(&self) -> usize {
        self.levels * (2 * self.radius + 1)
    }
}

struct FeatLayout {
    batch: usize,
    batched: bool,
    d: usize,
    h: usize,
    w: usize,
}

fn feat_layout<T: Scalar>(op: &'static str, f: &Tensor<T>) -> Result<FeatLayout> {
    match *f.shape() {
        [d, h, w] => Ok(FeatLayout {
            batch: 1,
            batched: false,
            d,
            h,
            w,
        }),
        [n, d, h, w] => Ok(FeatLayout {
            batch: n,
            batched: true,
            d,
            h,
            w,
        }),
        _ => Err(Error::contract(
            op,
            format!("expected [D, H, W] or [N, D, H, W] features, got {:?}", f.shape()),
        )),
    }
}

/// Build the per-row correlation volume from left/right feature maps.
///
/// Output is `[H, W, W]` (or `[N, H, W, W]`), one GEMM per row; values are
/// scaled by `1/sqrt(D)` when `normalize` is set.
pub fn build_volume<T: Scalar>(
    f: &Tensor<T>,
    g: &Tensor<T>,
    normalize: bool,
) -> Result<Tensor<T>> {
    if f.shape() != g.shape() {
        return Err(Error::shape("build_volume", f.shape(), g.shape()));
    }
    let lay = feat_layout("build_volume", f)?;
    let FeatLayout { batch, d, h, w, .. } = lay;
    let scale = if normalize {
        sc::<T>(1.0 / (d as f64).sqrt())
    } else {
        T::one()
    };
    let plane = h * w;
    let sample = d * plane;

    // Row-major scratch: a[j][h] = f[h][i][j] (scaled), b[h][k] = g[h][i][k].
    let mut a = vec![T::zero(); w * d];
    let mut b = vec![T::zero(); d * w];
    let mut out = vec![T::zero(); batch * h * w * w];
    for n in 0..batch {
        let fs = &f.data()[n * sample..(n + 1) * sample];
        let gs = &g.data()[n * sample..(n + 1) * sample];
        for i in 0..h {
            for ch in 0..d {
                let frow = &fs[ch * plane + i * w..ch * plane + (i + 1) * w];
                let grow = &gs[ch * plane + i * w..ch * plane + (i + 1) * w];
                for j in 0..w {
                    a[j * d + ch] = frow[j] * scale;
                }
                b[ch * w..(ch + 1) * w].copy_from_slice(grow);
            }
            let base = n * h * w * w + i * w * w;
            ops::gemm_acc(&a, &b, &mut out[base..base + w * w], w, d, w);
        }
    }

    let out_shape = if lay.batched {
        vec![batch, h, w, w]
    } else {
        vec![h, w, w]
    };
    Ok(from_op(out, out_shape, &[f, g], move |args| {
        let fdat = args.parents[0].data();
        let gdat = args.parents[1].data();
        let mut df = args.needs(0).then(|| vec![T::zero(); fdat.len()]);
        let mut dg = args.needs(1).then(|| vec![T::zero(); gdat.len()]);
        let mut a = vec![T::zero(); w * d];
        let mut b = vec![T::zero(); d * w];
        let mut da = vec![T::zero(); w * d];
        let mut db = vec![T::zero(); d * w];
        for n in 0..batch {
            for i in 0..h {
                let adj = &args.adjoint[n * h * w * w + i * w * w..n * h * w * w + (i + 1) * w * w];
                for ch in 0..d {
                    let off = n * sample + ch * plane + i * w;
                    for j in 0..w {
                        a[j * d + ch] = fdat[off + j] * scale;
                    }
                    b[ch * w..(ch + 1) * w].copy_from_slice(&gdat[off..off + w]);
                }
                if let Some(df) = df.as_mut() {
                    da.fill(T::zero());
                    // dA = dC * B^T
                    ops::gemm_bt_acc(adj, &b, &mut da, w, w, d);
                    for ch in 0..d {
                        let off = n * sample + ch * plane + i * w;
                        for j in 0..w {
                            df[off + j] += da[j * d + ch] * scale;
                        }
                    }
                }
                if let Some(dg) = dg.as_mut() {
                    db.fill(T::zero());
                    // dB = A^T * dC
                    ops::gemm_at_acc(&a, adj, &mut db, d, w, w);
                    for ch in 0..d {
                        let off = n * sample + ch * plane + i * w;
                        for (slot, v) in dg[off..off + w].iter_mut().zip(&db[ch * w..(ch + 1) * w])
                        {
                            *slot += *v;
                        }
                    }
                }
            }
        }
        vec![df, dg]
    }))
}

/// The pooled stack of correlation volumes.
pub struct CorrelationPyramid<T: Scalar> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Scalar> CorrelationPyramid<T> {
    pub fn level_widths(&self) -> Vec<usize> {
        self.levels
            .iter()
            .map(|l| *l.shape().last().unwrap())
            .collect()
    }
}

/// Repeatedly average-pool the last dimension of the volume. The first two
/// dimensions are never pooled.
pub fn build_pyramid<T: Scalar>(volume: &Tensor<T>, levels: usize) -> Result<CorrelationPyramid<T>> {
    if levels == 0 {
        return Err(Error::contract("build_pyramid", "levels must be positive"));
    }
    let mut out = Vec::with_capacity(levels);
    out.push(volume.clone());
    for _ in 1..levels {
        let next = ops::avgpool_lastdim(out.last().unwrap())?;
        out.push(next);
    }
    Ok(CorrelationPyramid { levels: out })
}

struct VolLayout {
    batch: usize,
    batched: bool,
    h: usize,
    w: usize,
}

fn disp_layout<T: Scalar>(
    op: &'static str,
    d: &Tensor<T>,
    vol: &VolLayout,
) -> Result<()> {
    let ok = if vol.batched {
        d.shape() == [vol.batch, 1, vol.h, vol.w]
    } else {
        d.shape() == [1, vol.h, vol.w]
    };
    if !ok {
        return Err(Error::contract(
            op,
            format!(
                "disparity shape {:?} does not match feature grid {}x{}",
                d.shape(),
                vol.h,
                vol.w
            ),
        ));
    }
    Ok(())
}

/// Zero-padded linear interpolation helpers shared by both lookup paths.
#[inline]
fn interp_taps(x: f64) -> (i64, f64) {
    let i0 = x.floor();
    (i0 as i64, x - i0)
}

/// Sample the correlation pyramid around the current disparity estimate.
///
/// For pixel `(i, j)`, level `k`, and offset `o` in `-r..=r`, samples level
/// `k` at last-dim coordinate `(j - d[i,j]) / 2^k + o` with zero-padded
/// linear interpolation. Channels are ordered level-major then offset.
/// Differentiable in the volume values and in `d`.
pub fn lookup<T: Scalar>(
    pyr: &CorrelationPyramid<T>,
    d: &Tensor<T>,
    cfg: &LookupConfig,
) -> Result<Tensor<T>> {
    if pyr.levels.len() != cfg.levels {
        return Err(Error::contract(
            "lookup",
            format!(
                "pyramid has {} levels, config expects {}",
                pyr.levels.len(),
                cfg.levels
            ),
        ));
    }
    let lvl0 = &pyr.levels[0];
    let lay = match *lvl0.shape() {
        [h, w, w2] if w == w2 => VolLayout {
            batch: 1,
            batched: false,
            h,
            w,
        },
        [n, h, w, w2] if w == w2 => VolLayout {
            batch: n,
            batched: true,
            h,
            w,
        },
        _ => {
            return Err(Error::contract(
                "lookup",
                format!("unexpected volume shape {:?}", lvl0.shape()),
            ))
        }
    };
    disp_layout("lookup", d, &lay)?;
    let widths: Vec<usize> = pyr.level_widths();
    let (batch, h, w) = (lay.batch, lay.h, lay.w);
    let r = cfg.radius as i64;
    let span = 2 * cfg.radius + 1;
    let channels = cfg.levels * span;
    let plane = h * w;

    let mut out = vec![T::zero(); batch * channels * plane];
    flops::add((batch * channels * plane * 2) as u64);
    for n in 0..batch {
        for (k, level) in pyr.levels.iter().enumerate() {
            let wk = widths[k];
            let ldat = level.data();
            let inv = 1.0 / (1 << k) as f64;
            for i in 0..h {
                for j in 0..w {
                    let dv = d.data()[n * plane + i * w + j].as_f64();
                    let xb = (j as f64 - dv) * inv;
                    let row = &ldat[n * h * w * wk + (i * w + j) * wk
                        ..n * h * w * wk + (i * w + j + 1) * wk];
                    for (oi, o) in (-r..=r).enumerate() {
                        let (i0, fr) = interp_taps(xb + o as f64);
                        let tap = |idx: i64| -> f64 {
                            if idx >= 0 && (idx as usize) < wk {
                                row[idx as usize].as_f64()
                            } else {
                                0.0
                            }
                        };
                        let v = tap(i0) * (1.0 - fr) + tap(i0 + 1) * fr;
                        let c = k * span + oi;
                        out[((n * channels + c) * h + i) * w + j] = sc(v);
                    }
                }
            }
        }
    }

    let out_shape = if lay.batched {
        vec![batch, channels, h, w]
    } else {
        vec![channels, h, w]
    };
    let mut parents: Vec<&Tensor<T>> = pyr.levels.iter().collect();
    parents.push(d);
    let widths_c = widths.clone();
    let levels = cfg.levels;
    Ok(from_op(out, out_shape, &parents, move |args| {
        let ddat = args.parents[levels].data();
        let mut dlevels: Vec<Option<Vec<T>>> = (0..levels)
            .map(|k| args.needs(k).then(|| vec![T::zero(); args.parents[k].len()]))
            .collect();
        let mut dd = args
            .needs(levels)
            .then(|| vec![T::zero(); ddat.len()]);
        for n in 0..batch {
            for k in 0..levels {
                let wk = widths_c[k];
                let ldat = args.parents[k].data();
                let inv = 1.0 / (1 << k) as f64;
                for i in 0..h {
                    for j in 0..w {
                        let dv = ddat[n * plane + i * w + j].as_f64();
                        let xb = (j as f64 - dv) * inv;
                        let row_base = n * h * w * wk + (i * w + j) * wk;
                        for (oi, o) in (-r..=r).enumerate() {
                            let c = k * span + oi;
                            let gv = args.adjoint[((n * channels + c) * h + i) * w + j].as_f64();
                            if gv == 0.0 {
                                continue;
                            }
                            let (i0, fr) = interp_taps(xb + o as f64);
                            let in0 = i0 >= 0 && (i0 as usize) < wk;
                            let in1 = i0 + 1 >= 0 && ((i0 + 1) as usize) < wk;
                            if let Some(dl) = dlevels[k].as_mut() {
                                if in0 {
                                    dl[row_base + i0 as usize] += sc::<T>(gv * (1.0 - fr));
                                }
                                if in1 {
                                    dl[row_base + (i0 + 1) as usize] += sc::<T>(gv * fr);
                                }
                            }
                            if let Some(dd) = dd.as_mut() {
                                let v0 = if in0 { ldat[row_base + i0 as usize].as_f64() } else { 0.0 };
                                let v1 = if in1 {
                                    ldat[row_base + (i0 + 1) as usize].as_f64()
                                } else {
                                    0.0
                                };
                                // d(coord)/d(d) = -1/2^k.
                                dd[n * plane + i * w + j] += sc::<T>(gv * (v1 - v0) * -inv);
                            }
                        }
                    }
                }
            }
        }
        dlevels.push(dd);
        dlevels
    }))
}

/// Memory-light correlation: pooled right-feature stacks replace the
/// materialized `W x W` volume. Mathematically identical to the
/// precomputed path because pooling the volume's last dimension commutes
/// with the feature dot product.
pub struct OnTheFlyCorr<T: Scalar> {
    left: Tensor<T>,
    pooled_right: Vec<Tensor<T>>,
    scale: T,
    cfg: LookupConfig,
}

/// Pool the right features per level instead of building the volume.
pub fn prepare_on_the_fly<T: Scalar>(
    f: &Tensor<T>,
    g: &Tensor<T>,
    cfg: &LookupConfig,
) -> Result<OnTheFlyCorr<T>> {
    if f.shape() != g.shape() {
        return Err(Error::shape("lookup_on_the_fly", f.shape(), g.shape()));
    }
    let lay = feat_layout("lookup_on_the_fly", f)?;
    let scale = if cfg.normalize {
        sc::<T>(1.0 / (lay.d as f64).sqrt())
    } else {
        T::one()
    };
    let mut pooled = Vec::with_capacity(cfg.levels);
    pooled.push(g.clone());
    for _ in 1..cfg.levels {
        pooled.push(ops::avgpool_lastdim(pooled.last().unwrap())?);
    }
    Ok(OnTheFlyCorr {
        left: f.clone(),
        pooled_right: pooled,
        scale,
        cfg: *cfg,
    })
}

impl<T: Scalar> OnTheFlyCorr<T> {
    /// Same contract as [`lookup`], with per-sample dot products computed
    /// on demand; peak memory stays `O(H * W * levels * (2r+1))` plus the
    /// pooled feature maps.
    pub fn lookup(&self, d: &Tensor<T>) -> Result<Tensor<T>> {
        let lay = feat_layout("lookup_on_the_fly", &self.left)?;
        let vol = VolLayout {
            batch: lay.batch,
            batched: lay.batched,
            h: lay.h,
            w: lay.w,
        };
        disp_layout("lookup_on_the_fly", d, &vol)?;
        let (batch, dch, h, w) = (lay.batch, lay.d, lay.h, lay.w);
        let r = self.cfg.radius as i64;
        let span = 2 * self.cfg.radius + 1;
        let levels = self.cfg.levels;
        let channels = levels * span;
        let plane = h * w;
        let widths: Vec<usize> = self
            .pooled_right
            .iter()
            .map(|t| *t.shape().last().unwrap())
            .collect();
        let scale = self.scale;

        flops::add((batch * channels * plane * 2 * dch) as u64);
        let mut out = vec![T::zero(); batch * channels * plane];
        for n in 0..batch {
            for k in 0..levels {
                let wk = widths[k];
                let gk = self.pooled_right[k].data();
                let inv = 1.0 / (1 << k) as f64;
                for i in 0..h {
                    for j in 0..w {
                        let dv = d.data()[n * plane + i * w + j].as_f64();
                        let xb = (j as f64 - dv) * inv;
                        for (oi, o) in (-r..=r).enumerate() {
                            let (i0, fr) = interp_taps(xb + o as f64);
                            let in0 = i0 >= 0 && (i0 as usize) < wk;
                            let in1 = i0 + 1 >= 0 && ((i0 + 1) as usize) < wk;
                            if !in0 && !in1 {
                                continue;
                            }
                            let frt = sc::<T>(fr);
                            let mut acc = T::zero();
                            for ch in 0..dch {
                                let fv = self.left.data()[n * dch * plane + ch * plane + i * w + j];
                                let row = n * dch * h * wk + ch * h * wk + i * wk;
                                let v0 = if in0 { gk[row + i0 as usize] } else { T::zero() };
                                let v1 = if in1 {
                                    gk[row + (i0 + 1) as usize]
                                } else {
                                    T::zero()
                                };
                                acc += fv * (v0 * (T::one() - frt) + v1 * frt);
                            }
                            let c = k * span + oi;
                            out[((n * channels + c) * h + i) * w + j] = acc * scale;
                        }
                    }
                }
            }
        }

        let out_shape = if lay.batched {
            vec![batch, channels, h, w]
        } else {
            vec![channels, h, w]
        };
        let mut parents: Vec<&Tensor<T>> = vec![&self.left];
        parents.extend(self.pooled_right.iter());
        parents.push(d);
        Ok(from_op(out, out_shape, &parents, move |args| {
            let fdat = args.parents[0].data();
            let ddat = args.parents[levels + 1].data();
            let mut df = args.needs(0).then(|| vec![T::zero(); fdat.len()]);
            let mut dgk: Vec<Option<Vec<T>>> = (0..levels)
                .map(|k| {
                    args.needs(1 + k)
                        .then(|| vec![T::zero(); args.parents[1 + k].len()])
                })
                .collect();
            let mut dd = args
                .needs(levels + 1)
                .then(|| vec![T::zero(); ddat.len()]);
            for n in 0..batch {
                for k in 0..levels {
                    let wk = widths[k];
                    let gk = args.parents[1 + k].data();
                    let inv = 1.0 / (1 << k) as f64;
                    for i in 0..h {
                        for j in 0..w {
                            let dv = ddat[n * plane + i * w + j].as_f64();
                            let xb = (j as f64 - dv) * inv;
                            for (oi, o) in (-r..=r).enumerate() {
                                let c = k * span + oi;
                                let gv = args.adjoint[((n * channels + c) * h + i) * w + j];
                                if gv == T::zero() {
                                    continue;
                                }
                                let (i0, fr) = interp_taps(xb + o as f64);
                                let in0 = i0 >= 0 && (i0 as usize) < wk;
                                let in1 = i0 + 1 >= 0 && ((i0 + 1) as usize) < wk;
                                if !in0 && !in1 {
                                    continue;
                                }
                                let frt = sc::<T>(fr);
                                let gs = gv * scale;
                                let mut ddot = T::zero();
                                for ch in 0..dch {
                                    let fidx = n * dch * plane + ch * plane + i * w + j;
                                    let row = n * dch * h * wk + ch * h * wk + i * wk;
                                    let v0 = if in0 { gk[row + i0 as usize] } else { T::zero() };
                                    let v1 = if in1 {
                                        gk[row + (i0 + 1) as usize]
                                    } else {
                                        T::zero()
                                    };
                                    if let Some(df) = df.as_mut() {
                                        df[fidx] += gs * (v0 * (T::one() - frt) + v1 * frt);
                                    }
                                    if let Some(dg) = dgk[k].as_mut() {
                                        let fv = fdat[fidx];
                                        if in0 {
                                            dg[row + i0 as usize] += gs * fv * (T::one() - frt);
                                        }
                                        if in1 {
                                            dg[row + (i0 + 1) as usize] += gs * fv * frt;
                                        }
                                    }
                                    if dd.is_some() {
                                        ddot += fdat[fidx] * (v1 - v0);
                                    }
                                }
                                if let Some(dd) = dd.as_mut() {
                                    dd[n * plane + i * w + j] += gs * ddot * sc::<T>(-inv);
                                }
                            }
                        }
                    }
                }
            }
            let mut result = vec![df];
            result.append(&mut dgk);
            result.push(dd);
            result
        }))
    }
}
