//! Multi-level 2D wavelet packet transform.
//!
//! The transform is exposed two ways: as a standalone analysis tool
//! ([`wpt_forward`] / [`wpt_inverse`]) operating on plain tensors, and as
//! a bank of fixed convolution kernels ([`wpt_as_conv`]) so the
//! discriminator can run the same decomposition as a single stride-2^k
//! convolution whose kernels never train.
//!
//! Subband ordering is frozen as breadth-first (LL, LH, HL, HH at every
//! split, first letter = filter along the vertical axis); downstream
//! fusion layers depend on this channel order.

use crate::error::{CoreError, Result};
use crate::tensor::{fl, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WaveletFamily {
    Haar,
    Db2,
}

impl WaveletFamily {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "haar" => Ok(WaveletFamily::Haar),
            "db2" => Ok(WaveletFamily::Db2),
            other => Err(CoreError::Config(format!(
                "unknown wavelet family '{other}' (expected haar or db2)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WaveletFamily::Haar => "haar",
            WaveletFamily::Db2 => "db2",
        }
    }
}

/// Orthonormal low-pass/high-pass decomposition filter pair.
///
/// Reconstruction taps are the time-reversed decomposition taps, which is
/// the orthogonal mirror relation for these families.
#[derive(Clone, Debug)]
pub struct WaveletFilterPair {
    pub family: WaveletFamily,
    pub h_low: Vec<f64>,
    pub h_high: Vec<f64>,
}

impl WaveletFilterPair {
    pub fn new(family: WaveletFamily) -> Self {
        match family {
            WaveletFamily::Haar => {
                let s = std::f64::consts::FRAC_1_SQRT_2;
                WaveletFilterPair {
                    family,
                    h_low: vec![s, s],
                    h_high: vec![s, -s],
                }
            }
            WaveletFamily::Db2 => {
                let r3 = 3.0f64.sqrt();
                let d = 4.0 * 2.0f64.sqrt();
                let h_low = vec![(1.0 + r3) / d, (3.0 + r3) / d, (3.0 - r3) / d, (1.0 - r3) / d];
                // quadrature mirror: h_high[k] = (-1)^k h_low[L-1-k]
                let l = h_low.len();
                let h_high = (0..l)
                    .map(|k| if k % 2 == 0 { h_low[l - 1 - k] } else { -h_low[l - 1 - k] })
                    .collect();
                WaveletFilterPair { family, h_low, h_high }
            }
        }
    }

    pub fn haar() -> Self {
        Self::new(WaveletFamily::Haar)
    }

    pub fn db2() -> Self {
        Self::new(WaveletFamily::Db2)
    }

    pub fn tap_count(&self) -> usize {
        self.h_low.len()
    }

    /// Reconstruction (synthesis) taps: time-reversed decomposition taps.
    pub fn g_low(&self) -> Vec<f64> {
        let mut g = self.h_low.clone();
        g.reverse();
        g
    }

    pub fn g_high(&self) -> Vec<f64> {
        let mut g = self.h_high.clone();
        g.reverse();
        g
    }
}

/// The 4^level subband grids produced by a level-`level` decomposition.
/// Every subband is an [N, C, H/2^level, W/2^level] tensor; ordering is
/// breadth-first by (vertical-filter, horizontal-filter) choice.
#[derive(Clone, Debug)]
pub struct CoefficientPacket<T> {
    pub level: usize,
    pub subbands: Vec<Tensor<T>>,
}

impl<T: Scalar> CoefficientPacket<T> {
    /// Total energy (sum of squares) across all subbands.
    pub fn energy(&self) -> T {
        self.subbands.iter().map(|s| s.sq_sum()).sum()
    }

    /// Flatten to a single [N, 4^level * C, h, w] tensor, subband-major:
    /// output channel s*C + c holds subband s of input channel c. This is
    /// the channel layout [`wpt_as_conv`] produces.
    pub fn flatten_channels(&self) -> Result<Tensor<T>> {
        let first = self.subbands[0].shape();
        let (n, c, h, w) = (first[0], first[1], first[2], first[3]);
        let s_count = self.subbands.len();
        let mut out = Tensor::zeros(&[n, s_count * c, h, w]);
        let hw = h * w;
        for (s, sub) in self.subbands.iter().enumerate() {
            let src = sub.data();
            for ni in 0..n {
                for ci in 0..c {
                    let dst_c = s * c + ci;
                    let dst = ((ni * s_count * c) + dst_c) * hw;
                    let from = (ni * c + ci) * hw;
                    out.data_mut()[dst..dst + hw].copy_from_slice(&src[from..from + hw]);
                }
            }
        }
        Ok(out)
    }
}

fn check_divisible(h: usize, w: usize, levels: usize) -> Result<()> {
    let div = 1usize << levels;
    if h % div != 0 || w % div != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "spatial dims {h}x{w} are not divisible by 2^{levels}; pad or resize the input \
             to a multiple of {div} before transforming"
        )));
    }
    Ok(())
}

/// Filter-and-downsample along one axis (correlation form):
/// y[i] = sum_k h[k] * x[(2i + k) mod len].
///
/// Indices wrap periodically; for Haar the taps never cross the boundary
/// of an even-length signal, so no wrap actually occurs.
fn analyze_axis<T: Scalar>(
    src: &[T],
    planes: usize,
    len: usize,
    stride_inner: usize,
    taps: &[f64],
) -> Vec<T> {
    // src is viewed as [planes, len, stride_inner]; filtering runs along
    // the middle axis.
    let out_len = len / 2;
    let taps: Vec<T> = taps.iter().map(|&t| fl(t)).collect();
    let mut out = vec![T::zero(); planes * out_len * stride_inner];
    for p in 0..planes {
        let src_base = p * len * stride_inner;
        let dst_base = p * out_len * stride_inner;
        for i in 0..out_len {
            for (k, &tap) in taps.iter().enumerate() {
                let j = (2 * i + k) % len;
                let s = &src[src_base + j * stride_inner..src_base + (j + 1) * stride_inner];
                let d = &mut out[dst_base + i * stride_inner..dst_base + (i + 1) * stride_inner];
                for (dv, &sv) in d.iter_mut().zip(s) {
                    *dv = *dv + tap * sv;
                }
            }
        }
    }
    out
}

/// Adjoint of [`analyze_axis`]: upsample-and-filter with the same taps.
fn synthesize_axis<T: Scalar>(
    src: &[T],
    planes: usize,
    out_len: usize,
    stride_inner: usize,
    taps: &[f64],
    out: &mut [T],
) {
    let in_len = out_len / 2;
    let taps: Vec<T> = taps.iter().map(|&t| fl(t)).collect();
    for p in 0..planes {
        let src_base = p * in_len * stride_inner;
        let dst_base = p * out_len * stride_inner;
        for i in 0..in_len {
            for (k, &tap) in taps.iter().enumerate() {
                let j = (2 * i + k) % out_len;
                let s = &src[src_base + i * stride_inner..src_base + (i + 1) * stride_inner];
                let d = &mut out[dst_base + j * stride_inner..dst_base + (j + 1) * stride_inner];
                for (dv, &sv) in d.iter_mut().zip(s) {
                    *dv = *dv + tap * sv;
                }
            }
        }
    }
}

/// Split one subband into its four children (LL, LH, HL, HH).
fn analyze_once<T: Scalar>(t: &Tensor<T>, filters: &WaveletFilterPair) -> Vec<Tensor<T>> {
    let s = t.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut children = Vec::with_capacity(4);
    for &v_taps in &[&filters.h_low, &filters.h_high] {
        // vertical pass: planes = N*C, axis len H, inner stride W
        let v = analyze_axis(t.data(), n * c, h, w, v_taps);
        for &h_taps in &[&filters.h_low, &filters.h_high] {
            // horizontal pass: planes = N*C*(H/2), axis len W, inner stride 1
            let hw_data = analyze_axis(&v, n * c * (h / 2), w, 1, h_taps);
            children.push(Tensor::new(vec![n, c, h / 2, w / 2], hw_data).expect("subband shape"));
        }
    }
    children
}

/// Merge four children (LL, LH, HL, HH) back into their parent.
fn synthesize_once<T: Scalar>(children: &[Tensor<T>], filters: &WaveletFilterPair) -> Tensor<T> {
    let s = children[0].shape();
    let (n, c, h2, w2) = (s[0], s[1], s[2], s[3]);
    let (h, w) = (h2 * 2, w2 * 2);
    let mut parent = vec![T::zero(); n * c * h * w];
    let filter_pairs = [
        (&filters.h_low, &filters.h_low),
        (&filters.h_low, &filters.h_high),
        (&filters.h_high, &filters.h_low),
        (&filters.h_high, &filters.h_high),
    ];
    for (child, (v_taps, h_taps)) in children.iter().zip(filter_pairs) {
        // undo horizontal pass first, then vertical
        let mut half = vec![T::zero(); n * c * h2 * w];
        synthesize_axis(child.data(), n * c * h2, w, 1, h_taps, &mut half);
        synthesize_axis(&half, n * c, h, w, v_taps, &mut parent);
    }
    Tensor::new(vec![n, c, h, w], parent).expect("parent shape")
}

/// Level-by-level wavelet packet decomposition of an [N,C,H,W] tensor.
/// Returns packets for levels 1..=levels; level j holds 4^j subbands of
/// size H/2^j x W/2^j.
pub fn wpt_forward<T: Scalar>(
    image: &Tensor<T>,
    levels: usize,
    filters: &WaveletFilterPair,
) -> Result<Vec<CoefficientPacket<T>>> {
    let s = image.shape();
    if s.len() != 4 {
        return Err(CoreError::ShapeMismatch {
            op: "wpt_forward",
            detail: format!("expected [N,C,H,W], got {s:?}"),
        });
    }
    if levels == 0 {
        return Err(CoreError::InvalidArgument("levels must be >= 1".into()));
    }
    let (h, w) = (s[2], s[3]);
    check_divisible(h, w, levels)?;
    if (h >> levels) == 0 || (w >> levels) == 0 {
        return Err(CoreError::InvalidArgument(format!(
            "{levels} levels exhaust a {h}x{w} input"
        )));
    }

    let mut packets = Vec::with_capacity(levels);
    let mut current = vec![image.clone()];
    for level in 1..=levels {
        let mut next = Vec::with_capacity(current.len() * 4);
        for band in &current {
            next.extend(analyze_once(band, filters));
        }
        packets.push(CoefficientPacket {
            level,
            subbands: next.clone(),
        });
        current = next;
    }
    Ok(packets)
}

/// Inverse transform (test-and-tooling path; the discriminator never
/// reconstructs). Exact to float precision for orthonormal filters.
pub fn wpt_inverse<T: Scalar>(
    packet: &CoefficientPacket<T>,
    filters: &WaveletFilterPair,
) -> Result<Tensor<T>> {
    let count = packet.subbands.len();
    let expected = 4usize.pow(packet.level as u32);
    if count != expected || count == 0 {
        return Err(CoreError::InvalidArgument(format!(
            "packet at level {} must hold 4^{} = {expected} subbands, got {count}",
            packet.level, packet.level
        )));
    }
    let mut current = packet.subbands.clone();
    while current.len() > 1 {
        let mut merged = Vec::with_capacity(current.len() / 4);
        for group in current.chunks(4) {
            merged.push(synthesize_once(group, filters));
        }
        current = merged;
    }
    Ok(current.pop().expect("nonempty packet"))
}

/// Fixed convolution kernels computing the level-`levels` packet in one
/// stride-2^levels convolution: shape [C*4^levels, C, 2^levels, 2^levels],
/// output channel s*C + c = subband s of input channel c.
///
/// Only families whose taps fit inside the downsampling window (Haar)
/// embed exactly under zero padding; wider families wrap at the image
/// boundary and are rejected here.
pub fn wpt_as_conv<T: Scalar>(
    levels: usize,
    filters: &WaveletFilterPair,
    channels: usize,
) -> Result<Tensor<T>> {
    if levels == 0 {
        return Err(CoreError::InvalidArgument("levels must be >= 1".into()));
    }
    if channels == 0 {
        return Err(CoreError::InvalidArgument("channels must be >= 1".into()));
    }
    if filters.tap_count() != 2 {
        return Err(CoreError::InvalidArgument(format!(
            "wpt_as_conv supports 2-tap families only (got {} with {} taps); \
             use wpt_forward for wider wavelets",
            filters.family.name(),
            filters.tap_count()
        )));
    }
    // 1D composite kernels per level: start with the taps, then
    // K_child[2^j * u + t] = h[u] * K_parent[t].
    let mut kernels_1d: Vec<Vec<f64>> = vec![filters.h_low.clone(), filters.h_high.clone()];
    for _ in 1..levels {
        let mut next = Vec::with_capacity(kernels_1d.len() * 2);
        for parent in &kernels_1d {
            for taps in [&filters.h_low, &filters.h_high] {
                let mut child = vec![0.0; parent.len() * 2];
                for (u, &hu) in taps.iter().enumerate() {
                    for (t, &pv) in parent.iter().enumerate() {
                        child[parent.len() * u + t] = hu * pv;
                    }
                }
                next.push(child);
            }
        }
        kernels_1d = next;
    }
    // The 1D recursion produces kernels ordered depth-first over the
    // binary filter tree, which coincides with breadth-first ordering of
    // leaf paths; the 2D subband index interleaves (vertical, horizontal)
    // choices level by level.
    let k = 1usize << levels;
    let band_count = 4usize.pow(levels as u32);
    let mut kernel = Tensor::zeros(&[channels * band_count, channels, k, k]);
    for s in 0..band_count {
        // split subband index into per-level (v,h) bit pairs
        let mut v_idx = 0usize;
        let mut h_idx = 0usize;
        for level in 0..levels {
            let pair = (s >> (2 * (levels - 1 - level))) & 0b11;
            v_idx = (v_idx << 1) | (pair >> 1);
            h_idx = (h_idx << 1) | (pair & 1);
        }
        let kv = &kernels_1d[v_idx];
        let kh = &kernels_1d[h_idx];
        for c in 0..channels {
            let f = s * channels + c;
            for (i, &a) in kv.iter().enumerate() {
                for (j, &b) in kh.iter().enumerate() {
                    let idx = ((f * channels + c) * k + i) * k + j;
                    kernel.data_mut()[idx] = fl(a * b);
                }
            }
        }
    }
    Ok(kernel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv2d_forward;
    use crate::rng::Rng;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn haar_taps_are_exact() {
        let f = WaveletFilterPair::haar();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(f.h_low, vec![s, s]);
        assert_eq!(f.h_high, vec![s, -s]);
    }

    #[test]
    fn filters_are_orthonormal() {
        for fam in [WaveletFamily::Haar, WaveletFamily::Db2] {
            let f = WaveletFilterPair::new(fam);
            assert_eq!(f.h_low.len(), f.h_high.len());
            let e_low: f64 = f.h_low.iter().map(|x| x * x).sum();
            let e_high: f64 = f.h_high.iter().map(|x| x * x).sum();
            let dot: f64 = f.h_low.iter().zip(&f.h_high).map(|(a, b)| a * b).sum();
            assert!((e_low - 1.0).abs() < 1e-12, "{fam:?} low energy {e_low}");
            assert!((e_high - 1.0).abs() < 1e-12, "{fam:?} high energy {e_high}");
            assert!(dot.abs() < 1e-12, "{fam:?} cross {dot}");
        }
    }

    #[test]
    fn constant_image_has_detail_free_level_one() {
        // 2x2 constant c: LL = 2c, others zero
        let c = 0.7;
        let img = Tensor::<f64>::filled(&[1, 1, 2, 2], c);
        let packets = wpt_forward(&img, 1, &WaveletFilterPair::haar()).unwrap();
        let p = &packets[0];
        assert_eq!(p.subbands.len(), 4);
        assert!((p.subbands[0].data()[0] - 2.0 * c).abs() < 1e-12);
        for band in &p.subbands[1..] {
            assert!(band.data()[0].abs() < 1e-12);
        }
    }

    #[test]
    fn level_two_bookkeeping_on_64() {
        let img = Tensor::<f64>::zeros(&[1, 1, 64, 64]);
        let packets = wpt_forward(&img, 2, &WaveletFilterPair::haar()).unwrap();
        assert_eq!(packets.len(), 2);
        assert_eq!(packets[1].subbands.len(), 16);
        for band in &packets[1].subbands {
            assert_eq!(band.shape(), &[1, 1, 16, 16]);
        }
    }

    #[test]
    fn non_divisible_dims_are_rejected_with_guidance() {
        let img = Tensor::<f64>::zeros(&[1, 1, 6, 6]);
        let err = wpt_forward(&img, 2, &WaveletFilterPair::haar()).unwrap_err();
        assert!(err.to_string().contains("pad or resize"), "{err}");
    }

    /// Reference transform: explicit correlation-and-downsample loops,
    /// independent of the production axis-sweep implementation.
    fn wpt_level_reference(img: &Tensor<f64>, levels: usize, f: &WaveletFilterPair) -> Vec<Tensor<f64>> {
        fn split(t: &Tensor<f64>, f: &WaveletFilterPair) -> Vec<Tensor<f64>> {
            let s = t.shape();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let mut out = Vec::new();
            for v_taps in [&f.h_low, &f.h_high] {
                for h_taps in [&f.h_low, &f.h_high] {
                    let mut band = Tensor::<f64>::zeros(&[n, c, h / 2, w / 2]);
                    for ni in 0..n {
                        for ci in 0..c {
                            for oy in 0..h / 2 {
                                for ox in 0..w / 2 {
                                    let mut acc = 0.0;
                                    for (ki, &tv) in v_taps.iter().enumerate() {
                                        for (kj, &th) in h_taps.iter().enumerate() {
                                            let iy = (2 * oy + ki) % h;
                                            let ix = (2 * ox + kj) % w;
                                            acc += tv * th * t.at4(ni, ci, iy, ix);
                                        }
                                    }
                                    let idx = ((ni * c + ci) * (h / 2) + oy) * (w / 2) + ox;
                                    band.data_mut()[idx] = acc;
                                }
                            }
                        }
                    }
                    out.push(band);
                }
            }
            out
        }
        let mut current = vec![img.clone()];
        for _ in 0..levels {
            current = current.iter().flat_map(|b| split(b, f)).collect();
        }
        current
    }

    #[test]
    fn matches_loop_reference_haar_k2() {
        let mut rng = Rng::new(42);
        let img = Tensor::<f64>::randn(&[1, 1, 8, 8], 1.0, &mut rng);
        let f = WaveletFilterPair::haar();
        let packets = wpt_forward(&img, 2, &f).unwrap();
        let reference = wpt_level_reference(&img, 2, &f);
        assert_eq!(packets[1].subbands.len(), reference.len());
        for (got, want) in packets[1].subbands.iter().zip(&reference) {
            assert!(max_abs_diff(got.data(), want.data()) < 1e-10);
        }
    }

    #[test]
    fn matches_loop_reference_db2() {
        let mut rng = Rng::new(43);
        let img = Tensor::<f64>::randn(&[2, 3, 16, 16], 1.0, &mut rng);
        let f = WaveletFilterPair::db2();
        let packets = wpt_forward(&img, 2, &f).unwrap();
        let reference = wpt_level_reference(&img, 2, &f);
        for (got, want) in packets[1].subbands.iter().zip(&reference) {
            assert!(max_abs_diff(got.data(), want.data()) < 1e-10);
        }
    }

    #[test]
    fn perfect_reconstruction_roundtrip() {
        let mut rng = Rng::new(44);
        for fam in [WaveletFamily::Haar, WaveletFamily::Db2] {
            let f = WaveletFilterPair::new(fam);
            let img = Tensor::<f64>::randn(&[1, 2, 16, 16], 1.0, &mut rng);
            let packets = wpt_forward(&img, 2, &f).unwrap();
            let back = wpt_inverse(&packets[1], &f).unwrap();
            assert!(
                max_abs_diff(img.data(), back.data()) < 1e-8,
                "{fam:?} roundtrip failed"
            );
        }
    }

    #[test]
    fn impulse_roundtrips() {
        let mut img = Tensor::<f64>::zeros(&[1, 1, 8, 8]);
        img.data_mut()[0] = 1.0;
        let f = WaveletFilterPair::haar();
        let packets = wpt_forward(&img, 3, &f).unwrap();
        let back = wpt_inverse(&packets[2], &f).unwrap();
        assert!(max_abs_diff(img.data(), back.data()) < 1e-12);
    }

    #[test]
    fn zero_packet_inverts_to_zero_image() {
        let packet = CoefficientPacket {
            level: 1,
            subbands: (0..4).map(|_| Tensor::<f64>::zeros(&[1, 1, 4, 4])).collect(),
        };
        let img = wpt_inverse(&packet, &WaveletFilterPair::haar()).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
        assert_eq!(img.shape(), &[1, 1, 8, 8]);
    }

    #[test]
    fn inverse_rejects_wrong_subband_count() {
        let packet = CoefficientPacket {
            level: 1,
            subbands: (0..3).map(|_| Tensor::<f64>::zeros(&[1, 1, 4, 4])).collect(),
        };
        assert!(wpt_inverse(&packet, &WaveletFilterPair::haar()).is_err());
    }

    #[test]
    fn parseval_energy_conservation() {
        let mut rng = Rng::new(45);
        let img = Tensor::<f64>::randn(&[1, 3, 32, 32], 1.0, &mut rng);
        let e_img = img.sq_sum();
        for fam in [WaveletFamily::Haar, WaveletFamily::Db2] {
            let f = WaveletFilterPair::new(fam);
            let packets = wpt_forward(&img, 3, &f).unwrap();
            for p in &packets {
                let e = p.energy();
                assert!(
                    ((e - e_img) / e_img).abs() < 1e-8,
                    "{fam:?} level {} energy {e} vs {e_img}",
                    p.level
                );
            }
        }
    }

    #[test]
    fn haar_level_one_kernels_are_half_outer_products() {
        let k = wpt_as_conv::<f64>(1, &WaveletFilterPair::haar(), 1).unwrap();
        assert_eq!(k.shape(), &[4, 1, 2, 2]);
        let half = 0.5;
        let want = [
            [half, half, half, half],     // LL
            [half, -half, half, -half],   // LH
            [half, half, -half, -half],   // HL
            [half, -half, -half, half],   // HH
        ];
        for (s, w) in want.iter().enumerate() {
            for (i, &v) in w.iter().enumerate() {
                assert!((k.data()[s * 4 + i] - v).abs() < 1e-15, "band {s} tap {i}");
            }
        }
    }

    #[test]
    fn conv_embedding_matches_direct_transform() {
        let mut rng = Rng::new(46);
        let f = WaveletFilterPair::haar();
        for levels in 1..=3usize {
            let img = Tensor::<f64>::randn(&[2, 3, 32, 32], 1.0, &mut rng);
            let packets = wpt_forward(&img, levels, &f).unwrap();
            let flat = packets[levels - 1].flatten_channels().unwrap();
            let kernel = wpt_as_conv::<f64>(levels, &f, 3).unwrap();
            let ks = kernel.shape();
            let out = conv2d_forward(
                img.data(),
                [2, 3, 32, 32],
                kernel.data(),
                [ks[0], ks[1], ks[2], ks[3]],
                1 << levels,
                0,
            )
            .unwrap();
            assert!(
                max_abs_diff(flat.data(), &out) < 1e-10,
                "level {levels} conv equivalence"
            );
        }
    }

    #[test]
    fn grouped_kernel_treats_channels_independently() {
        // applying the 3-channel kernel equals applying the 1-channel
        // kernel to each channel separately
        let mut rng = Rng::new(47);
        let f = WaveletFilterPair::haar();
        let img = Tensor::<f64>::randn(&[1, 3, 8, 8], 1.0, &mut rng);
        let k3 = wpt_as_conv::<f64>(1, &f, 3).unwrap();
        let out3 = conv2d_forward(img.data(), [1, 3, 8, 8], k3.data(), [12, 3, 2, 2], 2, 0).unwrap();
        let k1 = wpt_as_conv::<f64>(1, &f, 1).unwrap();
        for c in 0..3 {
            let chan: Vec<f64> = img.data()[c * 64..(c + 1) * 64].to_vec();
            let out1 =
                conv2d_forward(&chan, [1, 1, 8, 8], k1.data(), [4, 1, 2, 2], 2, 0).unwrap();
            for s in 0..4 {
                let f_idx = s * 3 + c;
                let got = &out3[f_idx * 16..(f_idx + 1) * 16];
                let want = &out1[s * 16..(s + 1) * 16];
                assert!(max_abs_diff(got, want) < 1e-12);
            }
        }
    }

    #[test]
    fn db2_is_rejected_for_conv_embedding() {
        let err = wpt_as_conv::<f64>(1, &WaveletFilterPair::db2(), 3).unwrap_err();
        assert!(err.to_string().contains("2-tap"), "{err}");
    }

    #[test]
    fn transform_is_linear() {
        let mut rng = Rng::new(48);
        let f = WaveletFilterPair::haar();
        let x = Tensor::<f64>::randn(&[1, 1, 16, 16], 1.0, &mut rng);
        let y = Tensor::<f64>::randn(&[1, 1, 16, 16], 1.0, &mut rng);
        let (a, b) = (1.3, -0.7);
        let combo = Tensor::new(
            vec![1, 1, 16, 16],
            x.data().iter().zip(y.data()).map(|(&xv, &yv)| a * xv + b * yv).collect(),
        )
        .unwrap();
        let px = wpt_forward(&x, 2, &f).unwrap();
        let py = wpt_forward(&y, 2, &f).unwrap();
        let pc = wpt_forward(&combo, 2, &f).unwrap();
        for ((sx, sy), sc) in px[1]
            .subbands
            .iter()
            .zip(&py[1].subbands)
            .zip(&pc[1].subbands)
        {
            for ((&xv, &yv), &cv) in sx.data().iter().zip(sy.data()).zip(sc.data()) {
                assert!((cv - (a * xv + b * yv)).abs() < 1e-10);
            }
        }
    }
}
