//! Token bookkeeping: patchify/unpatchify, mask sampling, gather/scatter and
//! the masking-ratio schedules used during unmasking tuning.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::tensor::Scalar;

/// Per-image token sequences for a batch: `batch x num_tokens x token_len`.
///
/// Token `i` is the `p x p x C` block at grid position
/// `(i / grid_w, i % grid_w)`, flattened in `(dy, dx, c)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<T> {
    pub tokens: Vec<T>,
    pub batch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl<T: Scalar> TokenGrid<T> {
    pub fn num_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn token_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_tokens(&self, b: usize) -> &[T] {
        let n = self.num_tokens() * self.token_len();
        &self.tokens[b * n..(b + 1) * n]
    }

    pub fn token(&self, b: usize, i: usize) -> &[T] {
        let p = self.token_len();
        let off = (b * self.num_tokens() + i) * p;
        &self.tokens[off..off + p]
    }

    pub fn with_tokens(&self, tokens: Vec<T>) -> Result<Self> {
        if tokens.len() != self.tokens.len() {
            return Err(Error::Shape(format!(
                "token buffer has {} values, expected {}",
                tokens.len(),
                self.tokens.len()
            )));
        }
        Ok(Self { tokens, ..*self })
    }

    pub fn check_geometry(&self) -> Result<()> {
        let want = self.batch * self.num_tokens() * self.token_len();
        if self.patch_size == 0 || self.channels == 0 || self.tokens.len() != want {
            return Err(Error::Shape(format!(
                "token grid {}x{}x{} (p = {}, C = {}) inconsistent with {} values",
                self.batch,
                self.grid_h,
                self.grid_w,
                self.patch_size,
                self.channels,
                self.tokens.len()
            )));
        }
        Ok(())
    }

    pub fn same_geometry(&self, other: &Self) -> bool {
        self.batch == other.batch
            && self.grid_h == other.grid_h
            && self.grid_w == other.grid_w
            && self.patch_size == other.patch_size
            && self.channels == other.channels
    }
}

pub fn patchify<T: Scalar>(image: &ImageBatch<T>, p: usize) -> Result<TokenGrid<T>> {
    let (c, h, w) = (image.channels, image.height, image.width);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Patchify {
            patch: p,
            height: h,
            width: w,
        });
    }
    let (gh, gw) = (h / p, w / p);
    let mut tokens = Vec::with_capacity(image.data.len());
    for b in 0..image.batch {
        let img = image.image(b);
        for gy in 0..gh {
            for gx in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        let (y, x) = (gy * p + dy, gx * p + dx);
                        for ch in 0..c {
                            tokens.push(img[(ch * h + y) * w + x]);
                        }
                    }
                }
            }
        }
    }
    Ok(TokenGrid {
        tokens,
        batch: image.batch,
        grid_h: gh,
        grid_w: gw,
        patch_size: p,
        channels: c,
    })
}

pub fn unpatchify<T: Scalar>(grid: &TokenGrid<T>) -> Result<ImageBatch<T>> {
    grid.check_geometry()?;
    let (p, c) = (grid.patch_size, grid.channels);
    let (h, w) = (grid.grid_h * p, grid.grid_w * p);
    let mut out = ImageBatch::zeros(grid.batch, c, h, w);
    let mut it = grid.tokens.iter();
    for b in 0..grid.batch {
        let img = out.image_mut(b);
        for gy in 0..grid.grid_h {
            for gx in 0..grid.grid_w {
                for dy in 0..p {
                    for dx in 0..p {
                        let (y, x) = (gy * p + dy, gx * p + dx);
                        for ch in 0..c {
                            img[(ch * h + y) * w + x] = *it.next().expect("length checked");
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Binary per-patch mask; `true` marks a masked (dropped) patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPattern {
    bits: Vec<bool>,
}

impl MaskPattern {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn none(n: usize) -> Self {
        Self { bits: vec![false; n] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn num_masked(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn num_visible(&self) -> usize {
        self.len() - self.num_masked()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.bits[i]
    }

    /// Positions with `m = 0`, ascending.
    pub fn visible_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (!m).then_some(i))
            .collect()
    }
}

/// `floor(r * n)`, the number of masked patches at ratio `r`.
pub fn masked_count(n: usize, r: f64) -> usize {
    (r * n as f64).floor() as usize
}

pub fn check_ratio(r: f64) -> Result<()> {
    if (0.0..1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::InvalidRatio(r))
    }
}

/// Masks exactly `floor(r * n)` positions chosen uniformly without replacement:
/// a seeded shuffle of `0..n`, taking the first `floor(r * n)`.
pub fn sample_mask<R: Rng + ?Sized>(n: usize, r: f64, rng: &mut R) -> Result<MaskPattern> {
    check_ratio(r)?;
    let k = masked_count(n, r);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut bits = vec![false; n];
    for &i in &order[..k] {
        bits[i] = true;
    }
    Ok(MaskPattern { bits })
}

/// Visible tokens of one image plus their original positions.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibleTokens<T> {
    pub tokens: Vec<T>,
    pub indices: Vec<usize>,
    pub token_len: usize,
}

/// Gathers the unmasked tokens of image `b`, preserving order.
pub fn gather_unmasked<T: Scalar>(grid: &TokenGrid<T>, b: usize, m: &MaskPattern) -> Result<VisibleTokens<T>> {
    if m.len() != grid.num_tokens() {
        return Err(Error::Shape(format!(
            "mask length {} vs {} tokens",
            m.len(),
            grid.num_tokens()
        )));
    }
    let indices = m.visible_indices();
    let mut tokens = Vec::with_capacity(indices.len() * grid.token_len());
    for &i in &indices {
        tokens.extend_from_slice(grid.token(b, i));
    }
    Ok(VisibleTokens {
        tokens,
        indices,
        token_len: grid.token_len(),
    })
}

/// Rebuilds a full `N`-token sequence: visible tokens return to their
/// positions and every masked slot receives the shared `mask_token`.
pub fn scatter_with_mask_token<T: Scalar>(
    visible: &VisibleTokens<T>,
    m: &MaskPattern,
    mask_token: &[T],
) -> Result<Vec<T>> {
    let d = visible.token_len;
    if mask_token.len() != d {
        return Err(Error::Shape(format!("mask token length {} vs token length {d}", mask_token.len())));
    }
    if visible.indices.len() != m.num_visible() || visible.tokens.len() != visible.indices.len() * d {
        return Err(Error::Shape(format!(
            "{} visible tokens for a mask with {} unmasked slots",
            visible.indices.len(),
            m.num_visible()
        )));
    }
    let n = m.len();
    let mut out = vec![T::zero(); n * d];
    let mut filled = vec![false; n];
    for (j, &i) in visible.indices.iter().enumerate() {
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, len: n });
        }
        if m.is_masked(i) {
            return Err(Error::Shape(format!("visible token placed at masked slot {i}")));
        }
        out[i * d..(i + 1) * d].copy_from_slice(&visible.tokens[j * d..(j + 1) * d]);
        filled[i] = true;
    }
    for i in 0..n {
        if m.is_masked(i) {
            out[i * d..(i + 1) * d].copy_from_slice(mask_token);
        } else if !filled[i] {
            return Err(Error::Shape(format!("unmasked slot {i} received no token")));
        }
    }
    Ok(out)
}

/// Unmasking-tuning ratio `0.5 * cos^4(pi/2 * i / n_tot)`.
pub fn cosine_ratio(i: usize, n_tot: usize) -> Result<f64> {
    if n_tot == 0 {
        return Err(Error::Config("cosine schedule needs n_tot > 0".into()));
    }
    if i > n_tot {
        return Err(Error::ScheduleStep { step: i, total: n_tot });
    }
    if i == n_tot {
        // cos(pi/2) is not exactly zero in floating point
        return Ok(0.0);
    }
    let c = (std::f64::consts::FRAC_PI_2 * i as f64 / n_tot as f64).cos();
    Ok(0.5 * c.powi(4))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp_image(b: usize, c: usize, h: usize, w: usize) -> ImageBatch<f64> {
        let n = b * c * h * w;
        ImageBatch::new((0..n).map(|i| i as f64).collect(), b, c, h, w).unwrap()
    }

    #[test]
    fn patchify_token_counts() {
        let img = ImageBatch::<f32>::zeros(1, 3, 32, 32);
        let g = patchify(&img, 2).unwrap();
        assert_eq!(g.num_tokens(), 256);
        assert_eq!(g.token_len(), 12);

        let img = ramp_image(1, 1, 4, 4);
        let g = patchify(&img, 2).unwrap();
        assert_eq!(g.num_tokens(), 4);
        assert_eq!(g.token_len(), 4);
        // top-left block of a 4x4 ramp: pixels 0, 1, 4, 5
        assert_eq!(g.token(0, 0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(g.token(0, 1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(g.token(0, 2), &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let img = ImageBatch::<f32>::zeros(1, 1, 6, 4);
        assert!(matches!(patchify(&img, 4), Err(Error::Patchify { .. })));
        assert!(patchify(&img, 0).is_err());
    }

    #[test]
    fn unpatchify_zero_and_bad_geometry() {
        let g = patchify(&ImageBatch::<f64>::zeros(2, 1, 4, 4), 2).unwrap();
        assert!(unpatchify(&g).unwrap().data.iter().all(|&v| v == 0.0));
        let mut bad = g.clone();
        bad.tokens.pop();
        assert!(unpatchify(&bad).is_err());
    }

    #[test]
    fn unpatchify_swapped_tokens_swap_blocks() {
        let img = ramp_image(1, 2, 4, 6);
        let mut g = patchify(&img, 2).unwrap();
        let p = g.token_len();
        let (a, b) = (1, 4);
        for k in 0..p {
            g.tokens.swap(a * p + k, b * p + k);
        }
        let out = unpatchify(&g).unwrap();
        let (gw, ps) = (3, 2);
        let block = |im: &ImageBatch<f64>, t: usize| -> Vec<f64> {
            let (gy, gx) = (t / gw, t % gw);
            let mut v = vec![];
            for c in 0..2 {
                for dy in 0..ps {
                    for dx in 0..ps {
                        v.push(im.data[(c * 4 + gy * ps + dy) * 6 + gx * ps + dx]);
                    }
                }
            }
            v
        };
        assert_eq!(block(&out, a), block(&img, b));
        assert_eq!(block(&out, b), block(&img, a));
        assert_eq!(block(&out, 0), block(&img, 0));
    }

    #[test]
    fn mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_mask(256, 0.5, &mut rng).unwrap().num_masked(), 128);
        assert_eq!(sample_mask(256, 0.0, &mut rng).unwrap().num_masked(), 0);
        assert_eq!(sample_mask(10, 0.75, &mut rng).unwrap().num_masked(), 7);
        assert!(matches!(sample_mask(10, 1.0, &mut rng), Err(Error::InvalidRatio(_))));
        assert!(sample_mask(10, -0.1, &mut rng).is_err());
    }

    #[test]
    fn gather_examples() {
        let img = ramp_image(1, 1, 4, 4);
        let g = patchify(&img, 2).unwrap();
        let m = MaskPattern::from_bits(vec![true, false, true, false]);
        let v = gather_unmasked(&g, 0, &m).unwrap();
        assert_eq!(v.indices, vec![1, 3]);
        assert_eq!(&v.tokens[..4], g.token(0, 1));
        assert_eq!(&v.tokens[4..], g.token(0, 3));

        let all = gather_unmasked(&g, 0, &MaskPattern::none(4)).unwrap();
        assert_eq!(all.tokens, g.tokens);
        assert!(gather_unmasked(&g, 0, &MaskPattern::none(5)).is_err());
    }

    #[test]
    fn scatter_examples() {
        let img = ramp_image(1, 1, 4, 4);
        let g = patchify(&img, 2).unwrap();
        let mt = [-1.0; 4];

        let none = MaskPattern::none(4);
        let v = gather_unmasked(&g, 0, &none).unwrap();
        assert_eq!(scatter_with_mask_token(&v, &none, &mt).unwrap(), g.tokens);

        let m = MaskPattern::from_bits(vec![true, true, false, true]);
        let v = gather_unmasked(&g, 0, &m).unwrap();
        let full = scatter_with_mask_token(&v, &m, &mt).unwrap();
        assert_eq!(full.chunks(4).filter(|t| *t == mt).count(), 3);
        assert_eq!(&full[8..12], g.token(0, 2));

        let mut bad = v.clone();
        bad.indices[0] = 9;
        assert!(scatter_with_mask_token(&bad, &m, &mt).is_err());
        assert!(scatter_with_mask_token(&v, &m, &mt[..3]).is_err());
    }

    #[test]
    fn gather_scatter_keeps_positions() {
        // sentinel tokens encode their own position in every element
        let n = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tokens: Vec<f64> = (0..n).flat_map(|i| vec![i as f64; 4]).collect();
        let g = TokenGrid {
            tokens,
            batch: 1,
            grid_h: 8,
            grid_w: 8,
            patch_size: 2,
            channels: 1,
        };
        for r in [0.0, 0.25, 0.5, 0.75, 0.9] {
            let m = sample_mask(n, r, &mut rng).unwrap();
            let v = gather_unmasked(&g, 0, &m).unwrap();
            assert_eq!(v.indices.len(), n - masked_count(n, r));
            let full = scatter_with_mask_token(&v, &m, &[-1.0; 4]).unwrap();
            for i in 0..n {
                let want = if m.is_masked(i) { -1.0 } else { i as f64 };
                assert!(full[i * 4..(i + 1) * 4].iter().all(|&x| x == want));
            }
        }
    }

    #[test]
    fn cosine_ratio_values() {
        assert_eq!(cosine_ratio(0, 100).unwrap(), 0.5);
        assert!(cosine_ratio(100, 100).unwrap().abs() < 1e-30);
        assert!((cosine_ratio(50, 100).unwrap() - 0.125).abs() < 1e-15);
        assert!(matches!(cosine_ratio(101, 100), Err(Error::ScheduleStep { .. })));
        assert!(cosine_ratio(0, 0).is_err());
        let vals: Vec<f64> = (0..=1000).map(|i| cosine_ratio(i, 1000).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0]));
    }

    proptest! {
        #[test]
        fn patchify_bijection(b in 1usize..3, c in 1usize..4, gh in 1usize..5, gw in 1usize..5, p in 1usize..4, seed in any::<u64>()) {
            let (h, w) = (gh * p, gw * p);
            let n = b * c * h * w;
            let data: Vec<f32> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32 * 0.37).collect();
            let img = ImageBatch::new(data, b, c, h, w).unwrap();
            let g = patchify(&img, p).unwrap();
            prop_assert_eq!(g.num_tokens(), h * w / (p * p));
            prop_assert_eq!(unpatchify(&g).unwrap(), img);
        }
    }
}
