//! Codebook quantizer: nearest-codeword search, lookup, initialization and
//! the index wire format.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saliency::Latent;

pub const DEFAULT_N_IDX: usize = 256;
pub const BETA_COMMIT: f64 = 0.25;
const LLOYD_ITERS: usize = 10;

/// `n_idx` codewords of length `granularity^2 * channels`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    granularity: usize,
    channels: usize,
    words: Vec<f32>,
}

impl Codebook {
    pub fn new(granularity: usize, channels: usize, words: Vec<f32>) -> Result<Self> {
        let dim = granularity * granularity * channels;
        if dim == 0 || words.is_empty() || words.len() % dim != 0 {
            return Err(Error::invalid(
                "codebook",
                format!("{} values do not form codewords of length {dim}", words.len()),
            ));
        }
        if words.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("codebook", "non-finite codeword entry"));
        }
        Ok(Codebook {
            granularity,
            channels,
            words,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.granularity * self.granularity * self.channels
    }

    pub fn granularity(&self) -> usize {
        self.granularity
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn words(&self) -> &[f32] {
        &self.words
    }

    pub fn word(&self, index: usize) -> &[f32] {
        let d = self.dim();
        &self.words[index * d..(index + 1) * d]
    }

    /// Codebook whose word `i` is word `order[i]` of this one.
    pub fn permuted(&self, order: &[usize]) -> Result<Codebook> {
        let mut seen = vec![false; self.len()];
        if order.len() != self.len() || !order.iter().all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true)) {
            return Err(Error::invalid("codebook order", format!("not a permutation of {} words", self.len())));
        }
        let words = order.iter().flat_map(|&i| self.word(i).iter().copied()).collect();
        Codebook::new(self.granularity, self.channels, words)
    }

    /// Index of the codeword nearest to `v`; ties go to the lowest index.
    pub fn nearest(&self, v: &[f32]) -> usize {
        nearest(&self.words, self.dim(), v)
    }

    /// Smallest distance between two distinct codewords (infinite for one word).
    pub fn min_distance(&self) -> f64 {
        let n = self.len();
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in i + 1..n {
                best = best.min(sq_dist(self.word(i), self.word(j)).sqrt());
            }
        }
        best
    }

    /// Every codeword scaled to unit mean square, as sent by the analog-codeword mode.
    pub fn unit_power(&self) -> Result<Codebook> {
        let d = self.dim();
        let mut words = self.words.clone();
        for w in words.chunks_mut(d) {
            let ms = w.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / d as f64;
            if ms == 0.0 {
                return Err(ulbsc_autodiff::Error::DegenerateSignal.into());
            }
            let s = ms.sqrt();
            w.iter_mut().for_each(|v| *v = (*v as f64 / s) as f32);
        }
        Codebook::new(self.granularity, self.channels, words)
    }

    /// Grid dimensions for a latent of the given shape.
    fn grid_for(&self, shape: (usize, usize, usize)) -> Result<(usize, usize)> {
        let (h, w, c) = shape;
        let g = self.granularity;
        if c != self.channels {
            return Err(Error::invalid(
                "latent",
                format!("{c} channels, codebook expects {}", self.channels),
            ));
        }
        if h % g != 0 || w % g != 0 {
            return Err(Error::invalid(
                "latent",
                format!("{h}x{w} is not divisible by granularity {g}"),
            ));
        }
        Ok((h / g, w / g))
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

pub(crate) fn nearest(words: &[f32], dim: usize, v: &[f32]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, w) in words.chunks(dim).enumerate() {
        let d = sq_dist(w, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Codeword indices laid out over the block grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexGrid {
    pub rows: usize,
    pub cols: usize,
    pub indices: Vec<usize>,
}

impl IndexGrid {
    pub fn new(rows: usize, cols: usize, indices: Vec<usize>) -> Result<Self> {
        if rows * cols == 0 || indices.len() != rows * cols {
            return Err(Error::invalid(
                "index grid",
                format!("{rows}x{cols} with {} indices", indices.len()),
            ));
        }
        Ok(IndexGrid { rows, cols, indices })
    }

    pub fn cells(&self) -> usize {
        self.indices.len()
    }
}

/// Offsets of every block element inside a flat latent, block-major.
///
/// Within a block, elements are ordered (row, col, channel). `offset(r, c, ch)`
/// maps a latent coordinate to its flat position.
fn block_offsets(
    (h, w, c): (usize, usize, usize),
    g: usize,
    offset: impl Fn(usize, usize, usize) -> usize,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(h * w * c);
    for br in 0..h / g {
        for bc in 0..w / g {
            for dr in 0..g {
                for dc in 0..g {
                    for ch in 0..c {
                        out.push(offset(br * g + dr, bc * g + dc, ch));
                    }
                }
            }
        }
    }
    out
}

/// Block vectors of a latent, one row of length D per grid cell.
pub fn blocks(latent: &Latent, g: usize) -> Vec<f32> {
    let (_, w, c) = latent.shape();
    let v = latent.values();
    block_offsets(latent.shape(), g, |r, col, ch| (r * w + col) * c + ch)
        .into_iter()
        .map(|i| v[i])
        .collect()
}

fn stitch(block_rows: &[f32], shape: (usize, usize, usize), g: usize) -> Latent {
    let (h, w, c) = shape;
    let mut values = vec![0.0f32; h * w * c];
    for (k, i) in block_offsets(shape, g, |r, col, ch| (r * w + col) * c + ch).into_iter().enumerate() {
        values[i] = block_rows[k];
    }
    Latent::new(h, w, c, values).expect("stitched latent is well formed")
}

/// Gather maps between a batch of channel-major latents `[N, C, H, W]` and
/// block rows `[N * cells, D]`. Returns (to_blocks, from_blocks).
pub fn batch_block_maps(n: usize, shape: (usize, usize, usize), g: usize) -> (Vec<usize>, Vec<usize>) {
    let (h, w, c) = shape;
    let per = h * w * c;
    let one = block_offsets(shape, g, |r, col, ch| (ch * h + r) * w + col);
    let to_blocks: Vec<usize> = (0..n).flat_map(|s| one.iter().map(move |&i| s * per + i)).collect();
    let mut from_blocks = vec![0; to_blocks.len()];
    for (k, &i) in to_blocks.iter().enumerate() {
        from_blocks[i] = k;
    }
    (to_blocks, from_blocks)
}

/// Replaces every block with its nearest codeword.
pub fn quantize(latent: &Latent, codebook: &Codebook) -> Result<(IndexGrid, Latent)> {
    let grid = reproject(latent, codebook)?;
    let q = dequantize(&grid, codebook)?;
    Ok((grid, q))
}

/// Nearest-codeword indices of a (possibly noisy) latent.
pub fn reproject(latent: &Latent, codebook: &Codebook) -> Result<IndexGrid> {
    let (rows, cols) = codebook.grid_for(latent.shape())?;
    let indices = blocks(latent, codebook.granularity)
        .chunks(codebook.dim())
        .map(|b| codebook.nearest(b))
        .collect();
    IndexGrid::new(rows, cols, indices)
}

/// Codeword lookup stitched back into a latent.
pub fn dequantize(grid: &IndexGrid, codebook: &Codebook) -> Result<Latent> {
    let mut rows = Vec::with_capacity(grid.cells() * codebook.dim());
    for &i in &grid.indices {
        if i >= codebook.len() {
            return Err(Error::Lookup {
                index: i,
                n_idx: codebook.len(),
            });
        }
        rows.extend_from_slice(codebook.word(i));
    }
    let g = codebook.granularity;
    Ok(stitch(&rows, (grid.rows * g, grid.cols * g, codebook.channels), g))
}

/// Codebook and commitment losses `(mean |sg(z) - zq|^2, mean |z - sg(zq)|^2)`.
///
/// Their forward values coincide; they differ only in where gradients flow,
/// which the training graph expresses with stop-gradients.
pub fn vq_losses(latent: &Latent, latent_q: &Latent) -> Result<(f64, f64)> {
    if latent.shape() != latent_q.shape() {
        return Err(Error::invalid(
            "vq_losses",
            format!("shapes {:?} and {:?} differ", latent.shape(), latent_q.shape()),
        ));
    }
    let n = latent.values().len() as f64;
    let l = sq_dist(latent.values(), latent_q.values()) / n;
    Ok((l, l))
}

/// k-means++ seeding followed by Lloyd iterations over the sample blocks.
pub fn init_codebook(sample: &[Latent], n_idx: usize, granularity: usize, seed: u64) -> Result<Codebook> {
    let first = sample
        .first()
        .ok_or_else(|| Error::invalid("codebook sample", "no latents"))?;
    if n_idx == 0 || granularity == 0 {
        return Err(Error::invalid("codebook size", format!("n_idx {n_idx}, granularity {granularity}")));
    }
    let channels = first.shape().2;
    let dim = granularity * granularity * channels;
    let mut points = Vec::new();
    for l in sample {
        if l.shape() != first.shape() {
            return Err(Error::invalid("codebook sample", "latents of differing shapes"));
        }
        let probe = Codebook::new(granularity, channels, vec![0.0; dim])?;
        probe.grid_for(l.shape())?;
        points.extend(blocks(l, granularity));
    }
    let n_points = points.len() / dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let distinct: Vec<usize> = {
        let mut seen = HashSet::new();
        (0..n_points)
            .filter(|&i| seen.insert(points[i * dim..(i + 1) * dim].iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
            .collect()
    };
    if n_idx > distinct.len() {
        log::warn!(
            "{n_idx} codewords requested from {} distinct blocks; padding with jittered copies",
            distinct.len()
        );
        let rms = (points.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / points.len() as f64)
            .sqrt()
            .max(1e-3);
        let mut words = Vec::with_capacity(n_idx * dim);
        for k in 0..n_idx {
            let src = distinct[k % distinct.len()];
            let jitter = if k < distinct.len() { 0.0 } else { 1e-2 * rms };
            for &v in &points[src * dim..(src + 1) * dim] {
                let e: f64 = StandardNormal.sample(&mut rng);
                words.push((v as f64 + jitter * e) as f32);
            }
        }
        return Codebook::new(granularity, channels, words);
    }

    // k-means++ seeding
    let mut centers: Vec<f32> = Vec::with_capacity(n_idx * dim);
    let pick = distinct[rng.random_range(0..distinct.len())];
    centers.extend_from_slice(&points[pick * dim..(pick + 1) * dim]);
    let mut d2: Vec<f64> = (0..n_points)
        .map(|i| sq_dist(&points[i * dim..(i + 1) * dim], &centers[..dim]))
        .collect();
    while centers.len() < n_idx * dim {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(&mut rng),
            // all remaining mass is zero: every point sits on a center
            Err(_) => distinct[rng.random_range(0..distinct.len())],
        };
        let start = centers.len();
        centers.extend_from_slice(&points[next * dim..(next + 1) * dim]);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(&points[i * dim..(i + 1) * dim], &centers[start..]));
        }
    }

    // Lloyd iterations; empty clusters keep their previous center
    let mut assign = vec![0usize; n_points];
    for _ in 0..LLOYD_ITERS {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = nearest(&centers, dim, &points[i * dim..(i + 1) * dim]);
        }
        let mut sums = vec![0.0f64; n_idx * dim];
        let mut counts = vec![0usize; n_idx];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(&points[i * dim..(i + 1) * dim]) {
                *s += v as f64;
            }
        }
        for k in 0..n_idx {
            if counts[k] > 0 {
                for j in 0..dim {
                    centers[k * dim + j] = (sums[k * dim + j] / counts[k] as f64) as f32;
                }
            }
        }
    }
    Codebook::new(granularity, channels, centers)
}

/// Bits used for one index on the wire: `ceil(log2(n_idx))`.
pub fn bits_per_index(n_idx: usize) -> u32 {
    if n_idx <= 1 {
        0
    } else {
        usize::BITS - (n_idx - 1).leading_zeros()
    }
}

/// Payload size in bytes for `cells` indices.
pub fn payload_bytes(cells: usize, n_idx: usize) -> usize {
    (cells * bits_per_index(n_idx) as usize).div_ceil(8)
}

/// Big-endian bit packing, zero padded to a whole byte.
pub fn pack_indices(indices: &[usize], n_idx: usize) -> Result<Vec<u8>> {
    let bits = bits_per_index(n_idx);
    let mut out = vec![0u8; payload_bytes(indices.len(), n_idx)];
    let mut pos = 0usize;
    for &idx in indices {
        if idx >= n_idx {
            return Err(Error::Lookup { index: idx, n_idx });
        }
        for b in (0..bits).rev() {
            if (idx >> b) & 1 == 1 {
                out[pos / 8] |= 0x80 >> (pos % 8);
            }
            pos += 1;
        }
    }
    Ok(out)
}

/// Inverse of [`pack_indices`]. Values are returned as read, so after bit
/// errors they may exceed `n_idx - 1`; padding bits are ignored.
pub fn unpack_indices(bytes: &[u8], count: usize, n_idx: usize) -> Result<Vec<usize>> {
    let bits = bits_per_index(n_idx);
    let expected = count
        .checked_mul(bits as usize)
        .map(|b| b.div_ceil(8))
        .ok_or_else(|| Error::Format("index count overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "index payload has {} bytes, {count} indices of {bits} bits need {expected}",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    let mut pos = 0usize;
    for _ in 0..count {
        let mut v = 0usize;
        for _ in 0..bits {
            let bit = (bytes[pos / 8] >> (7 - pos % 8)) & 1;
            v = (v << 1) | bit as usize;
            pos += 1;
        }
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_word() -> Codebook {
        // g = 1, c' = 2: codewords are 2-vectors
        Codebook::new(1, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap()
    }

    fn cell(a: f32, b: f32) -> Latent {
        Latent::new(1, 1, 2, vec![a, b]).unwrap()
    }

    #[test]
    fn nearest_examples() {
        let cb = two_word();
        assert_eq!(reproject(&cell(0.2, 0.1), &cb).unwrap().indices, vec![0]);
        assert_eq!(reproject(&cell(0.5, 0.5), &cb).unwrap().indices, vec![0]);
        let (grid, q) = quantize(&cell(1.0, 1.0), &cb).unwrap();
        assert_eq!(grid.indices, vec![1]);
        assert_eq!(q.values(), &[1.0, 1.0]);
    }

    #[test]
    fn lookup() {
        let cb = two_word();
        let grid = IndexGrid::new(1, 1, vec![1]).unwrap();
        assert_eq!(dequantize(&grid, &cb).unwrap().values(), &[1.0, 1.0]);
        let bad = IndexGrid::new(1, 1, vec![2]).unwrap();
        assert!(matches!(dequantize(&bad, &cb), Err(Error::Lookup { index: 2, n_idx: 2 })));
    }

    #[test]
    fn global_mode_single_index() {
        let words: Vec<f32> = (0..2 * 32).map(|i| i as f32).collect();
        let cb = Codebook::new(4, 2, words).unwrap();
        let grid = IndexGrid::new(1, 1, vec![1]).unwrap();
        let l = dequantize(&grid, &cb).unwrap();
        assert_eq!(l.shape(), (4, 4, 2));
        assert_eq!(blocks(&l, 4), cb.word(1));
    }

    #[test]
    fn indivisible_latent() {
        let cb = Codebook::new(2, 1, vec![0.0; 4]).unwrap();
        assert!(reproject(&Latent::zeros(3, 4, 1), &cb).is_err());
        assert!(reproject(&Latent::zeros(4, 4, 2), &cb).is_err());
    }

    #[test]
    fn vq_loss_examples() {
        assert_eq!(vq_losses(&cell(0.3, 0.4), &cell(0.3, 0.4)).unwrap(), (0.0, 0.0));
        assert_eq!(vq_losses(&cell(0.0, 0.0), &cell(1.0, 1.0)).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn batch_maps_are_inverse() {
        let (to, from) = batch_block_maps(2, (4, 4, 3), 2);
        assert_eq!(to.len(), 96);
        for (k, &i) in to.iter().enumerate() {
            assert_eq!(from[i], k);
        }
    }

    #[test]
    fn single_codeword_is_the_mean() {
        let sample = vec![cell(0.0, 2.0), cell(1.0, 4.0), cell(2.0, 0.0)];
        let cb = init_codebook(&sample, 1, 1, 0).unwrap();
        assert_eq!(cb.words(), &[1.0, 2.0]);
    }

    #[test]
    fn too_few_distinct_blocks_pad_with_jitter() {
        let sample = vec![cell(0.0, 0.0), cell(0.0, 0.0), cell(1.0, 1.0)];
        let cb = init_codebook(&sample, 4, 1, 0).unwrap();
        assert_eq!(cb.len(), 4);
        assert!(cb.min_distance() > 0.0);
    }

    #[test]
    fn bit_widths() {
        assert_eq!(bits_per_index(1), 0);
        assert_eq!(bits_per_index(2), 1);
        assert_eq!(bits_per_index(16), 4);
        assert_eq!(bits_per_index(17), 5);
        assert_eq!(bits_per_index(256), 8);
        assert_eq!(payload_bytes(1, 256), 1);
        assert_eq!(payload_bytes(64, 256), 64);
        assert_eq!(payload_bytes(3, 8), 2);
    }

    #[test]
    fn packing_is_big_endian() {
        assert_eq!(pack_indices(&[1], 256).unwrap(), vec![0b0000_0001]);
        assert_eq!(pack_indices(&[5, 2], 8).unwrap(), vec![0b1010_1000]);
        assert_eq!(unpack_indices(&[0b1010_1000], 2, 8).unwrap(), vec![5, 2]);
        assert!(unpack_indices(&[0, 0], 2, 8).is_err());
        assert!(pack_indices(&[8], 8).is_err());
    }
}
