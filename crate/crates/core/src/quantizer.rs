//! k-means codebooks over frame features and the feature <-> token mapping.
//!
//! Training deduplicates frames into weighted points ordered by a content
//! hash, so the corpus order and exact duplication of the whole corpus have
//! no effect on the result. Features are clustered as they are, without
//! normalization.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::FrameFeatureSequence;
use crate::binio;
use crate::error::{Error, Result};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"TFC1";

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// K x D row-major.
    centroids: Vec<f32>,
    k: usize,
    dim: usize,
    pub train_distortion: f64,
    pub seed: u64,
    id: String,
}

/// Discrete audio tokens, one per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioTokenSeq {
    pub tokens: Vec<u32>,
    pub token_rate: f64,
    pub codebook_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            k: 1024,
            max_iters: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

/// Codebook plus the per-iteration training distortion.
#[derive(Debug, Clone)]
pub struct KMeansOutcome {
    pub codebook: Codebook,
    /// Distortion after the k-means++ seeding (entry 0) and after each Lloyd iteration.
    pub history: Vec<f64>,
}

impl Codebook {
    pub fn from_centroids(centroids: Vec<f32>, k: usize, dim: usize, seed: u64, train_distortion: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("codebook needs K >= 2, got {k}")));
        }
        if dim == 0 || centroids.len() != k * dim {
            return Err(Error::DimensionMismatch {
                expected: k * dim,
                got: centroids.len(),
            });
        }
        if let Some(index) = centroids.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        for i in 0..k {
            for j in 0..i {
                let d = sq_dist32(&centroids[i * dim..(i + 1) * dim], &centroids[j * dim..(j + 1) * dim]);
                if d.sqrt() <= 1e-12 {
                    return Err(Error::Config(format!("centroids {j} and {i} coincide")));
                }
            }
        }
        let mut bytes = Vec::with_capacity(8 + centroids.len() * 4);
        bytes.extend_from_slice(&(k as u32).to_le_bytes());
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
        for v in &centroids {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let id = binio::short_hash(&bytes);
        Ok(Self {
            centroids,
            k,
            dim,
            train_distortion,
            seed,
            id,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Content hash of the centroid table.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    /// Index and squared distance of the nearest centroid; ties go to the lowest index.
    pub fn nearest(&self, frame: &[f32]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.k {
            let d = sq_dist32(frame, self.centroid(i));
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        binio::write_u32(w, self.k as u32)?;
        binio::write_u32(w, self.dim as u32)?;
        binio::write_u64(w, self.seed)?;
        binio::write_f64(w, self.train_distortion)?;
        binio::write_f32_slice(w, &self.centroids)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, CODEBOOK_MAGIC)?;
        let k = binio::read_u32(r)? as usize;
        let dim = binio::read_u32(r)? as usize;
        let seed = binio::read_u64(r)?;
        let train_distortion = binio::read_f64(r)?;
        let centroids = binio::read_f32_vec(r, k * dim)?;
        binio::expect_eof(r)?;
        Self::from_centroids(centroids, k, dim, seed, train_distortion)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

impl AudioTokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn sq_dist32(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn sq_dist64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn content_key(frame: &[f32]) -> u64 {
    // FNV-1a over the raw bits.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in frame {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Distinct frames with multiplicities, ordered by content.
struct WeightedPoints {
    values: Vec<f64>,
    weights: Vec<f64>,
    dim: usize,
}

impl WeightedPoints {
    fn from_corpus(corpus: &[FrameFeatureSequence]) -> Result<Self> {
        let dim = corpus.first().ok_or(Error::EmptyCorpus)?.dim;
        let mut frames: Vec<(u64, &[f32])> = Vec::new();
        for seq in corpus {
            if seq.dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: seq.dim,
                });
            }
            if let Some(index) = seq.frames.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index });
            }
            frames.extend(seq.iter_frames().map(|f| (content_key(f), f)));
        }
        frames.sort_by(|a, b| {
            a.0.cmp(&b.0).then_with(|| {
                a.1.iter()
                    .zip(b.1)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        });
        let mut values = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        let mut prev: Option<&[f32]> = None;
        for (_, f) in frames {
            let same = prev.is_some_and(|p| p.iter().zip(f).all(|(x, y)| x.to_bits() == y.to_bits()));
            if same {
                *weights.last_mut().unwrap() += 1.0;
            } else {
                values.extend(f.iter().map(|&v| v as f64));
                weights.push(1.0);
                prev = Some(f);
            }
        }
        Ok(Self { values, weights, dim })
    }

    fn len(&self) -> usize {
        self.weights.len()
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

fn assign(points: &WeightedPoints, centroids: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    let dim = points.dim;
    (0..points.len())
        .map(|i| {
            let p = points.point(i);
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let d = sq_dist64(p, &centroids[c * dim..(c + 1) * dim]);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

fn weighted_mean_distortion(points: &WeightedPoints, d2: &[f64]) -> f64 {
    let sum: f64 = d2.iter().zip(&points.weights).map(|(d, w)| d * w).sum();
    sum / points.total_weight()
}

/// Samples index i with probability proportional to `mass[i]`.
fn sample_proportional(rng: &mut ChaCha8Rng, mass: &[f64]) -> usize {
    let total: f64 = mass.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, m) in mass.iter().enumerate() {
        if *m > 0.0 {
            acc += m;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

fn kmeans_pp(points: &WeightedPoints, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dim = points.dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = sample_proportional(rng, &points.weights);
    centroids.extend_from_slice(points.point(first));
    let mut d2: Vec<f64> = (0..points.len())
        .map(|i| sq_dist64(points.point(i), points.point(first)))
        .collect();
    for _ in 1..k {
        let mass: Vec<f64> = d2.iter().zip(&points.weights).map(|(d, w)| d * w).collect();
        let next = sample_proportional(rng, &mass);
        let c = points.point(next).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            let nd = sq_dist64(points.point(i), &c);
            if nd < *d {
                *d = nd;
            }
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Trains a codebook with k-means++ seeding followed by Lloyd iterations.
pub fn train_codebook(corpus: &[FrameFeatureSequence], params: &KMeansParams) -> Result<Codebook> {
    Ok(train_codebook_traced(corpus, params)?.codebook)
}

pub fn train_codebook_traced(corpus: &[FrameFeatureSequence], params: &KMeansParams) -> Result<KMeansOutcome> {
    let k = params.k;
    if k < 2 {
        return Err(Error::Config(format!("codebook needs K >= 2, got {k}")));
    }
    let total_frames: usize = corpus.iter().map(|s| s.num_frames).sum();
    if total_frames < k {
        return Err(Error::NotEnoughFrames {
            frames: total_frames,
            k,
        });
    }
    let points = WeightedPoints::from_corpus(corpus)?;
    if points.len() < k {
        return Err(Error::NotEnoughFrames {
            frames: points.len(),
            k,
        });
    }
    let dim = points.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = kmeans_pp(&points, k, &mut rng);
    let (mut labels, mut d2) = assign(&points, &centroids, k);
    let mut distortion = weighted_mean_distortion(&points, &d2);
    let mut history = vec![distortion];

    for _ in 0..params.max_iters {
        if distortion == 0.0 {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut mass = vec![0.0; k];
        for (i, &c) in labels.iter().enumerate() {
            let w = points.weights[i];
            mass[c] += w;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(points.point(i)) {
                *s += w * v;
            }
        }
        let mut next = centroids.clone();
        let mut residual = d2.clone();
        for c in 0..k {
            if mass[c] > 0.0 {
                for (n, s) in next[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *n = s / mass[c];
                }
            } else {
                // Reseed from the frame farthest from its centroid.
                let far = residual
                    .iter()
                    .enumerate()
                    .fold((0, -1.0), |best, (i, &d)| if d > best.1 { (i, d) } else { best })
                    .0;
                next[c * dim..(c + 1) * dim].copy_from_slice(points.point(far));
                residual[far] = 0.0;
            }
        }
        let (new_labels, new_d2) = assign(&points, &next, k);
        let new_distortion = weighted_mean_distortion(&points, &new_d2);
        if new_distortion > distortion {
            // Rounding noise at a fixed point.
            break;
        }
        let improvement = (distortion - new_distortion) / distortion;
        centroids = next;
        labels = new_labels;
        d2 = new_d2;
        distortion = new_distortion;
        history.push(distortion);
        if improvement < params.tol {
            break;
        }
    }

    let centroids32: Vec<f32> = centroids.iter().map(|&v| v as f32).collect();
    let mut codebook = Codebook::from_centroids(centroids32, k, dim, params.seed, 0.0)?;
    let final_d2: Vec<f64> = (0..points.len())
        .map(|i| {
            let p = points.point(i);
            (0..k)
                .map(|c| {
                    p.iter()
                        .zip(codebook.centroid(c))
                        .map(|(x, &y)| (x - y as f64).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    codebook.train_distortion = weighted_mean_distortion(&points, &final_d2);
    Ok(KMeansOutcome { codebook, history })
}

/// Maps each frame to its nearest centroid.
pub fn tokenize(features: &FrameFeatureSequence, cb: &Codebook) -> Result<AudioTokenSeq> {
    if features.dim != cb.dim {
        return Err(Error::DimensionMismatch {
            expected: cb.dim,
            got: features.dim,
        });
    }
    let tokens = features.iter_frames().map(|f| cb.nearest(f).0 as u32).collect();
    Ok(AudioTokenSeq {
        tokens,
        token_rate: features.frame_rate,
        codebook_id: cb.id.clone(),
    })
}

/// Replaces each token with its centroid.
pub fn detokenize(tokens: &AudioTokenSeq, cb: &Codebook) -> Result<FrameFeatureSequence> {
    if tokens.codebook_id != cb.id {
        return Err(Error::CodebookMismatch {
            expected: cb.id.clone(),
            found: tokens.codebook_id.clone(),
        });
    }
    let mut frames = Vec::with_capacity(tokens.len() * cb.dim);
    for &t in &tokens.tokens {
        if t as usize >= cb.k {
            return Err(Error::TokenOutOfRange { token: t, size: cb.k });
        }
        frames.extend_from_slice(cb.centroid(t as usize));
    }
    Ok(FrameFeatureSequence {
        num_frames: tokens.len(),
        frames,
        dim: cb.dim,
        frame_rate: tokens.token_rate,
        config_hash: None,
    })
}

/// Mean squared distance of each frame to its nearest centroid.
pub fn distortion(features: &FrameFeatureSequence, cb: &Codebook) -> Result<f64> {
    if features.dim != cb.dim {
        return Err(Error::DimensionMismatch {
            expected: cb.dim,
            got: features.dim,
        });
    }
    if features.num_frames == 0 {
        return Err(Error::EmptyCorpus);
    }
    let total: f64 = features.iter_frames().map(|f| cb.nearest(f).1).sum();
    Ok(total / features.num_frames as f64)
}

/// Writes one JSON object per line.
pub fn write_token_file<P: AsRef<Path>>(path: P, seqs: &[AudioTokenSeq]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in seqs {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_token_file<P: AsRef<Path>>(path: P) -> Result<Vec<AudioTokenSeq>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: &[&[f32]]) -> FrameFeatureSequence {
        let dim = rows[0].len();
        FrameFeatureSequence::new(rows.concat(), dim, 25.0).unwrap()
    }

    #[test]
    fn k_distinct_frames_become_the_centroids() {
        let rows: Vec<Vec<f32>> = (0..6).map(|i| vec![i as f32, (i * i) as f32]).collect();
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let params = KMeansParams {
            k: 6,
            ..Default::default()
        };
        let cb = train_codebook(&[seq(&refs)], &params).unwrap();
        assert_eq!(cb.train_distortion, 0.0);
        let mut got: Vec<Vec<f32>> = (0..6).map(|i| cb.centroid(i).to_vec()).collect();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(got, rows);
    }

    #[test]
    fn too_few_frames() {
        let s = seq(&[&[0.0], &[1.0]]);
        let params = KMeansParams {
            k: 3,
            ..Default::default()
        };
        assert!(matches!(
            train_codebook(&[s], &params),
            Err(Error::NotEnoughFrames { .. })
        ));
        let dup = seq(&[&[0.0], &[0.0], &[1.0]]);
        assert!(matches!(
            train_codebook(&[dup], &params),
            Err(Error::NotEnoughFrames { frames: 2, k: 3 })
        ));
    }

    #[test]
    fn mixed_dimensions_rejected() {
        let params = KMeansParams {
            k: 2,
            ..Default::default()
        };
        let a = seq(&[&[0.0, 1.0], &[2.0, 3.0]]);
        let b = seq(&[&[0.0], &[1.0]]);
        assert!(matches!(
            train_codebook(&[a, b], &params),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn single_frame_distortion_is_squared_distance() {
        let cb = Codebook::from_centroids(vec![0.0, 0.0, 10.0, 10.0], 2, 2, 0, 0.0).unwrap();
        let d = distortion(&seq(&[&[3.0, 4.0]]), &cb).unwrap();
        assert_eq!(d, 25.0);
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let cb = Codebook::from_centroids(vec![-1.0, 1.0], 2, 1, 0, 0.0).unwrap();
        let t = tokenize(&seq(&[&[0.0]]), &cb).unwrap();
        assert_eq!(t.tokens, vec![0]);
    }

    #[test]
    fn detokenize_checks_ids_and_range() {
        let cb = Codebook::from_centroids(vec![-1.0, 1.0], 2, 1, 0, 0.0).unwrap();
        let bad_id = AudioTokenSeq {
            tokens: vec![0],
            token_rate: 25.0,
            codebook_id: "nope".into(),
        };
        assert!(matches!(detokenize(&bad_id, &cb), Err(Error::CodebookMismatch { .. })));
        let bad_tok = AudioTokenSeq {
            tokens: vec![2],
            token_rate: 25.0,
            codebook_id: cb.id().to_string(),
        };
        assert!(matches!(
            detokenize(&bad_tok, &cb),
            Err(Error::TokenOutOfRange { token: 2, .. })
        ));
        let ok = AudioTokenSeq {
            tokens: vec![0, 0, 0],
            token_rate: 25.0,
            codebook_id: cb.id().to_string(),
        };
        assert_eq!(detokenize(&ok, &cb).unwrap().frames, vec![-1.0; 3]);
    }

    #[test]
    fn duplicate_centroids_rejected() {
        assert!(Codebook::from_centroids(vec![1.0, 1.0], 2, 1, 0, 0.0).is_err());
        assert!(Codebook::from_centroids(vec![1.0], 1, 1, 0, 0.0).is_err());
    }

    #[test]
    fn codebook_container_layout() {
        let cb = Codebook::from_centroids(vec![0.5, -0.5, 1.5, 2.5], 2, 2, 9, 0.25).unwrap();
        let mut buf = Vec::new();
        cb.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TFC1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[12..20].try_into().unwrap()), 9);
        assert_eq!(f64::from_le_bytes(buf[20..28].try_into().unwrap()), 0.25);
        assert_eq!(buf.len(), 28 + 16);
        assert_eq!(Codebook::read_from(&mut buf.as_slice()).unwrap(), cb);
    }
}
