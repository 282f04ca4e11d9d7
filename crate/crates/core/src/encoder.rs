//! LSTM speaker encoder: d-vector embeddings, verification and projection.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mel::FeatureSequence;

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_EMBEDDING: usize = 32;
pub const DEFAULT_LAYERS: usize = 3;
pub const DEFAULT_WINDOW_FRAMES: usize = 80;
pub const DEFAULT_STRIDE_FRAMES: usize = 40;

/// One LSTM layer. Gate order along the 4H axis is [input, forget, cell,
/// output]; weights are stored input-major so the forward pass is a plain
/// `x · w` product.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// (input_size × 4H)
    pub w_ih: Array2<f64>,
    /// (H × 4H)
    pub w_hh: Array2<f64>,
    /// (1 × 4H)
    pub bias: Array2<f64>,
}

impl LstmLayer {
    pub fn hidden_size(&self) -> usize {
        self.w_hh.nrows()
    }

    pub fn input_size(&self) -> usize {
        self.w_ih.nrows()
    }

    fn init(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        LstmLayer {
            w_ih: uniform_init(input, 4 * hidden, input, rng),
            w_hh: uniform_init(hidden, 4 * hidden, hidden, rng),
            bias: Array2::zeros((1, 4 * hidden)),
        }
    }

    fn zeros(input: usize, hidden: usize) -> Self {
        LstmLayer {
            w_ih: Array2::zeros((input, 4 * hidden)),
            w_hh: Array2::zeros((hidden, 4 * hidden)),
            bias: Array2::zeros((1, 4 * hidden)),
        }
    }
}

/// Stacked-LSTM encoder with a linear projection to the embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<LstmLayer>,
    /// (H × E)
    pub proj_w: Array2<f64>,
    /// (1 × E)
    pub proj_b: Array2<f64>,
}

impl EncoderParams {
    pub fn init(
        n_layers: usize,
        input_dim: usize,
        hidden: usize,
        embedding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(n_layers);
        let mut in_dim = input_dim;
        for _ in 0..n_layers {
            layers.push(LstmLayer::init(in_dim, hidden, rng));
            in_dim = hidden;
        }
        EncoderParams {
            layers,
            proj_w: uniform_init(hidden, embedding, hidden, rng),
            proj_b: Array2::zeros((1, embedding)),
        }
    }

    pub fn zeros(n_layers: usize, input_dim: usize, hidden: usize, embedding: usize) -> Self {
        let mut layers = Vec::with_capacity(n_layers);
        let mut in_dim = input_dim;
        for _ in 0..n_layers {
            layers.push(LstmLayer::zeros(in_dim, hidden));
            in_dim = hidden;
        }
        EncoderParams {
            layers,
            proj_w: Array2::zeros((hidden, embedding)),
            proj_b: Array2::zeros((1, embedding)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_size()
    }

    /// All parameters as one flat vector, layer by layer then projection.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for layer in &self.layers {
            flat.extend(layer.w_ih.iter());
            flat.extend(layer.w_hh.iter());
            flat.extend(layer.bias.iter());
        }
        flat.extend(self.proj_w.iter());
        flat.extend(self.proj_b.iter());
        flat
    }

    /// Inverse of [`EncoderParams::flatten`] for a same-shaped parameter set.
    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut cursor = 0;
        let mut take = |dst: &mut Array2<f64>| {
            for v in dst.iter_mut() {
                *v = flat[cursor];
                cursor += 1;
            }
        };
        for layer in &mut self.layers {
            take(&mut layer.w_ih);
            take(&mut layer.w_hh);
            take(&mut layer.bias);
        }
        take(&mut self.proj_w);
        take(&mut self.proj_b);
        assert_eq!(cursor, flat.len(), "flat parameter length mismatch");
    }

    pub fn hidden_size(&self) -> usize {
        self.layers.last().expect("at least one layer").hidden_size()
    }

    pub fn embedding_dim(&self) -> usize {
        self.proj_w.ncols()
    }
}

pub(crate) fn uniform_init(
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Unit-norm speaker embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Dvector(Array1<f64>);

impl Dvector {
    /// Normalizes `v`; errors when the norm is below 1e-12.
    pub fn from_unnormalized(v: Array1<f64>) -> Result<Self> {
        let norm = v.dot(&v).sqrt();
        if norm < 1e-12 {
            return Err(Error::DegenerateEmbedding);
        }
        Ok(Dvector(v / norm))
    }

    /// Accepts an already-normalized vector, within 1e-6 of unit norm.
    pub fn new(v: Array1<f64>) -> Result<Self> {
        let norm = v.dot(&v).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::DegenerateEmbedding);
        }
        Ok(Dvector(v))
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &Dvector) -> f64 {
        self.0.dot(&other.0)
    }
}

/// Runs the stacked LSTM over the feature frames and returns the last
/// layer's final hidden state.
pub fn lstm_forward(params: &EncoderParams, features: &FeatureSequence) -> Result<Array1<f64>> {
    if features.n_frames() == 0 {
        return Err(Error::EmptyInput("lstm features"));
    }
    if features.width() != params.input_dim() {
        return Err(Error::WidthMismatch {
            expected: params.input_dim(),
            found: features.width(),
        });
    }
    let batch = lstm_forward_batch(params, &[features.frames.view()]);
    Ok(batch.row(0).to_owned())
}

/// Batched final hidden states for equal-length windows, (B × H).
pub(crate) fn lstm_forward_batch(
    params: &EncoderParams,
    windows: &[ndarray::ArrayView2<f64>],
) -> Array2<f64> {
    let b = windows.len();
    let f = windows[0].nrows();
    let mut inputs: Vec<Array2<f64>> = (0..f)
        .map(|t| {
            let mut x = Array2::zeros((b, windows[0].ncols()));
            for (i, w) in windows.iter().enumerate() {
                x.row_mut(i).assign(&w.row(t));
            }
            x
        })
        .collect();

    for layer in &params.layers {
        let h_dim = layer.hidden_size();
        let mut h = Array2::zeros((b, h_dim));
        let mut c = Array2::zeros((b, h_dim));
        for x in inputs.iter_mut() {
            let gates = x.dot(&layer.w_ih) + h.dot(&layer.w_hh) + &layer.bias;
            let i_g = gates.slice(ndarray::s![.., 0..h_dim]).mapv(sigmoid);
            let f_g = gates.slice(ndarray::s![.., h_dim..2 * h_dim]).mapv(sigmoid);
            let g_g = gates
                .slice(ndarray::s![.., 2 * h_dim..3 * h_dim])
                .mapv(f64::tanh);
            let o_g = gates
                .slice(ndarray::s![.., 3 * h_dim..4 * h_dim])
                .mapv(sigmoid);
            c = &f_g * &c + &i_g * &g_g;
            h = &o_g * &c.mapv(f64::tanh);
            *x = h.clone();
        }
    }
    inputs.pop().unwrap_or_else(|| Array2::zeros((b, params.hidden_size())))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Projects the final hidden state and L2-normalizes it (the d-vector).
pub fn embed_frames(params: &EncoderParams, features: &FeatureSequence) -> Result<Dvector> {
    let h = lstm_forward(params, features)?;
    let proj = h.dot(&params.proj_w) + &params.proj_b.row(0);
    Dvector::from_unnormalized(proj)
}

/// Slides fixed windows over the utterance, embeds each, averages the
/// d-vectors and re-normalizes. Inputs shorter than one window are tiled.
pub fn embed_utterance(
    params: &EncoderParams,
    features: &FeatureSequence,
    window_frames: usize,
    stride_frames: usize,
) -> Result<Dvector> {
    if features.n_frames() == 0 {
        return Err(Error::EmptyInput("utterance features"));
    }
    if features.width() != params.input_dim() {
        return Err(Error::WidthMismatch {
            expected: params.input_dim(),
            found: features.width(),
        });
    }
    let tiled;
    let frames = if features.n_frames() < window_frames {
        let mut m = Array2::zeros((window_frames, features.width()));
        for t in 0..window_frames {
            m.row_mut(t).assign(&features.frames.row(t % features.n_frames()));
        }
        tiled = m;
        tiled.view()
    } else {
        features.frames.view()
    };

    let total = frames.nrows();
    let windows: Vec<_> = (0..=total - window_frames)
        .step_by(stride_frames.max(1))
        .map(|start| frames.slice(ndarray::s![start..start + window_frames, ..]))
        .collect();

    let hidden = lstm_forward_batch(params, &windows);
    let projected = hidden.dot(&params.proj_w) + &params.proj_b;
    let mut mean = Array1::zeros(params.embedding_dim());
    for row in projected.rows() {
        let norm = row.dot(&row).sqrt();
        if norm < 1e-12 {
            return Err(Error::DegenerateEmbedding);
        }
        mean = mean + &row.mapv(|v| v / norm);
    }
    mean /= windows.len() as f64;
    Dvector::from_unnormalized(mean)
}

/// Cosine similarity with an accept decision at `threshold` (inclusive).
pub fn cosine_verify(a: &Dvector, b: &Dvector, threshold: f64) -> (f64, bool) {
    let similarity = a.cosine(b);
    (similarity, similarity >= threshold)
}

/// Equal error rate from a threshold sweep over all candidate scores, with
/// linear interpolation between adjacent sweep points.
pub fn compute_eer(same_scores: &[f64], diff_scores: &[f64]) -> Result<f64> {
    if same_scores.is_empty() {
        return Err(Error::EmptyInput("same-speaker scores"));
    }
    if diff_scores.is_empty() {
        return Err(Error::EmptyInput("different-speaker scores"));
    }
    let mut thresholds: Vec<f64> = same_scores.iter().chain(diff_scores).cloned().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let max = *thresholds.last().unwrap();
    thresholds.push(max + 1.0);

    let rates = |t: f64| -> (f64, f64) {
        let far = diff_scores.iter().filter(|&&s| s >= t).count() as f64
            / diff_scores.len() as f64;
        let frr =
            same_scores.iter().filter(|&&s| s < t).count() as f64 / same_scores.len() as f64;
        (far, frr)
    };

    let (mut far_prev, mut frr_prev) = (1.0f64, 0.0f64);
    for &t in &thresholds {
        let (far, frr) = rates(t);
        if far <= frr {
            if (far - frr).abs() < 1e-12 {
                return Ok(far);
            }
            let gap_prev = far_prev - frr_prev;
            let gap_here = frr - far;
            let alpha = if gap_prev + gap_here > 0.0 {
                gap_prev / (gap_prev + gap_here)
            } else {
                0.5
            };
            return Ok(far_prev + alpha * (far - far_prev));
        }
        far_prev = far;
        frr_prev = frr;
    }
    Ok(0.0)
}

/// Mean-centered projection onto the top two principal components.
pub fn project_2d(embeddings: &[Dvector]) -> Result<Vec<[f64; 2]>> {
    if embeddings.len() < 2 {
        return Err(Error::EmptyInput("need at least two embeddings to project"));
    }
    let dim = embeddings[0].dim();
    let n = embeddings.len();
    let mut data = Array2::zeros((n, dim));
    for (i, e) in embeddings.iter().enumerate() {
        data.row_mut(i).assign(e.values());
    }
    let mean = data.mean_axis(Axis(0)).unwrap();
    let centered = &data - &mean.insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0).max(1.0);

    let (eigenvalues, eigenvectors) = jacobi_eigh(&cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eigenvalues[b].partial_cmp(&eigenvalues[a]).unwrap());
    let (top0, top1) = (order[0], order[1]);

    Ok(centered
        .rows()
        .into_iter()
        .map(|row| {
            [
                row.dot(&eigenvectors.column(top0)),
                row.dot(&eigenvectors.column(top1)),
            ]
        })
        .collect())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues and the matrix whose columns are the eigenvectors.
fn jacobi_eigh(matrix: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = matrix.nrows();
    let mut a = matrix.clone();
    let mut v: Array2<f64> = Array2::eye(n);

    for _sweep in 0..100 {
        let mut off: f64 = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let eigenvalues = (0..n).map(|i| a[[i, i]]).collect();
    (eigenvalues, v)
}
