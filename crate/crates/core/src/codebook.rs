//! Shared discrete codebook: nearest-neighbor quantization, straight-through
//! gradient estimation and EMA entry updates.
//!
//! Entries are never updated by gradient descent; [`Codebook::ema_update`]
//! tracks exponential moving averages of assignment counts and assigned
//! feature sums, and rebuilds entries from their smoothed ratio.

use crate::error::{Error, Result};
use crate::nn::{Tape, Var};
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Integer token grid addressing codebook entries. The shape mirrors the
/// feature grid it was quantized from, minus the trailing feature axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub indices: ArrayD<usize>,
    /// Codebook size the indices address.
    pub vocab: usize,
}

impl TokenGrid {
    pub fn new(indices: ArrayD<usize>, vocab: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::TokenOutOfRange { index: bad, size: vocab });
        }
        Ok(Self { indices, vocab })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn flat(&self) -> Vec<usize> {
        self.indices.iter().cloned().collect()
    }
}

/// The three token grids of one clip: scene and object `(h, w)` grids plus a
/// motion `(T, h_m, w_m)` grid. The interchange format between the tokenizer
/// and the token-level transformers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBundle {
    pub scene: TokenGrid,
    pub object: TokenGrid,
    pub motion: TokenGrid,
}

/// Learnable codebook of `N` entries of dimension `D` with EMA statistics.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub entries: Array2<f64>,
    pub ema_cluster_size: Array1<f64>,
    pub ema_embed_sum: Array2<f64>,
    pub decay: f64,
    pub smoothing_eps: f64,
    /// Consecutive updates each entry has spent below the dead threshold.
    dead_streak: Vec<u32>,
}

impl Codebook {
    /// Standard-normal entry initialization; EMA statistics start as if
    /// each entry had one assignment of itself.
    pub fn new(n: usize, d: usize, decay: f64, smoothing_eps: f64, rng: &mut ChaCha8Rng) -> Self {
        assert!(n >= 1 && d >= 1);
        assert!(decay > 0.0 && decay < 1.0);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let entries = Array2::from_shape_fn((n, d), |_| dist.sample(rng));
        let ema_embed_sum = entries.clone();
        Self {
            entries,
            ema_cluster_size: Array1::ones(n),
            ema_embed_sum,
            decay,
            smoothing_eps,
            dead_streak: vec![0; n],
        }
    }

    pub fn from_entries(entries: Array2<f64>, decay: f64, smoothing_eps: f64) -> Self {
        let n = entries.nrows();
        let ema_embed_sum = entries.clone();
        Self {
            entries,
            ema_cluster_size: Array1::ones(n),
            ema_embed_sum,
            decay,
            smoothing_eps,
            dead_streak: vec![0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn d(&self) -> usize {
        self.entries.ncols()
    }

    /// EMA update from one batch of features and their token assignments.
    ///
    /// Per entry i:
    ///   size_i <- decay * size_i + (1 - decay) * count_i
    ///   sum_i  <- decay * sum_i  + (1 - decay) * sum of assigned features
    ///   e_i    <- sum_i / laplace_smoothed(size_i)
    pub fn ema_update(&mut self, features: &ArrayD<f64>, tokens: &TokenGrid) -> Result<()> {
        let (n, d) = (self.n(), self.d());
        let flat = flatten_features(features, d)?;
        if flat.nrows() != tokens.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows vs {} tokens",
                flat.nrows(),
                tokens.len()
            )));
        }
        let mut counts = Array1::<f64>::zeros(n);
        let mut sums = Array2::<f64>::zeros((n, d));
        for (row, &token) in flat.outer_iter().zip(tokens.indices.iter()) {
            if token >= n {
                return Err(Error::TokenOutOfRange { index: token, size: n });
            }
            counts[token] += 1.0;
            let mut s = sums.row_mut(token);
            s += &row;
        }
        let (decay, eps) = (self.decay, self.smoothing_eps);
        self.ema_cluster_size
            .zip_mut_with(&counts, |s, &c| *s = decay * *s + (1.0 - decay) * c);
        self.ema_embed_sum
            .zip_mut_with(&sums, |s, &c| *s = decay * *s + (1.0 - decay) * c);
        // Laplace smoothing over the total count keeps divisors positive.
        let total: f64 = self.ema_cluster_size.sum();
        for i in 0..n {
            let smoothed =
                (self.ema_cluster_size[i] + eps) / (total + n as f64 * eps) * total;
            let mut e = self.entries.row_mut(i);
            e.assign(&self.ema_embed_sum.row(i));
            e.mapv_inplace(|v| v / smoothed);
        }
        Ok(())
    }

    /// Reinitializes entries whose smoothed cluster size has stayed below 1.0
    /// for `patience` consecutive updates, copying random rows of `features`.
    /// Returns how many entries were refreshed.
    pub fn refresh_dead_entries(
        &mut self,
        features: &ArrayD<f64>,
        patience: u32,
        rng: &mut ChaCha8Rng,
    ) -> Result<usize> {
        let d = self.d();
        let flat = flatten_features(features, d)?;
        if flat.nrows() == 0 {
            return Ok(0);
        }
        let total: f64 = self.ema_cluster_size.sum();
        let n = self.n();
        let mut refreshed = 0;
        for i in 0..n {
            let smoothed = (self.ema_cluster_size[i] + self.smoothing_eps)
                / (total + n as f64 * self.smoothing_eps)
                * total;
            if smoothed < 1.0 {
                self.dead_streak[i] += 1;
            } else {
                self.dead_streak[i] = 0;
            }
            if self.dead_streak[i] >= patience {
                let pick = rng.gen_range(0..flat.nrows());
                self.entries.row_mut(i).assign(&flat.row(pick));
                self.ema_embed_sum.row_mut(i).assign(&flat.row(pick));
                self.ema_cluster_size[i] = 1.0;
                self.dead_streak[i] = 0;
                refreshed += 1;
            }
        }
        Ok(refreshed)
    }
}

fn flatten_features(features: &ArrayD<f64>, d: usize) -> Result<Array2<f64>> {
    let shape = features.shape();
    let last = *shape.last().ok_or_else(|| {
        Error::ShapeMismatch("feature grid must have at least one axis".into())
    })?;
    if last != d {
        return Err(Error::ShapeMismatch(format!(
            "feature dim {last} does not match codebook dim {d}"
        )));
    }
    let rows = features.len() / d;
    Ok(features
        .view()
        .into_shape_with_order((rows, d))
        .expect("contiguous features")
        .to_owned())
}

/// Nearest-neighbor quantization of a `...xD` feature grid.
///
/// Returns the quantized grid (same shape, each position replaced by its
/// nearest entry under squared L2) and the token grid. Argmin ties resolve
/// to the lowest index.
pub fn quantize(features: &ArrayD<f64>, book: &Codebook) -> Result<(ArrayD<f64>, TokenGrid)> {
    let d = book.d();
    let flat = flatten_features(features, d)?;
    let rows = flat.nrows();
    // ||e - z||^2 = ||z||^2 - 2 z.e + ||e||^2; the z term is argmin-invariant.
    let cross = flat.dot(&book.entries.t()); // (rows, N)
    let entry_sq: Array1<f64> = book
        .entries
        .outer_iter()
        .map(|e| e.iter().map(|v| v * v).sum())
        .collect();
    let mut indices = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut best = 0usize;
        let mut best_score = entry_sq[0] - 2.0 * cross[[r, 0]];
        for i in 1..book.n() {
            let score = entry_sq[i] - 2.0 * cross[[r, i]];
            if score < best_score {
                best_score = score;
                best = i;
            }
        }
        indices.push(best);
    }
    let mut quantized = Array2::<f64>::zeros((rows, d));
    for (r, &i) in indices.iter().enumerate() {
        quantized.row_mut(r).assign(&book.entries.row(i));
    }
    let token_shape: Vec<usize> = features.shape()[..features.ndim() - 1].to_vec();
    let tokens = TokenGrid {
        indices: ArrayD::from_shape_vec(IxDyn(&token_shape), indices).expect("token shape"),
        vocab: book.n(),
    };
    let quantized = quantized
        .into_shape_with_order(features.raw_dim())
        .expect("quantized shape");
    Ok((quantized, tokens))
}

/// Replaces each token index by its codebook entry, appending a trailing
/// feature axis of length `D`.
pub fn lookup(tokens: &TokenGrid, book: &Codebook) -> Result<ArrayD<f64>> {
    if tokens.vocab != book.n() {
        return Err(Error::ShapeMismatch(format!(
            "token vocab {} vs codebook size {}",
            tokens.vocab,
            book.n()
        )));
    }
    let d = book.d();
    let mut shape: Vec<usize> = tokens.indices.shape().to_vec();
    shape.push(d);
    let mut out = Array2::<f64>::zeros((tokens.len(), d));
    for (r, &i) in tokens.indices.iter().enumerate() {
        if i >= book.n() {
            return Err(Error::TokenOutOfRange { index: i, size: book.n() });
        }
        out.row_mut(r).assign(&book.entries.row(i));
    }
    Ok(out.into_shape_with_order(IxDyn(&shape)).expect("lookup shape"))
}

/// Straight-through estimator on the tape: the forward value is `quantized`,
/// the backward pass treats the op as identity on `raw`.
pub fn straight_through(tape: &Tape, raw: Var, quantized: &ArrayD<f64>) -> Var {
    tape.straight_through(raw, quantized)
}

/// One shared codebook, or one per component.
#[derive(Clone, Debug)]
pub enum CodebookSet {
    Shared(Codebook),
    PerComponent { scene: Codebook, object: Codebook, motion: Codebook },
}

/// Component selector for per-component codebook access.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Scene,
    Object,
    Motion,
}

impl CodebookSet {
    pub fn shared(book: Codebook) -> Self {
        CodebookSet::Shared(book)
    }

    pub fn separate(scene: Codebook, object: Codebook, motion: Codebook) -> Self {
        CodebookSet::PerComponent { scene, object, motion }
    }

    pub fn book(&self, component: Component) -> &Codebook {
        match self {
            CodebookSet::Shared(book) => book,
            CodebookSet::PerComponent { scene, object, motion } => match component {
                Component::Scene => scene,
                Component::Object => object,
                Component::Motion => motion,
            },
        }
    }

    pub fn book_mut(&mut self, component: Component) -> &mut Codebook {
        match self {
            CodebookSet::Shared(book) => book,
            CodebookSet::PerComponent { scene, object, motion } => match component {
                Component::Scene => scene,
                Component::Object => object,
                Component::Motion => motion,
            },
        }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self, CodebookSet::Shared(_))
    }
}
