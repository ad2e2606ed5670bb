//! Text/motion co-embedding evaluator and the generation metrics computed in
//! its space.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rand::seq::{index::sample as sample_indices, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::motion::{fit_rows, FeatureStats, MotionError, MotionSequence};
use crate::nn::{Adam, Linear, ParamStore, Tape, Var};
use crate::retrieval::{RetrievalError, TextEmbedder};
use crate::sampler::{Generator, GuidanceConfig, SamplerError};

pub const FID_RIDGE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("need at least {needed} distinct texts, got {got}")]
    TooFewTexts { needed: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid metric config: {0}")]
    Config(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatorConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    /// Clip length motions are fitted to before pooling.
    pub frames: usize,
    /// Temporal pooling windows.
    pub segments: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden: 128,
            frames: 120,
            segments: 6,
            epochs: 60,
            batch_size: 32,
            learning_rate: 1e-3,
            temperature: 0.1,
            seed: 0,
        }
    }
}

/// Two small encoders trained so that matched text and motion land close.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluator {
    pub config: EvaluatorConfig,
    pub stats: FeatureStats,
    pub embedder_fingerprint: String,
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

struct Encoders {
    m1: Linear,
    m2: Linear,
    t1: Linear,
    t2: Linear,
}

impl Encoders {
    fn new(
        store: &mut ParamStore,
        cfg: &EvaluatorConfig,
        motion_in: usize,
        text_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            m1: Linear::new(store, "motion.1", motion_in, cfg.hidden, rng),
            m2: Linear::new(store, "motion.2", cfg.hidden, cfg.embed_dim, rng),
            t1: Linear::new(store, "text.1", text_in, cfg.hidden, rng),
            t2: Linear::new(store, "text.2", cfg.hidden, cfg.embed_dim, rng),
        }
    }

    /// Linear layers are registered in a fixed order, so ids are positional.
    fn from_layout() -> Self {
        use crate::nn::ParamId;
        let lin = |i: usize| Linear {
            w: ParamId(2 * i),
            b: ParamId(2 * i + 1),
        };
        Self {
            m1: lin(0),
            m2: lin(1),
            t1: lin(2),
            t2: lin(3),
        }
    }

    fn motion(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.m1.forward(tape, store, x);
        let h = tape.gelu(h);
        let h = self.m2.forward(tape, store, h);
        tape.l2_normalize_rows(h)
    }

    fn text(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.t1.forward(tape, store, x);
        let h = tape.gelu(h);
        let h = self.t2.forward(tape, store, h);
        tape.l2_normalize_rows(h)
    }
}

/// Per-window mean and mean absolute velocity of normalized features.
pub fn motion_features(frames: &Array2<f64>, stats: &FeatureStats, cfg: &EvaluatorConfig) -> Result<Vec<f64>> {
    let x = stats.normalize_frames(&fit_rows(frames, cfg.frames))?;
    let d = x.ncols();
    let mut out = Vec::with_capacity(2 * cfg.segments * d);
    for s in 0..cfg.segments {
        let lo = s * cfg.frames / cfg.segments;
        let hi = ((s + 1) * cfg.frames / cfg.segments).max(lo + 1);
        let window = x.slice(ndarray::s![lo..hi, ..]);
        out.extend(window.mean_axis(Axis(0)).expect("non-empty window").iter());
        let mut vel = Array1::<f64>::zeros(d);
        for i in lo..hi.min(x.nrows() - 1) {
            vel += &(&x.row(i + 1) - &x.row(i)).mapv(f64::abs);
        }
        out.extend(vel.iter().map(|v| v / (hi - lo) as f64));
    }
    Ok(out)
}

fn rows(vs: &[Vec<f64>]) -> Array2<f64> {
    let cols = vs.first().map_or(0, |v| v.len());
    Array2::from_shape_vec((vs.len(), cols), vs.concat()).expect("equal rows")
}

impl Evaluator {
    /// Contrastive training on `(text, motion)` pairs with in-batch negatives.
    pub fn train(
        pairs: &[(String, MotionSequence)],
        stats: &FeatureStats,
        embedder: &dyn TextEmbedder,
        cfg: &EvaluatorConfig,
    ) -> Result<Self> {
        if cfg.embed_dim == 0 || cfg.hidden == 0 || cfg.segments == 0 || cfg.frames < cfg.segments || cfg.batch_size < 2
        {
            return Err(MetricsError::Config(
                "evaluator dimensions must be positive, batch ≥ 2".into(),
            ));
        }
        let distinct: std::collections::HashSet<&str> = pairs.iter().map(|(t, _)| t.as_str()).collect();
        if distinct.len() < 2 {
            return Err(MetricsError::TooFewTexts {
                needed: 2,
                got: distinct.len(),
            });
        }
        let motion_x = rows(
            &pairs
                .iter()
                .map(|(_, m)| motion_features(&m.frames, stats, cfg))
                .collect::<Result<Vec<_>>>()?,
        );
        let text_x = rows(
            &pairs
                .iter()
                .map(|(t, _)| embedder.embed(t))
                .collect::<std::result::Result<Vec<_>, _>>()?,
        );

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::default();
        let enc = Encoders::new(&mut store, cfg, motion_x.ncols(), text_x.ncols(), &mut rng);
        let mut adam = Adam::new(&store, cfg.learning_rate);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2) {
                let mut tape = Tape::new();
                let mx = tape.constant(motion_x.select(Axis(0), batch));
                let tx = tape.constant(text_x.select(Axis(0), batch));
                let m = enc.motion(&mut tape, &store, mx);
                let t = enc.text(&mut tape, &store, tx);
                let labels = same_text_labels(batch, pairs);
                let mt = tape.matmul_nt(m, t);
                let mt = tape.scale(mt, 1.0 / cfg.temperature);
                let tm = tape.matmul_nt(t, m);
                let tm = tape.scale(tm, 1.0 / cfg.temperature);
                let l1 = tape.cross_entropy(mt, &labels);
                let l2 = tape.cross_entropy(tm, &labels);
                let loss = tape.add(l1, l2);
                let grads = tape.backward(loss, store.len());
                adam.step(&mut store, &grads);
            }
        }
        Ok(Self {
            config: *cfg,
            stats: stats.clone(),
            embedder_fingerprint: embedder.fingerprint(),
            names: store.names,
            values: store.values,
        })
    }

    fn store(&self) -> ParamStore {
        ParamStore {
            names: self.names.clone(),
            values: self.values.clone(),
        }
    }

    pub fn embed_motions<'a>(&self, motions: impl IntoIterator<Item = &'a MotionSequence>) -> Result<Array2<f64>> {
        let feats = motions
            .into_iter()
            .map(|m| motion_features(&m.frames, &self.stats, &self.config))
            .collect::<Result<Vec<_>>>()?;
        if feats.is_empty() {
            return Ok(Array2::zeros((0, self.config.embed_dim)));
        }
        let store = self.store();
        let mut tape = Tape::new();
        let x = tape.constant(rows(&feats));
        let out = Encoders::from_layout().motion(&mut tape, &store, x);
        Ok(tape.value(out).clone())
    }

    pub fn embed_texts(&self, texts: &[&str], embedder: &dyn TextEmbedder) -> Result<Array2<f64>> {
        if embedder.fingerprint() != self.embedder_fingerprint {
            return Err(RetrievalError::FingerprintMismatch {
                index: self.embedder_fingerprint.clone(),
                embedder: embedder.fingerprint(),
            }
            .into());
        }
        if texts.is_empty() {
            return Ok(Array2::zeros((0, self.config.embed_dim)));
        }
        let e = texts
            .iter()
            .map(|t| embedder.embed(t))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let store = self.store();
        let mut tape = Tape::new();
        let x = tape.constant(rows(&e));
        let out = Encoders::from_layout().text(&mut tape, &store, x);
        Ok(tape.value(out).clone())
    }
}

/// Target column per row: the first batch position holding the same text,
/// so duplicate texts are not treated as negatives of each other.
fn same_text_labels(batch: &[usize], pairs: &[(String, MotionSequence)]) -> Vec<usize> {
    let mut first: HashMap<&str, usize> = HashMap::new();
    batch
        .iter()
        .enumerate()
        .map(|(pos, &i)| *first.entry(pairs[i].0.as_str()).or_insert(pos))
        .collect()
}

fn distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn mean_and_cov(x: &Array2<f64>) -> (Array1<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = x - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let d = cov.nrows();
    let mut m = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    for i in 0..d {
        m[(i, i)] += FID_RIDGE;
    }
    (mean, m)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two embedding sets.
pub fn fid(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(MetricsError::Shape(format!("{} vs {} columns", a.ncols(), b.ncols())));
    }
    let needed = a.ncols() + 1;
    for x in [a, b] {
        if x.nrows() < needed {
            return Err(MetricsError::TooFewSamples { needed, got: x.nrows() });
        }
    }
    let (mu1, s1) = mean_and_cov(a);
    let (mu2, s2) = mean_and_cov(b);
    let diff = (&mu1 - &mu2).mapv(|v| v * v).sum();
    // Tr((Σ1Σ2)^½) = Tr((Σ1^½ Σ2 Σ1^½)^½), the inner product being symmetric.
    let r1 = sym_sqrt(&s1);
    let inner = &r1 * &s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    Ok((diff + s1.trace() + s2.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Fraction of rows whose own text ranks in the top 3 among itself and
/// `pool_size − 1` distractors with a different text id.
pub fn r_precision_top3(
    motion: &Array2<f64>,
    text: &Array2<f64>,
    text_ids: &[usize],
    pool_size: usize,
    rng: &mut impl rand::Rng,
) -> Result<f64> {
    if pool_size < 4 {
        return Err(MetricsError::Config("pool_size must be at least 4".into()));
    }
    let n = motion.nrows();
    if text.nrows() != n || text_ids.len() != n {
        return Err(MetricsError::Shape("motion, text and ids must align".into()));
    }
    let distinct: std::collections::HashSet<usize> = text_ids.iter().copied().collect();
    if distinct.len() < pool_size {
        return Err(MetricsError::TooFewTexts {
            needed: pool_size,
            got: distinct.len(),
        });
    }
    let mut hits = 0usize;
    for i in 0..n {
        let candidates: Vec<usize> = (0..n).filter(|&j| text_ids[j] != text_ids[i]).collect();
        let mut chosen = Vec::with_capacity(pool_size - 1);
        let mut seen = std::collections::HashSet::new();
        let mut shuffled = candidates.clone();
        shuffled.shuffle(rng);
        for j in shuffled {
            if seen.insert(text_ids[j]) {
                chosen.push(j);
                if chosen.len() == pool_size - 1 {
                    break;
                }
            }
        }
        let own = distance(motion.row(i), text.row(i));
        let closer = chosen
            .iter()
            .filter(|&&j| distance(motion.row(i), text.row(j)) < own)
            .count();
        if closer < 3 {
            hits += 1;
        }
    }
    Ok(hits as f64 / n.max(1) as f64)
}

/// Mean distance between matched motion and text embeddings.
pub fn mm_dist(motion: &Array2<f64>, text: &Array2<f64>) -> Result<f64> {
    if motion.dim() != text.dim() || motion.nrows() == 0 {
        return Err(MetricsError::Shape(format!("{:?} vs {:?}", motion.dim(), text.dim())));
    }
    Ok((0..motion.nrows())
        .map(|i| distance(motion.row(i), text.row(i)))
        .sum::<f64>()
        / motion.nrows() as f64)
}

/// Mean distance over `pairs` random disjoint pairs of rows.
pub fn diversity(x: &Array2<f64>, pairs: usize, rng: &mut impl rand::Rng) -> Result<f64> {
    if pairs == 0 || x.nrows() < 2 * pairs {
        return Err(MetricsError::TooFewSamples {
            needed: 2 * pairs.max(1),
            got: x.nrows(),
        });
    }
    let idx = sample_indices(rng, x.nrows(), 2 * pairs).into_vec();
    Ok((0..pairs)
        .map(|k| distance(x.row(idx[2 * k]), x.row(idx[2 * k + 1])))
        .sum::<f64>()
        / pairs as f64)
}

/// Mean pairwise distance within each group, averaged over groups.
pub fn multimodality(groups: &[Array2<f64>]) -> Result<f64> {
    if groups.is_empty() {
        return Err(MetricsError::TooFewSamples { needed: 1, got: 0 });
    }
    let mut total = 0.0;
    for g in groups {
        let n = g.nrows();
        if n < 2 {
            return Err(MetricsError::TooFewSamples { needed: 2, got: n });
        }
        let mut sum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                sum += distance(g.row(i), g.row(j));
            }
        }
        total += sum / (n * (n - 1) / 2) as f64;
    }
    Ok(total / groups.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// 95% normal-approximation half-width.
    pub half_width: f64,
    pub runs: usize,
}

impl Stat {
    pub fn from_values(v: &[f64]) -> Self {
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n.max(1) as f64;
        let half_width = if n < 2 {
            0.0
        } else {
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        };
        Self {
            mean,
            half_width,
            runs: n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub r_precision_top3: Stat,
    pub fid: Stat,
    pub mm_dist: Stat,
    pub diversity: Stat,
    /// `|diversity_gen − diversity_real|`.
    pub diversity_gap: Stat,
    pub multimodality: Option<Stat>,
}

impl MetricReport {
    pub fn to_text(&self) -> String {
        let line =
            |name: &str, s: &Stat| format!("{name:<18} {:>10.4} ± {:.4}  (runs {})\n", s.mean, s.half_width, s.runs);
        let mut out = String::new();
        out += &line("r_precision_top3", &self.r_precision_top3);
        out += &line("fid", &self.fid);
        out += &line("mm_dist", &self.mm_dist);
        out += &line("diversity", &self.diversity);
        out += &line("diversity_gap", &self.diversity_gap);
        if let Some(m) = &self.multimodality {
            out += &line("multimodality", m);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub runs: usize,
    pub multimodality_runs: usize,
    pub pool_size: usize,
    pub diversity_pairs: usize,
    /// Texts and generations per text for multimodality.
    pub multimodality_texts: usize,
    pub multimodality_reps: usize,
    pub frames: usize,
    pub root_seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            runs: 20,
            multimodality_runs: 5,
            pool_size: 8,
            diversity_pairs: 16,
            multimodality_texts: 8,
            multimodality_reps: 10,
            frames: 120,
            root_seed: 0,
        }
    }
}

/// Seed for run `run` of stream `stream`, all derived from one root.
pub fn derive_seed(root: u64, stream: u64, run: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream);
    rng.set_word_pos(2 * run as u128);
    rand::RngCore::next_u64(&mut rng)
}

/// A held-out text with its ground-truth motion.
#[derive(Debug, Clone)]
pub struct TestCase {
    pub text: String,
    pub motion: MotionSequence,
}

fn text_ids(cases: &[TestCase]) -> Vec<usize> {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    cases
        .iter()
        .map(|c| {
            let next = ids.len();
            *ids.entry(c.text.as_str()).or_insert(next)
        })
        .collect()
}

struct Scored {
    r: f64,
    fid: f64,
    mm: f64,
    div: f64,
}

fn score_set(
    gen: &Array2<f64>,
    real: &Array2<f64>,
    text: &Array2<f64>,
    ids: &[usize],
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<(Scored, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scored = Scored {
        r: r_precision_top3(gen, text, ids, cfg.pool_size, &mut rng)?,
        fid: fid(gen, real)?,
        mm: mm_dist(gen, text)?,
        div: diversity(gen, cfg.diversity_pairs, &mut rng)?,
    };
    let real_div = diversity(real, cfg.diversity_pairs, &mut rng)?;
    Ok((scored, real_div))
}

fn report(scores: &[(Scored, f64)], mm: Option<Vec<f64>>) -> MetricReport {
    let col = |f: &dyn Fn(&(Scored, f64)) -> f64| Stat::from_values(&scores.iter().map(f).collect::<Vec<_>>());
    MetricReport {
        r_precision_top3: col(&|s| s.0.r),
        fid: col(&|s| s.0.fid),
        mm_dist: col(&|s| s.0.mm),
        diversity: col(&|s| s.0.div),
        diversity_gap: col(&|s| (s.0.div - s.1).abs()),
        multimodality: mm.map(|v| Stat::from_values(&v)),
    }
}

/// Ground truth scored against itself: the "real" anchor row.
pub fn evaluate_real(
    evaluator: &Evaluator,
    embedder: &dyn TextEmbedder,
    cases: &[TestCase],
    cfg: &ProtocolConfig,
) -> Result<MetricReport> {
    let real = evaluator.embed_motions(cases.iter().map(|c| &c.motion))?;
    let texts: Vec<&str> = cases.iter().map(|c| c.text.as_str()).collect();
    let text = evaluator.embed_texts(&texts, embedder)?;
    let ids = text_ids(cases);
    let scores = (0..cfg.runs.max(1))
        .map(|r| score_set(&real, &real, &text, &ids, cfg, derive_seed(cfg.root_seed, 1, r)))
        .collect::<Result<Vec<_>>>()?;
    Ok(report(&scores, None))
}

/// Generates for every test text per run and scores against ground truth.
pub fn run_protocol(
    evaluator: &Evaluator,
    generator: &Generator,
    cases: &[TestCase],
    guidance: &GuidanceConfig,
    cfg: &ProtocolConfig,
) -> Result<MetricReport> {
    if cfg.runs == 0 {
        return Err(MetricsError::Config("runs must be positive".into()));
    }
    let real = evaluator.embed_motions(cases.iter().map(|c| &c.motion))?;
    let texts: Vec<&str> = cases.iter().map(|c| c.text.as_str()).collect();
    let text = evaluator.embed_texts(&texts, generator.embedder)?;
    let ids = text_ids(cases);
    let conditions = texts
        .iter()
        .map(|t| generator.conditions_for(Some(t)))
        .collect::<std::result::Result<Vec<_>, _>>()?;

    let mut scores = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let mut motions = Vec::with_capacity(cases.len());
        for (i, cond) in conditions.iter().enumerate() {
            let g = GuidanceConfig {
                seed: derive_seed(cfg.root_seed, 2, run * cases.len() + i),
                ..*guidance
            };
            let x = generator.sample_normalized(cond, cfg.frames, &g, None)?;
            motions.push(MotionSequence::new(
                generator.stats.denormalize_frames(&x)?,
                generator.fps,
                x.ncols() / 3,
            )?);
        }
        let gen = evaluator.embed_motions(&motions)?;
        scores.push(score_set(
            &gen,
            &real,
            &text,
            &ids,
            cfg,
            derive_seed(cfg.root_seed, 3, run),
        )?);
    }

    let mm = if cfg.multimodality_runs > 0 && cfg.multimodality_texts > 0 {
        let mut unique: Vec<usize> = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            if !unique.iter().any(|&u| ids[u] == *id) {
                unique.push(i);
            }
        }
        let mut values = Vec::with_capacity(cfg.multimodality_runs);
        for run in 0..cfg.multimodality_runs {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.root_seed, 4, run));
            let pick = sample_indices(&mut rng, unique.len(), cfg.multimodality_texts.min(unique.len())).into_vec();
            let mut groups = Vec::with_capacity(pick.len());
            for (k, &p) in pick.iter().enumerate() {
                let case = unique[p];
                let mut reps = Vec::with_capacity(cfg.multimodality_reps);
                for rep in 0..cfg.multimodality_reps {
                    let g = GuidanceConfig {
                        seed: derive_seed(
                            cfg.root_seed,
                            5,
                            (run * cfg.multimodality_texts + k) * cfg.multimodality_reps + rep,
                        ),
                        ..*guidance
                    };
                    let x = generator.sample_normalized(&conditions[case], cfg.frames, &g, None)?;
                    reps.push(MotionSequence::new(
                        generator.stats.denormalize_frames(&x)?,
                        generator.fps,
                        x.ncols() / 3,
                    )?);
                }
                groups.push(evaluator.embed_motions(&reps)?);
            }
            values.push(multimodality(&groups)?);
        }
        Some(values)
    } else {
        None
    };
    Ok(report(&scores, mm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::Skeleton;
    use crate::retrieval::HashTfEmbedder;
    use crate::synth::{build_dataset, Split};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, d: usize, mean: &[f64], scale: f64, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |(_, j)| mean[j] + scale * rng.sample::<f64, _>(StandardNormal))
    }

    /// Sample whose mean and covariance are exactly the requested ones.
    fn whitened(n: usize, d: usize, mean: &[f64], var: f64, seed: u64) -> Array2<f64> {
        let x = gaussian(n, d, &vec![0.0; d], 1.0, seed);
        let (mu, cov) = mean_and_cov(&x);
        let centered = &x - &mu;
        let mut c = cov.clone();
        for i in 0..d {
            c[(i, i)] -= FID_RIDGE;
        }
        let inv_sqrt = sym_sqrt(&c).try_inverse().unwrap();
        let m = DMatrix::from_fn(n, d, |i, j| centered[[i, j]]);
        let w = m * inv_sqrt * var.sqrt();
        Array2::from_shape_fn((n, d), |(i, j)| w[(i, j)] + mean[j])
    }

    #[test]
    fn fid_closed_forms() {
        let a = gaussian(200, 3, &[0.0; 3], 1.0, 1);
        assert!(fid(&a, &a).unwrap() <= 1e-6);
        let b = gaussian(150, 3, &[0.5, 0.0, 1.0], 2.0, 2);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-9);

        // Equal covariances, means offset by 1.7: variance terms cancel.
        let p = whitened(100, 1, &[0.0], 1.0, 3);
        let q = whitened(100, 1, &[1.7], 1.0, 4);
        assert!((fid(&p, &q).unwrap() - 1.7 * 1.7).abs() < 1e-6);

        // μ₁=0, Σ₁=I against μ₂=(1,0), Σ₂=2I in 2-D: 1 + 2(1+2−2√2).
        let p = whitened(80, 2, &[0.0, 0.0], 1.0, 5);
        let q = whitened(80, 2, &[1.0, 0.0], 2.0, 6);
        let r = FID_RIDGE;
        let expected = 1.0 + 2.0 * ((1.0 + r) + (2.0 + r) - 2.0 * ((1.0 + r) * (2.0 + r)).sqrt());
        assert!((fid(&p, &q).unwrap() - expected).abs() < 1e-6);

        assert!(matches!(
            fid(&gaussian(3, 3, &[0.0; 3], 1.0, 0), &a),
            Err(MetricsError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn r_precision_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = gaussian(40, 4, &[0.0; 4], 1.0, 7);
        let ids: Vec<usize> = (0..40).collect();
        assert_eq!(r_precision_top3(&m, &m, &ids, 8, &mut rng).unwrap(), 1.0);

        let runs: Vec<f64> = (0..20)
            .map(|r| {
                let t = gaussian(40, 4, &[0.0; 4], 1.0, 100 + r);
                r_precision_top3(&m, &t, &ids, 8, &mut rng).unwrap()
            })
            .collect();
        let s = Stat::from_values(&runs);
        // 800 Bernoulli(3/8) trials: sd ≈ 0.017.
        assert!((s.mean - 0.375).abs() < 0.07, "{s:?}");
        assert!(r_precision_top3(&m, &m, &ids, 3, &mut rng).is_err());
        assert!(r_precision_top3(&m, &m, &vec![0; 40], 8, &mut rng).is_err());
    }

    #[test]
    fn r_precision_hand_ranked() {
        // 1-D: motion i sits at 10·i, far from every text, so a text is
        // closer to motion i > 0 exactly when its value is larger.
        let motion = Array2::from_shape_vec((5, 1), vec![0.0, 10.0, 20.0, 30.0, 40.0]).unwrap();
        let text = Array2::from_shape_vec((5, 1), vec![0.5, 0.1, 0.2, 0.3, 0.9]).unwrap();
        let ids = [0, 1, 2, 3, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Pool 5 covers every text. Closer-distractor counts:
        // row 0 → 3 (0.1, 0.2, 0.3), row 1 → 4, row 2 → 3, row 3 → 2, row 4 → 0.
        assert!((r_precision_top3(&motion, &text, &ids, 5, &mut rng).unwrap() - 0.4).abs() < 1e-12);
        let text2 = Array2::from_shape_vec((5, 1), vec![0.25, 0.1, 0.2, 0.3, 0.9]).unwrap();
        // row 0 → 2, row 1 → 4, row 2 → 3, row 3 → 1, row 4 → 0.
        assert!((r_precision_top3(&motion, &text2, &ids, 5, &mut rng).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn distance_metrics() {
        let dup = Array2::from_shape_fn((10, 3), |(_, j)| j as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(diversity(&dup, 5, &mut rng).unwrap(), 0.0);
        assert_eq!(multimodality(&[dup.clone(), dup.clone()]).unwrap(), 0.0);
        assert_eq!(mm_dist(&dup, &dup).unwrap(), 0.0);

        let x = gaussian(5, 3, &[0.0; 3], 1.0, 8);
        let brute: f64 = {
            let mut s = 0.0;
            for i in 0..5 {
                for j in i + 1..5 {
                    s += (0..3).map(|k| (x[[i, k]] - x[[j, k]]).powi(2)).sum::<f64>().sqrt();
                }
            }
            s / 10.0
        };
        assert!((multimodality(&[x.clone()]).unwrap() - brute).abs() < 1e-9);
        // Two disjoint pairs out of 4 rows, checked against the same draw.
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = r1.clone();
        let idx = sample_indices(&mut r2, 5, 4).into_vec();
        let expected = ((0..3)
            .map(|k| (x[[idx[0], k]] - x[[idx[1], k]]).powi(2))
            .sum::<f64>()
            .sqrt()
            + (0..3)
                .map(|k| (x[[idx[2], k]] - x[[idx[3], k]]).powi(2))
                .sum::<f64>()
                .sqrt())
            / 2.0;
        assert!((diversity(&x, 2, &mut r1).unwrap() - expected).abs() < 1e-9);
        assert!(diversity(&x, 3, &mut r1).is_err());
    }

    #[test]
    fn stats_half_width_shrinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let small: Vec<f64> = (0..20).map(|_| rng.sample(StandardNormal)).collect();
        let big: Vec<f64> = (0..80).map(|_| rng.sample(StandardNormal)).collect();
        let ratio = Stat::from_values(&small).half_width / Stat::from_values(&big).half_width;
        assert!((1.4..2.8).contains(&ratio), "{ratio}");
        assert_eq!(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
        assert_ne!(derive_seed(1, 2, 3), derive_seed(1, 2, 4));
    }

    fn small_pairs(
        count: usize,
    ) -> (
        Vec<(String, MotionSequence)>,
        Vec<(String, MotionSequence)>,
        FeatureStats,
    ) {
        let ds = build_dataset(count, 21, &Skeleton::stick_figure()).unwrap();
        let pick = |split| {
            ds.split(split)
                .map(|(_, s)| (s.text.clone(), s.motion.clone()))
                .collect::<Vec<_>>()
        };
        (pick(Split::Train), pick(Split::Val), ds.stats.clone())
    }

    #[test]
    fn evaluator_separates_pairs_and_is_deterministic() {
        let (train, val, stats) = small_pairs(200);
        let emb = HashTfEmbedder::default();
        let cfg = EvaluatorConfig {
            epochs: 25,
            ..Default::default()
        };
        let ev = Evaluator::train(&train, &stats, &emb, &cfg).unwrap();
        assert_eq!(ev, Evaluator::train(&train, &stats, &emb, &cfg).unwrap());

        let m = ev.embed_motions(val.iter().map(|p| &p.1)).unwrap();
        let texts: Vec<&str> = val.iter().map(|p| p.0.as_str()).collect();
        let t = ev.embed_texts(&texts, &emb).unwrap();
        let sims = m.dot(&t.t());
        let n = sims.nrows();
        let matched = (0..n).map(|i| sims[[i, i]]).sum::<f64>() / n as f64;
        let mismatched = (sims.sum() - (0..n).map(|i| sims[[i, i]]).sum::<f64>()) / (n * n - n) as f64;
        assert!(matched > mismatched + 0.1, "{matched} vs {mismatched}");
        assert!(ev.embed_texts(&texts, &HashTfEmbedder { dim: 8 }).is_err());
    }

    #[test]
    fn evaluator_rejects_single_text() {
        let (train, _, stats) = small_pairs(20);
        let same: Vec<_> = train
            .iter()
            .map(|(_, m)| ("walk forward".to_string(), m.clone()))
            .collect();
        assert!(matches!(
            Evaluator::train(&same, &stats, &HashTfEmbedder::default(), &EvaluatorConfig::default()),
            Err(MetricsError::TooFewTexts { got: 1, .. })
        ));
    }
}
