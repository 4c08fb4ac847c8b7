//! Evaluation harness: view-estimation accuracy, cross-reconstruction
//! fidelity, identity preservation through a locally trained
//! classifier-embedder, latent-coverage and diversity proxies, and embedding
//! export for external t-SNE.
//!
//! Every metric is a pure function of (networks, corpus, fixed internal
//! seeds), so repeated evaluation reproduces identical numbers.

use crate::autodiff::Tape;
use crate::data::Corpus;
use crate::domain::{one_hot_matrix, sample_latent, Image, LATENT_DIM, VIEW_BINS};
use crate::networks::{bind_dense, dense_fwd, Dense, EncoderE, GeneratorG, NetGeometry, Trunk};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("no identity with two views to pair")]
    NoPairs,
    #[error("embedder reached only {best:.3} train accuracy within {epochs} epochs (need >= {need})")]
    EmbedderBudget { best: f64, epochs: usize, need: f64 },
    #[error("need at least {0} draws")]
    TooFewDraws(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Metric name -> value map with sample counts and provenance notes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    pub config_fingerprint: String,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn set(&mut self, name: &str, value: f64, count: usize) {
        self.metrics.insert(name.to_string(), value);
        self.counts.insert(name.to_string(), count);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn all_finite(&self) -> bool {
        self.metrics.values().all(|v| v.is_finite())
    }

    /// Text key/value serialization.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("config_fingerprint = {}\n", self.config_fingerprint));
        for (k, v) in &self.metrics {
            s.push_str(&format!("{k} = {v}\n"));
            s.push_str(&format!("{k}.count = {}\n", self.counts.get(k).copied().unwrap_or(0)));
        }
        for n in &self.notes {
            s.push_str(&format!("# {n}\n"));
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Batched network application
// ---------------------------------------------------------------------------

const EVAL_BATCH: usize = 32;

fn encode_corpus<F: Scalar>(e: &EncoderE<F>, corpus: &Corpus<F>) -> (Tensor<F>, Tensor<F>) {
    let n = corpus.len();
    let mut logits = Tensor::zeros(n, VIEW_BINS);
    let mut latents = Tensor::zeros(n, LATENT_DIM);
    let mut row = 0;
    for chunk in corpus.samples().chunks(EVAL_BATCH) {
        let stacked = crate::training::stack_images(chunk.iter().map(|s| s.image.tensor()));
        let (lg, zt) = e.encode_batch(&stacked, chunk.len());
        for i in 0..chunk.len() {
            logits.data_mut()[(row + i) * VIEW_BINS..(row + i + 1) * VIEW_BINS]
                .copy_from_slice(lg.row(i));
            latents.data_mut()[(row + i) * LATENT_DIM..(row + i + 1) * LATENT_DIM]
                .copy_from_slice(zt.row(i));
        }
        row += chunk.len();
    }
    (logits, latents)
}

fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// View accuracy and cross-reconstruction
// ---------------------------------------------------------------------------

/// Fraction of samples whose predicted view bin matches the label.
pub fn eval_view_accuracy<F: Scalar>(e: &EncoderE<F>, corpus: &Corpus<F>) -> Result<f64, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let (logits, _) = encode_corpus(e, corpus);
    let hits = corpus
        .samples()
        .iter()
        .enumerate()
        .filter(|(i, s)| argmax(logits.row(*i)) == s.view.bin())
        .count();
    Ok(hits as f64 / corpus.len() as f64)
}

/// Mean L1 between `G(v_j, E_z(x_i))` and `x_j` over one deterministic
/// partner draw per sample.
pub fn eval_cross_reconstruction<F: Scalar>(
    e: &EncoderE<F>,
    g: &GeneratorG<F>,
    corpus: &Corpus<F>,
) -> Result<f64, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let pairable = corpus
        .identities()
        .iter()
        .any(|&id| corpus.sample_indices_of(id).map_or(false, |v| v.len() >= 2));
    if !pairable {
        return Err(EvalError::NoPairs);
    }
    let (_, latents) = encode_corpus(e, corpus);
    let mut rng = RngStream::new(0xEC0);
    let mut total = F::zero();
    let mut count = 0usize;
    let mut idx = 0usize;
    while idx < corpus.len() {
        let hi = (idx + EVAL_BATCH).min(corpus.len());
        let mut z_rows = Vec::new();
        let mut bins = Vec::new();
        let mut targets = Vec::new();
        for i in idx..hi {
            let s = corpus.get(i);
            let partners: Vec<usize> = corpus
                .sample_indices_of(s.identity)
                .unwrap()
                .iter()
                .copied()
                .filter(|&k| corpus.get(k).view != s.view)
                .collect();
            if partners.is_empty() {
                continue;
            }
            let j = partners[rng.below(partners.len())];
            z_rows.extend_from_slice(latents.row(i));
            bins.push(corpus.get(j).view.bin());
            targets.push(j);
        }
        if !bins.is_empty() {
            let z = Tensor::from_vec(bins.len(), LATENT_DIM, z_rows);
            let v = one_hot_matrix::<F>(&bins);
            let recon = g.generate_batch(&v, &z);
            let hw = corpus.image_size() * corpus.image_size();
            for (bi, &j) in targets.iter().enumerate() {
                let target = corpus.get(j).image.tensor();
                let mut acc = F::zero();
                for r in 0..hw {
                    let rr = recon.row(bi * hw + r);
                    let tr = target.row(r);
                    for c in 0..3 {
                        acc += (rr[c] - tr[c]).abs();
                    }
                }
                total += acc / F::from_usize(hw * 3).unwrap();
                count += 1;
            }
        }
        idx = hi;
    }
    if count == 0 {
        return Err(EvalError::NoPairs);
    }
    Ok(total.into_f64() / count as f64)
}

// ---------------------------------------------------------------------------
// Identity embedder
// ---------------------------------------------------------------------------

pub const EMBED_DIM: usize = 64;

/// Small identity classifier whose unit-normalized penultimate activations
/// serve as the identity embedding (the FaceNet stand-in).
#[derive(Debug, Clone)]
pub struct IdentityEmbedder<F> {
    geom: NetGeometry,
    trunk: Trunk<F>,
    embed: Dense<F>,
    classify: Dense<F>,
    /// class index -> identity id of the training corpus.
    pub classes: Vec<usize>,
}

impl<F: Scalar> IdentityEmbedder<F> {
    /// Unit-normalized embeddings, one row per image.
    pub fn embed_batch(&self, xs: &Tensor<F>, batch: usize) -> Tensor<F> {
        let mut t = Tape::new();
        let tvars = self.trunk.bind(&mut t, false);
        let evars = bind_dense(&mut t, &self.embed, false);
        let x = t.constant(xs.clone());
        let feat = self.trunk.forward(&mut t, &tvars, x, batch, self.geom);
        let h = dense_fwd(&mut t, evars, feat);
        let mut out = t.value(h).clone();
        for r in 0..batch {
            let row = &mut out.data_mut()[r * EMBED_DIM..(r + 1) * EMBED_DIM];
            let mut norm = F::zero();
            for v in row.iter() {
                norm += *v * *v;
            }
            let norm = norm.sqrt() + F::of_f64(1e-12);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        out
    }

    pub fn embed_image(&self, img: &Image<F>) -> Vec<F> {
        self.embed_batch(img.tensor(), 1).data().to_vec()
    }

    fn logits_batch(&self, xs: &Tensor<F>, batch: usize) -> Tensor<F> {
        let mut t = Tape::new();
        let tvars = self.trunk.bind(&mut t, false);
        let evars = bind_dense(&mut t, &self.embed, false);
        let cvars = bind_dense(&mut t, &self.classify, false);
        let x = t.constant(xs.clone());
        let feat = self.trunk.forward(&mut t, &tvars, x, batch, self.geom);
        let h = dense_fwd(&mut t, evars, feat);
        let logits = dense_fwd(&mut t, cvars, h);
        t.value(logits).clone()
    }

    fn train_accuracy(&self, corpus: &Corpus<F>, class_of: &BTreeMap<usize, usize>) -> f64 {
        let mut hits = 0usize;
        for chunk in corpus.samples().chunks(EVAL_BATCH) {
            let stacked = crate::training::stack_images(chunk.iter().map(|s| s.image.tensor()));
            let logits = self.logits_batch(&stacked, chunk.len());
            for (i, s) in chunk.iter().enumerate() {
                if argmax(logits.row(i)) == class_of[&s.identity] {
                    hits += 1;
                }
            }
        }
        hits as f64 / corpus.len() as f64
    }
}

const EMBEDDER_ACC_TARGET: f64 = 0.95;
const EMBEDDER_MAX_EPOCHS: usize = 60;
const EMBEDDER_BATCH: usize = 16;

/// Train the embedder on corpus identities to at least 95% train accuracy.
pub fn train_identity_embedder<F: Scalar>(
    corpus: &Corpus<F>,
    seed: u64,
) -> Result<IdentityEmbedder<F>, EvalError> {
    if corpus.n_identities() < 2 {
        return Err(EvalError::EmptyCorpus);
    }
    let classes = corpus.identities();
    let class_of: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(c, &id)| (id, c)).collect();
    let geom = NetGeometry::new(corpus.image_size(), 16).expect("corpus size is a supported geometry");
    let flat_dim = geom.feature_dim();
    let mut rng = RngStream::new(seed).split(0xEB);
    let mut net = IdentityEmbedder {
        geom,
        trunk: Trunk::init(geom, &mut rng),
        embed: Dense::init(flat_dim, EMBED_DIM, 1.0, &mut rng),
        classify: Dense::init(EMBED_DIM, classes.len(), 1.0, &mut rng),
        classes: classes.clone(),
    };

    let adam_cfg = AdamConfig {
        learning_rate: F::of_f64(5e-4),
        beta1: F::of_f64(0.9),
        beta2: F::of_f64(0.999),
        epsilon: F::of_f64(1e-8),
    };
    let named: Vec<(String, &Tensor<F>)> = embedder_tensors(&net);
    let mut adam = AdamState::zeros_like(&named);
    drop(named);

    let order_rng = RngStream::new(seed).split(0xE0);
    let mut best = 0.0f64;
    for epoch in 0..EMBEDDER_MAX_EPOCHS {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut erng = order_rng.split(epoch as u64);
        erng.shuffle(&mut order);
        for chunk in order.chunks(EMBEDDER_BATCH) {
            let stacked =
                crate::training::stack_images(chunk.iter().map(|&i| corpus.get(i).image.tensor()));
            let targets: Vec<usize> = chunk.iter().map(|&i| class_of[&corpus.get(i).identity]).collect();

            let mut t = Tape::new();
            let tvars = net.trunk.bind(&mut t, true);
            let evars = bind_dense(&mut t, &net.embed, true);
            let cvars = bind_dense(&mut t, &net.classify, true);
            let x = t.constant(stacked);
            let feat = net.trunk.forward(&mut t, &tvars, x, chunk.len(), geom);
            let h = dense_fwd(&mut t, evars, feat);
            let logits = dense_fwd(&mut t, cvars, h);
            let loss = cross_entropy_on_tape(&mut t, logits, &targets);

            let mut vars = Vec::new();
            Trunk::<F>::push_vars(&tvars, &mut vars);
            vars.extend([evars.w, evars.b, cvars.w, cvars.b]);
            let grads = t.backward(loss, &vars);
            let gts: Vec<Option<Tensor<F>>> =
                vars.iter().map(|v| grads.get(*v).map(|g| t.value(g).clone())).collect();
            drop(t);
            adam_step(embedder_tensors_mut(&mut net), &gts, &mut adam, &adam_cfg)
                .expect("shapes fixed");
        }
        let acc = net.train_accuracy(corpus, &class_of);
        if std::env::var_os("CROSSVIEW_DEBUG_EMBEDDER").is_some() {
            eprintln!("embedder epoch {epoch}: train accuracy {acc:.4}");
        }
        best = best.max(acc);
        if acc >= EMBEDDER_ACC_TARGET {
            return Ok(net);
        }
    }
    Err(EvalError::EmbedderBudget {
        best,
        epochs: EMBEDDER_MAX_EPOCHS,
        need: EMBEDDER_ACC_TARGET,
    })
}

fn embedder_tensors<F: Scalar>(net: &IdentityEmbedder<F>) -> Vec<(String, &Tensor<F>)> {
    let mut out = Vec::new();
    net.trunk.push_tensors("emb", &mut out);
    out.push(("emb.embed.w".into(), &net.embed.w));
    out.push(("emb.embed.b".into(), &net.embed.b));
    out.push(("emb.classify.w".into(), &net.classify.w));
    out.push(("emb.classify.b".into(), &net.classify.b));
    out
}

fn embedder_tensors_mut<F: Scalar>(net: &mut IdentityEmbedder<F>) -> Vec<&mut Tensor<F>> {
    let mut out = Vec::new();
    net.trunk.push_tensors_mut(&mut out);
    out.push(&mut net.embed.w);
    out.push(&mut net.embed.b);
    out.push(&mut net.classify.w);
    out.push(&mut net.classify.b);
    out
}

/// Mean cross-entropy of `targets` under softmax of `logits` rows.
fn cross_entropy_on_tape<F: Scalar>(
    t: &mut Tape<F>,
    logits: crate::autodiff::Var,
    targets: &[usize],
) -> crate::autodiff::Var {
    let (b, c) = t.value(logits).shape();
    assert_eq!(b, targets.len());
    let mut mx = Tensor::zeros(b, 1);
    for i in 0..b {
        let row = t.value(logits).row(i);
        mx.set(i, 0, row.iter().cloned().fold(F::neg_infinity(), F::max));
    }
    let mxc = t.constant(mx);
    let mxb = t.broadcast_col(mxc, c);
    let shifted = t.sub(logits, mxb);
    let e = t.exp(shifted);
    let s = t.sum_cols(e);
    let lse = t.ln(s);
    let lse_b = t.broadcast_col(lse, c);
    let logsm = t.sub(shifted, lse_b);
    let mut hot = Tensor::zeros(b, c);
    for (i, &cls) in targets.iter().enumerate() {
        hot.set(i, cls, F::one());
    }
    let hotv = t.constant(hot);
    let picked = t.mul(logsm, hotv);
    let per = t.sum_cols(picked);
    let mean_lp = t.mean_all(per);
    t.neg(mean_lp)
}

// ---------------------------------------------------------------------------
// Identity similarity and latent coverage
// ---------------------------------------------------------------------------

fn sq_dist<F: Scalar>(a: &[F], b: &[F]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x.into_f64() - y.into_f64();
        acc += d * d;
    }
    acc
}

/// Mean squared embedding distance between each source image and all 9
/// views generated from its encoding. Anchored on the source input image.
pub fn eval_identity_similarity<F: Scalar>(
    e: &EncoderE<F>,
    g: &GeneratorG<F>,
    embedder: &IdentityEmbedder<F>,
    corpus: &Corpus<F>,
) -> Result<f64, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let (_, latents) = encode_corpus(e, corpus);
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, s) in corpus.samples().iter().enumerate() {
        let src_embed = embedder.embed_batch(s.image.tensor(), 1);
        // all 9 views from this source's latent
        let bins: Vec<usize> = (0..VIEW_BINS).collect();
        let v = one_hot_matrix::<F>(&bins);
        let mut z_rows = Vec::with_capacity(VIEW_BINS * LATENT_DIM);
        for _ in 0..VIEW_BINS {
            z_rows.extend_from_slice(latents.row(i));
        }
        let z = Tensor::from_vec(VIEW_BINS, LATENT_DIM, z_rows);
        let gen = g.generate_batch(&v, &z);
        let gen_embed = embedder.embed_batch(&gen, VIEW_BINS);
        for b in 0..VIEW_BINS {
            total += sq_dist(gen_embed.row(b), src_embed.row(0));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Latent-coverage proxy and generation diversity.
///
/// Coverage: mean squared embedding distance from each random-latent
/// generation to its nearest real-corpus image (lower = random draws land on
/// realistic outputs). Diversity: mean pairwise squared embedding distance
/// among the generations (near zero flags collapse).
pub fn eval_latent_coverage<F: Scalar>(
    g: &GeneratorG<F>,
    embedder: &IdentityEmbedder<F>,
    real: &Corpus<F>,
    n_draws: usize,
    rng: &mut RngStream,
) -> Result<(f64, f64), EvalError> {
    if n_draws < 1 {
        return Err(EvalError::TooFewDraws(1));
    }
    if real.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    // real-corpus embeddings
    let mut real_embeds: Vec<Vec<F>> = Vec::with_capacity(real.len());
    for chunk in real.samples().chunks(EVAL_BATCH) {
        let stacked = crate::training::stack_images(chunk.iter().map(|s| s.image.tensor()));
        let em = embedder.embed_batch(&stacked, chunk.len());
        for i in 0..chunk.len() {
            real_embeds.push(em.row(i).to_vec());
        }
    }
    // generated embeddings at random views
    let mut gen_embeds: Vec<Vec<F>> = Vec::with_capacity(n_draws);
    let mut done = 0;
    while done < n_draws {
        let b = EVAL_BATCH.min(n_draws - done);
        let bins: Vec<usize> = (0..b).map(|_| rng.below(VIEW_BINS)).collect();
        let mut z_rows = Vec::with_capacity(b * LATENT_DIM);
        for _ in 0..b {
            z_rows.extend(sample_latent::<F>(rng).code().iter().copied());
        }
        let z = Tensor::from_vec(b, LATENT_DIM, z_rows);
        let v = one_hot_matrix::<F>(&bins);
        let gen = g.generate_batch(&v, &z);
        let em = embedder.embed_batch(&gen, b);
        for i in 0..b {
            gen_embeds.push(em.row(i).to_vec());
        }
        done += b;
    }
    let coverage = gen_embeds
        .iter()
        .map(|ge| {
            real_embeds
                .iter()
                .map(|re| sq_dist(ge, re))
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / gen_embeds.len() as f64;
    let mut pair_total = 0.0;
    let mut pairs = 0usize;
    for i in 0..gen_embeds.len() {
        for j in (i + 1)..gen_embeds.len() {
            pair_total += sq_dist(&gen_embeds[i], &gen_embeds[j]);
            pairs += 1;
        }
    }
    let diversity = if pairs == 0 { 0.0 } else { pair_total / pairs as f64 };
    Ok((coverage, diversity))
}

// ---------------------------------------------------------------------------
// Embedding export
// ---------------------------------------------------------------------------

/// Which features to export.
pub enum FeatureSource<'a, F> {
    /// The encoder's latent code (the model's own embedding space).
    Encoder(&'a EncoderE<F>),
    /// The evaluation embedder's features.
    Embedder(&'a IdentityEmbedder<F>),
}

/// Write a tab-separated table `identity view f0 .. fk`; returns rows written.
pub fn export_embeddings<F: Scalar>(
    source: FeatureSource<'_, F>,
    corpus: &Corpus<F>,
    out_path: &Path,
) -> Result<usize, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let dim = match source {
        FeatureSource::Encoder(_) => LATENT_DIM,
        FeatureSource::Embedder(_) => EMBED_DIM,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(out_path)?);
    write!(out, "identity\tview")?;
    for i in 0..dim {
        write!(out, "\tf{i}")?;
    }
    writeln!(out)?;
    let mut rows = 0usize;
    for chunk in corpus.samples().chunks(EVAL_BATCH) {
        let stacked = crate::training::stack_images(chunk.iter().map(|s| s.image.tensor()));
        let feats = match source {
            FeatureSource::Encoder(e) => e.encode_batch(&stacked, chunk.len()).1,
            FeatureSource::Embedder(em) => em.embed_batch(&stacked, chunk.len()),
        };
        for (i, s) in chunk.iter().enumerate() {
            write!(out, "{}\t{}", s.identity, s.view.bin())?;
            for v in feats.row(i) {
                write!(out, "\t{v}")?;
            }
            writeln!(out)?;
            rows += 1;
        }
    }
    out.flush()?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Full report
// ---------------------------------------------------------------------------

pub const COVERAGE_DRAWS: usize = 256;

/// Assemble the standard metric set for one model on one corpus.
pub fn full_eval<F: Scalar>(
    e: &EncoderE<F>,
    g: &GeneratorG<F>,
    embedder: &IdentityEmbedder<F>,
    corpus: &Corpus<F>,
    fingerprint: &str,
) -> Result<EvalReport, EvalError> {
    let mut report = EvalReport {
        config_fingerprint: fingerprint.to_string(),
        ..EvalReport::default()
    };
    report.set("view_accuracy", eval_view_accuracy(e, corpus)?, corpus.len());
    report.set(
        "cross_recon_l1",
        eval_cross_reconstruction(e, g, corpus)?,
        corpus.len(),
    );
    report.set(
        "identity_similarity",
        eval_identity_similarity(e, g, embedder, corpus)?,
        corpus.len() * VIEW_BINS,
    );
    let mut rng = RngStream::new(0xC07E);
    let (coverage, diversity) = eval_latent_coverage(g, embedder, corpus, COVERAGE_DRAWS, &mut rng)?;
    report.set("latent_coverage", coverage, COVERAGE_DRAWS);
    report.set("diversity", diversity, COVERAGE_DRAWS * (COVERAGE_DRAWS - 1) / 2);
    report
        .notes
        .push("identity_similarity anchored on the source input image".to_string());
    Ok(report)
}
