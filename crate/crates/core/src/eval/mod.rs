//! Metrics, latent analysis, exports and checkpoints.

mod checkpoint;
mod export;
mod metrics;

pub use checkpoint::{
    config_hash, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use export::{
    export_csv, export_image_grid, image_grid, read_csv, to_byte, CsvLog, CsvRecord,
    EmbeddingRecord, LossRecord, MetricsRecord, Pixmap,
};
pub use metrics::{
    accuracy, confusion_matrix, domain_probe, miou, pca_project, per_class_accuracy, Projection,
};

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Domain};
use crate::error::{Error, Result};
use crate::losses::TermValues;
use crate::models::{ModelBundle, Role};
use crate::nn::Session;
use crate::tensor::Tensor;

/// Samples per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 256;
/// Samples per domain fed to the domain probe.
pub const PROBE_SAMPLES: usize = 1000;

fn chunks(ds: &Dataset) -> impl Iterator<Item = Vec<usize>> + '_ {
    (0..ds.len())
        .step_by(EVAL_CHUNK)
        .map(|s| (s..(s + EVAL_CHUNK).min(ds.len())).collect())
}

/// Runs `roles` in sequence over every sample in evaluation mode and
/// concatenates the outputs.
pub fn run_chain(
    bundle: &mut ModelBundle<f32>,
    roles: &[Role],
    ds: &Dataset,
) -> Result<Tensor<f32>> {
    let (nets, store) = bundle.parts();
    let mut data = Vec::new();
    let mut tail = Vec::new();
    for idx in chunks(ds) {
        let mut sess = Session::eval(store);
        let mut v = sess.input(ds.gather(&idx));
        for (i, &role) in roles.iter().enumerate() {
            v = if i == 0 {
                nets.encode(&mut sess, role, v)?
            } else {
                nets.run(&mut sess, role, v)?
            };
        }
        let out = sess.graph.value(v);
        tail = out.shape()[1..].to_vec();
        data.extend_from_slice(out.data());
    }
    let mut shape = vec![ds.len()];
    shape.extend(tail);
    Tensor::new(shape, data)
}

fn encoder_for(domain: Domain) -> Role {
    match domain {
        Domain::Source => Role::SourceEncoder,
        Domain::Target => Role::TargetEncoder,
    }
}

/// Class predictions through the dataset's own encoder and the classifier.
pub fn predict(bundle: &mut ModelBundle<f32>, ds: &Dataset) -> Result<Vec<usize>> {
    let logits = run_chain(bundle, &[encoder_for(ds.domain), Role::Classifier], ds)?;
    let k = logits.shape()[1];
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect())
}

/// Flattened latent codes of the dataset's own encoder, one row per sample.
pub fn latents(bundle: &mut ModelBundle<f32>, ds: &Dataset) -> Result<DMatrix<f64>> {
    let z = run_chain(bundle, &[encoder_for(ds.domain)], ds)?;
    let d = z.numel() / ds.len();
    Ok(DMatrix::from_row_iterator(
        ds.len(),
        d,
        z.data().iter().map(|&v| v as f64),
    ))
}

/// Image-to-image composites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Translation {
    /// Source images rendered in the target domain.
    X2y,
    /// Target images rendered in the source domain.
    Y2x,
    /// Source images reconstructed through the source autoencoder.
    Identity,
    /// Source images translated to the target domain and back.
    Cycle,
}

impl Translation {
    pub const ALL: [Translation; 4] = [
        Translation::X2y,
        Translation::Y2x,
        Translation::Identity,
        Translation::Cycle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Translation::X2y => "x2y",
            Translation::Y2x => "y2x",
            Translation::Identity => "identity",
            Translation::Cycle => "cycle",
        }
    }

    pub fn roles(self) -> &'static [Role] {
        match self {
            Translation::X2y => &[Role::SourceEncoder, Role::TargetDecoder],
            Translation::Y2x => &[Role::TargetEncoder, Role::SourceDecoder],
            Translation::Identity => &[Role::SourceEncoder, Role::SourceDecoder],
            Translation::Cycle => &[
                Role::SourceEncoder,
                Role::TargetDecoder,
                Role::TargetEncoder,
                Role::SourceDecoder,
            ],
        }
    }
}

impl FromStr for Translation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "direction",
                    format!("unknown direction `{s}` (x2y, y2x, identity, cycle)"),
                )
            })
    }
}

/// Applies a composite to every image of `ds`. Encoders re-check shapes, so a
/// second encode inside a chain sees decoder output of input shape.
pub fn translate(
    bundle: &mut ModelBundle<f32>,
    ds: &Dataset,
    t: Translation,
) -> Result<Tensor<f32>> {
    let roles = t.roles();
    let (nets, store) = bundle.parts();
    let mut data = Vec::new();
    for idx in chunks(ds) {
        let mut sess = Session::eval(store);
        let mut v = sess.input(ds.gather(&idx));
        for &role in roles {
            v = match role {
                Role::SourceEncoder | Role::TargetEncoder => nets.encode(&mut sess, role, v)?,
                _ => nets.run(&mut sess, role, v)?,
            };
        }
        data.extend_from_slice(sess.graph.value(v).data());
    }
    let mut shape = vec![ds.len()];
    shape.extend(ds.sample_shape());
    Tensor::new(shape, data)
}

/// Evaluation of one labelled split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub step: u64,
    pub split: String,
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<usize>>,
    /// Held-out domain-probe accuracy on latent codes, when both domains were given.
    pub probe: Option<f64>,
    pub losses: Option<TermValues>,
}

impl EvalReport {
    pub fn record(&self) -> MetricsRecord {
        MetricsRecord {
            step: self.step,
            split: self.split.clone(),
            accuracy: self.accuracy,
            probe: self.probe,
        }
    }
}

/// Classification metrics on `ds` (which must carry labels) and, if `other` is
/// given, the domain probe between the source and target latents.
pub fn evaluate(
    bundle: &mut ModelBundle<f32>,
    ds: &Dataset,
    other: Option<&Dataset>,
    step: u64,
    seed: u64,
) -> Result<EvalReport> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::Data("evaluation needs a labelled dataset".into()))?;
    let preds = predict(bundle, ds)?;
    let confusion = confusion_matrix(&preds, labels, ds.num_classes)?;
    let probe = match other {
        Some(o) => {
            let (s, t) = match ds.domain {
                Domain::Source => (ds, o),
                Domain::Target => (o, ds),
            };
            let zs = latents(bundle, &s.head(PROBE_SAMPLES))?;
            let zt = latents(bundle, &t.head(PROBE_SAMPLES))?;
            Some(domain_probe(&zs, &zt, seed)?)
        }
        None => None,
    };
    Ok(EvalReport {
        step,
        split: match ds.domain {
            Domain::Source => "source".into(),
            Domain::Target => "target".into(),
        },
        accuracy: accuracy(&preds, labels)?,
        per_class: per_class_accuracy(&confusion),
        confusion,
        probe,
        losses: None,
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16}{}", "split", self.split)?;
        writeln!(f, "{:<16}{}", "step", self.step)?;
        writeln!(f, "{:<16}{:.4}", "accuracy", self.accuracy)?;
        match self.probe {
            Some(p) => writeln!(f, "{:<16}{p:.4}", "domain probe")?,
            None => writeln!(f, "{:<16}-", "domain probe")?,
        }
        writeln!(f)?;
        write!(f, "{:>6} {:>8} {:>7} |", "class", "count", "acc")?;
        for c in 0..self.confusion.len() {
            write!(f, " {c:>5}")?;
        }
        writeln!(f)?;
        for (c, row) in self.confusion.iter().enumerate() {
            let n: usize = row.iter().sum();
            let acc = self.per_class[c].map_or("-".to_string(), |a| format!("{a:.3}"));
            write!(f, "{c:>6} {n:>8} {acc:>7} |")?;
            for v in row {
                write!(f, " {v:>5}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Two-dimensional PCA of both domains' latents, ready for CSV export.
pub fn embed_latents(
    bundle: &mut ModelBundle<f32>,
    source: &Dataset,
    target: &Dataset,
) -> Result<Vec<EmbeddingRecord>> {
    let zs = latents(bundle, source)?;
    let zt = latents(bundle, target)?;
    let mut all = DMatrix::zeros(zs.nrows() + zt.nrows(), zs.ncols());
    all.rows_mut(0, zs.nrows()).copy_from(&zs);
    all.rows_mut(zs.nrows(), zt.nrows()).copy_from(&zt);
    let p = pca_project(&all, 2)?;
    let mut rows = Vec::with_capacity(all.nrows());
    for (ds, offset) in [(source, 0), (target, zs.nrows())] {
        for i in 0..ds.len() {
            rows.push(EmbeddingRecord {
                domain: ds.domain,
                label: ds.labels().map(|l| l[i]),
                pc1: p.points[(offset + i, 0)],
                pc2: p.points[(offset + i, 1)],
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_domain_pair, SyntheticSpec};
    use crate::models::{ArchSpec, CriticNorm, SharingPlan};

    fn setup() -> (ModelBundle<f32>, Dataset, Dataset) {
        let mut spec = SyntheticSpec::shapes(4, 40, 40, 3);
        spec.noise = 0.0;
        let (s, t) = synth_domain_pair(&spec).unwrap();
        let b = ModelBundle::build(
            ArchSpec::compact(4, CriticNorm::None),
            SharingPlan::default(),
            2,
        )
        .unwrap();
        (b, s, t)
    }

    #[test]
    fn evaluation_is_repeatable() {
        let (mut b, s, t) = setup();
        let r1 = evaluate(&mut b, &t, Some(&s), 0, 1).unwrap();
        let r2 = evaluate(&mut b, &t, Some(&s), 0, 1).unwrap();
        assert_eq!(r1, r2);
        assert!((0.0..=1.0).contains(&r1.accuracy));
        let rows: Vec<usize> = r1.confusion.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(rows, vec![10; 4]);
        assert!(r1.to_string().contains("domain probe"));
    }

    #[test]
    fn cycle_composes_the_two_translations() {
        let (mut b, s, _) = setup();
        let s = s.head(5);
        let x2y = translate(&mut b, &s, Translation::X2y).unwrap();
        let fake = Dataset::new(
            s.sample_shape().to_vec(),
            x2y.data().to_vec(),
            None,
            4,
            Domain::Target,
            crate::data::Range::Signed,
        )
        .unwrap();
        let back = translate(&mut b, &fake, Translation::Y2x).unwrap();
        let cycle = translate(&mut b, &s, Translation::Cycle).unwrap();
        assert_eq!(back, cycle);
        assert_eq!(cycle.shape(), &[5, 1, 32, 32]);
        assert!("sideways".parse::<Translation>().is_err());
    }

    #[test]
    fn embeddings_cover_both_domains() {
        let (mut b, s, t) = setup();
        let rows = embed_latents(&mut b, &s, &t).unwrap();
        assert_eq!(rows.len(), 80);
        assert_eq!(
            rows.iter().filter(|r| r.domain == Domain::Target).count(),
            40
        );
        let mean: f64 = rows.iter().map(|r| r.pc1).sum::<f64>() / 80.0;
        assert!(mean.abs() < 1e-9);
    }
}
