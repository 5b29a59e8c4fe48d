//! Loss terms over the bundle's pathways, adversarial objective variants,
//! gradient routing, and the preset coefficient matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::models::Networks;
use crate::models::Role;
use crate::nn::{Network, Session};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageGan {
    Vanilla,
    LeastSquares,
    WassersteinGp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGan {
    Vanilla,
    LeastSquares,
}

/// Mixing coefficients of the weighted objective plus the adversarial variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LambdaConfig {
    pub classification: f64,
    pub latent_adversarial: f64,
    pub translation_adversarial: f64,
    /// Reconstruction of source images only.
    pub source_identity: f64,
    /// Reconstruction of target images only.
    pub target_identity: f64,
    pub cycle: f64,
    pub translated_classification: f64,
    pub image_gan: ImageGan,
    pub feature_gan: FeatureGan,
    pub gp_coefficient: f64,
}

impl Default for LambdaConfig {
    fn default() -> Self {
        Self::zero()
    }
}

impl LambdaConfig {
    pub fn zero() -> Self {
        Self {
            classification: 0.0,
            latent_adversarial: 0.0,
            translation_adversarial: 0.0,
            source_identity: 0.0,
            target_identity: 0.0,
            cycle: 0.0,
            translated_classification: 0.0,
            image_gan: ImageGan::WassersteinGp,
            feature_gan: FeatureGan::LeastSquares,
            gp_coefficient: 10.0,
        }
    }

    /// The digit-experiment coefficients.
    pub fn digits() -> Self {
        Self {
            classification: 1.0,
            latent_adversarial: 0.2,
            translation_adversarial: 0.02,
            source_identity: 0.1,
            target_identity: 0.1,
            cycle: 0.05,
            translated_classification: 0.0,
            ..Self::zero()
        }
    }

    /// Classification on labeled source data only.
    pub fn source_only() -> Self {
        Self {
            classification: 1.0,
            ..Self::zero()
        }
    }

    /// `(column name, coefficient)` in objective order.
    pub fn terms(&self) -> [(&'static str, f64); 7] {
        [
            ("q_c", self.classification),
            ("q_z", self.latent_adversarial),
            ("q_tr", self.translation_adversarial),
            ("q_idA", self.source_identity),
            ("q_idB", self.target_identity),
            ("q_cyc", self.cycle),
            ("q_trc", self.translated_classification),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let names = [
            "classification",
            "latent_adversarial",
            "translation_adversarial",
            "source_identity",
            "target_identity",
            "cycle",
            "translated_classification",
        ];
        for (name, (_, v)) in names.iter().zip(self.terms()) {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(
                    format!("loss.lambdas.{name}"),
                    format!("must be a finite value >= 0, got {v}"),
                ));
            }
        }
        if !(self.gp_coefficient >= 0.0 && self.gp_coefficient.is_finite()) {
            return Err(Error::config(
                "loss.lambdas.gp_coefficient",
                "must be a finite value >= 0",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorSide {
    /// The encoders learn only from target features.
    TargetOnly,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingRules {
    pub latent_generator_side: GeneratorSide,
    /// Blocks the translated-classification gradient before the second encoding.
    pub stop_before_second_encode: bool,
}

impl Default for RoutingRules {
    fn default() -> Self {
        Self {
            latent_generator_side: GeneratorSide::TargetOnly,
            stop_before_second_encode: true,
        }
    }
}

/// Translation direction: which fakes are produced and who judges them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Source images decoded as target, judged by the target critic.
    SourceToTarget,
    /// Target images decoded as source, judged by the source critic.
    TargetToSource,
}

impl Direction {
    pub fn critic(self) -> Role {
        match self {
            Direction::SourceToTarget => Role::TargetCritic,
            Direction::TargetToSource => Role::SourceCritic,
        }
    }
}

/// Unweighted term values of one step; elided terms stay 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub q_c: f64,
    pub q_z: f64,
    pub q_tr: f64,
    pub q_id_a: f64,
    pub q_id_b: f64,
    pub q_cyc: f64,
    pub q_trc: f64,
    pub total: f64,
    pub d_x: f64,
    pub d_y: f64,
    pub d_z: f64,
}

/// Critic-side objectives; `None` when the term is switched off.
#[derive(Debug, Clone, Copy, Default)]
pub struct CriticLosses {
    pub source_critic: Option<Var>,
    pub target_critic: Option<Var>,
    pub latent_disc: Option<Var>,
}

#[derive(Debug, Default, Clone, Copy)]
struct Memo {
    z_x: Option<Var>,
    z_y: Option<Var>,
    fake_y: Option<Var>,
    fake_x: Option<Var>,
}

/// Loss construction over one source/target batch pair.
///
/// Shared sub-expressions (latents, translations) are computed once and reused
/// by every term that needs them; nothing is computed for terms never requested.
pub struct LossGraph<'c, 'a, T: Float> {
    pub nets: &'c Networks,
    pub sess: &'c mut Session<'a, T>,
    pub x: Var,
    pub y: Var,
    labels: Option<&'c [usize]>,
    pub rules: RoutingRules,
    memo: Memo,
}

fn ones_like<T: Float>(sess: &mut Session<'_, T>, v: Var) -> Var {
    let shape = sess.graph.value(v).shape().to_vec();
    sess.input(Tensor::ones(shape))
}

fn zeros_like<T: Float>(sess: &mut Session<'_, T>, v: Var) -> Var {
    let shape = sess.graph.value(v).shape().to_vec();
    sess.input(Tensor::zeros(shape))
}

/// `mean((score - label)^2)` for a constant label.
fn ls_term<T: Float>(sess: &mut Session<'_, T>, score: Var, label: f64) -> Result<Var> {
    let target = if label == 0.0 {
        zeros_like(sess, score)
    } else {
        ones_like(sess, score)
    };
    sess.graph.mse_loss(score, target)
}

/// Binary cross-entropy of a raw score, built as softmax over `[0, score]`.
fn bce_term<T: Float>(sess: &mut Session<'_, T>, score: Var, label: usize) -> Result<Var> {
    let zero = zeros_like(sess, score);
    let logits = sess.graph.concat(&[zero, score], 1)?;
    let n = sess.graph.value(score).shape()[0];
    sess.graph.softmax_cross_entropy(logits, &vec![label; n])
}

fn scalar<T: Float>(sess: &Session<'_, T>, v: Var) -> f64 {
    sess.graph.value(v).item().as_f64()
}

/// Mean over samples of `(|grad_x critic(x_hat)| - 1)^2` at per-sample random
/// interpolates `x_hat = eps * real + (1 - eps) * fake`.
pub fn gradient_penalty<T: Float>(
    sess: &mut Session<'_, T>,
    critic: &Network,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    seed: u64,
) -> Result<Var> {
    if real.shape() != fake.shape() {
        return Err(Error::shape(
            "gradient_penalty",
            format!("{:?} vs {:?}", real.shape(), fake.shape()),
        ));
    }
    let b = real.shape()[0];
    let row = real.numel() / b;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Vec<T> = (0..b).map(|_| T::of(rng.random::<f64>())).collect();
    let mut data = Vec::with_capacity(real.numel());
    for (i, e) in eps.iter().enumerate() {
        let r = &real.data()[i * row..(i + 1) * row];
        let f = &fake.data()[i * row..(i + 1) * row];
        data.extend(r.iter().zip(f).map(|(&r, &f)| *e * r + (T::one() - *e) * f));
    }
    let xhat = sess
        .graph
        .variable(Tensor::new(real.shape().to_vec(), data)?);
    let score = critic.forward(sess, xhat)?;
    let grad = sess.graph.input_gradient(score, xhat)?;
    let norm = sess.graph.norm2(grad)?;
    let one = ones_like(sess, norm);
    sess.graph.mse_loss(norm, one)
}

impl<'c, 'a, T: Float> LossGraph<'c, 'a, T> {
    pub fn new(
        nets: &'c Networks,
        sess: &'c mut Session<'a, T>,
        source: Tensor<T>,
        labels: Option<&'c [usize]>,
        target: Tensor<T>,
        rules: RoutingRules,
    ) -> Self {
        let x = sess.input(source);
        let y = sess.input(target);
        Self {
            nets,
            sess,
            x,
            y,
            labels,
            rules,
            memo: Memo::default(),
        }
    }

    fn labels(&self) -> Result<&'c [usize]> {
        self.labels.ok_or_else(|| {
            Error::Data("source labels are required for classification terms".into())
        })
    }

    pub fn z_x(&mut self) -> Result<Var> {
        if let Some(v) = self.memo.z_x {
            return Ok(v);
        }
        let v = self.nets.encode(self.sess, Role::SourceEncoder, self.x)?;
        self.memo.z_x = Some(v);
        Ok(v)
    }

    pub fn z_y(&mut self) -> Result<Var> {
        if let Some(v) = self.memo.z_y {
            return Ok(v);
        }
        let v = self.nets.encode(self.sess, Role::TargetEncoder, self.y)?;
        self.memo.z_y = Some(v);
        Ok(v)
    }

    /// Source images translated into the target domain.
    pub fn fake_y(&mut self) -> Result<Var> {
        if let Some(v) = self.memo.fake_y {
            return Ok(v);
        }
        let z = self.z_x()?;
        let v = self.nets.run(self.sess, Role::TargetDecoder, z)?;
        self.memo.fake_y = Some(v);
        Ok(v)
    }

    /// Target images translated into the source domain.
    pub fn fake_x(&mut self) -> Result<Var> {
        if let Some(v) = self.memo.fake_x {
            return Ok(v);
        }
        let z = self.z_y()?;
        let v = self.nets.run(self.sess, Role::SourceDecoder, z)?;
        self.memo.fake_x = Some(v);
        Ok(v)
    }

    /// Cross-entropy of the classifier on source latents.
    pub fn q_classification(&mut self) -> Result<Var> {
        let labels = self.labels()?;
        let z = self.z_x()?;
        let logits = self.nets.run(self.sess, Role::Classifier, z)?;
        self.sess.graph.softmax_cross_entropy(logits, labels)
    }

    /// L1 reconstruction of source images through the source decoder.
    pub fn q_identity_source(&mut self) -> Result<Var> {
        let z = self.z_x()?;
        let recon = self.nets.run(self.sess, Role::SourceDecoder, z)?;
        self.sess.graph.l1_loss(recon, self.x)
    }

    /// L1 reconstruction of target images through the target decoder.
    pub fn q_identity_target(&mut self) -> Result<Var> {
        let z = self.z_y()?;
        let recon = self.nets.run(self.sess, Role::TargetDecoder, z)?;
        self.sess.graph.l1_loss(recon, self.y)
    }

    /// Weighted reconstruction; a zero weight skips its half entirely.
    pub fn q_identity(&mut self, source_weight: f64, target_weight: f64) -> Result<Var> {
        let mut acc = None;
        for (w, target) in [(source_weight, false), (target_weight, true)] {
            if w == 0.0 {
                continue;
            }
            let term = if target {
                self.q_identity_target()?
            } else {
                self.q_identity_source()?
            };
            let term = self.sess.graph.scale(term, w)?;
            acc = Some(match acc {
                Some(a) => self.sess.graph.add(a, term)?,
                None => term,
            });
        }
        Ok(acc.unwrap_or_else(|| self.sess.input(Tensor::scalar(T::zero()))))
    }

    /// Latent discriminator objective with source labeled 1 and target 0;
    /// latents are detached.
    pub fn latent_disc_loss(&mut self, gan: FeatureGan) -> Result<Var> {
        let zx = self.z_x()?;
        let zy = self.z_y()?;
        let zx = self.sess.graph.stop_gradient(zx);
        let zy = self.sess.graph.stop_gradient(zy);
        let sx = self.nets.run(self.sess, Role::LatentDiscriminator, zx)?;
        let sy = self.nets.run(self.sess, Role::LatentDiscriminator, zy)?;
        let (a, b) = match gan {
            FeatureGan::LeastSquares => {
                (ls_term(self.sess, sx, 1.0)?, ls_term(self.sess, sy, 0.0)?)
            }
            FeatureGan::Vanilla => (bce_term(self.sess, sx, 1)?, bce_term(self.sess, sy, 0)?),
        };
        let s = self.sess.graph.add(a, b)?;
        self.sess.graph.scale(s, 0.5)
    }

    /// Encoder-side latent objective: fool the discriminator with flipped labels.
    pub fn q_feature_adversarial(&mut self, gan: FeatureGan) -> Result<Var> {
        let zy = self.z_y()?;
        let sy = self.nets.run(self.sess, Role::LatentDiscriminator, zy)?;
        let target_term = match gan {
            FeatureGan::LeastSquares => ls_term(self.sess, sy, 1.0)?,
            FeatureGan::Vanilla => bce_term(self.sess, sy, 1)?,
        };
        match self.rules.latent_generator_side {
            GeneratorSide::TargetOnly => Ok(target_term),
            GeneratorSide::Both => {
                let zx = self.z_x()?;
                let sx = self.nets.run(self.sess, Role::LatentDiscriminator, zx)?;
                let source_term = match gan {
                    FeatureGan::LeastSquares => ls_term(self.sess, sx, 0.0)?,
                    FeatureGan::Vanilla => bce_term(self.sess, sx, 0)?,
                };
                let s = self.sess.graph.add(source_term, target_term)?;
                self.sess.graph.scale(s, 0.5)
            }
        }
    }

    fn direction_parts(&mut self, dir: Direction) -> Result<(Var, Var)> {
        Ok(match dir {
            Direction::SourceToTarget => (self.fake_y()?, self.y),
            Direction::TargetToSource => (self.fake_x()?, self.x),
        })
    }

    /// Image critic objective for one direction; fakes are detached.
    pub fn critic_loss(&mut self, dir: Direction, cfg: &LambdaConfig, seed: u64) -> Result<Var> {
        let (fake, real) = self.direction_parts(dir)?;
        let fake = self.sess.graph.stop_gradient(fake);
        let critic = self.nets.net(dir.critic());
        let df = critic.forward(self.sess, fake)?;
        let dr = critic.forward(self.sess, real)?;
        match cfg.image_gan {
            ImageGan::WassersteinGp => {
                let mf = self.sess.graph.mean(df)?;
                let mr = self.sess.graph.mean(dr)?;
                let w = self.sess.graph.sub(mf, mr)?;
                if cfg.gp_coefficient == 0.0 {
                    return Ok(w);
                }
                let real_t = self.sess.graph.value(real).clone();
                let fake_t = self.sess.graph.value(fake).clone();
                let gp = gradient_penalty(self.sess, critic, &real_t, &fake_t, seed)?;
                let gp = self.sess.graph.scale(gp, cfg.gp_coefficient)?;
                self.sess.graph.add(w, gp)
            }
            ImageGan::LeastSquares => {
                let a = ls_term(self.sess, dr, 1.0)?;
                let b = ls_term(self.sess, df, 0.0)?;
                let s = self.sess.graph.add(a, b)?;
                self.sess.graph.scale(s, 0.5)
            }
            ImageGan::Vanilla => {
                let a = bce_term(self.sess, dr, 1)?;
                let b = bce_term(self.sess, df, 0)?;
                let s = self.sess.graph.add(a, b)?;
                self.sess.graph.scale(s, 0.5)
            }
        }
    }

    /// Generator-side translation objective, summed over both directions.
    pub fn q_translation_adversarial(&mut self, gan: ImageGan) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for dir in [Direction::SourceToTarget, Direction::TargetToSource] {
            let (fake, _) = self.direction_parts(dir)?;
            let score = self.nets.run(self.sess, dir.critic(), fake)?;
            let term = match gan {
                ImageGan::WassersteinGp => {
                    let m = self.sess.graph.mean(score)?;
                    self.sess.graph.scale(m, -1.0)?
                }
                ImageGan::LeastSquares => ls_term(self.sess, score, 1.0)?,
                ImageGan::Vanilla => bce_term(self.sess, score, 1)?,
            };
            acc = Some(match acc {
                Some(a) => self.sess.graph.add(a, term)?,
                None => term,
            });
        }
        Ok(acc.expect("two directions"))
    }

    /// L1 between each image and its translate-and-return reconstruction.
    pub fn q_cycle(&mut self) -> Result<Var> {
        let fy = self.fake_y()?;
        let z = self.nets.encode(self.sess, Role::TargetEncoder, fy)?;
        let back_x = self.nets.run(self.sess, Role::SourceDecoder, z)?;
        let a = self.sess.graph.l1_loss(back_x, self.x)?;
        let fx = self.fake_x()?;
        let z = self.nets.encode(self.sess, Role::SourceEncoder, fx)?;
        let back_y = self.nets.run(self.sess, Role::TargetDecoder, z)?;
        let b = self.sess.graph.l1_loss(back_y, self.y)?;
        self.sess.graph.add(a, b)
    }

    /// Source labels applied to source-to-target translations, classified
    /// through the target encoder.
    pub fn q_translated_classification(&mut self) -> Result<Var> {
        let labels = self.labels()?;
        let mut fy = self.fake_y()?;
        if self.rules.stop_before_second_encode {
            fy = self.sess.graph.stop_gradient(fy);
        }
        let z = self.nets.encode(self.sess, Role::TargetEncoder, fy)?;
        let logits = self.nets.run(self.sess, Role::Classifier, z)?;
        self.sess.graph.softmax_cross_entropy(logits, labels)
    }

    /// Weighted generator objective. Terms with a zero coefficient are never built.
    pub fn total(&mut self, cfg: &LambdaConfig) -> Result<(Var, TermValues)> {
        let mut values = TermValues::default();
        let mut acc: Option<Var> = None;
        for (name, weight) in cfg.terms() {
            if weight == 0.0 {
                continue;
            }
            let term = match name {
                "q_c" => self.q_classification()?,
                "q_z" => self.q_feature_adversarial(cfg.feature_gan)?,
                "q_tr" => self.q_translation_adversarial(cfg.image_gan)?,
                "q_idA" => self.q_identity_source()?,
                "q_idB" => self.q_identity_target()?,
                "q_cyc" => self.q_cycle()?,
                "q_trc" => self.q_translated_classification()?,
                _ => unreachable!("fixed term list"),
            };
            let v = scalar(self.sess, term);
            match name {
                "q_c" => values.q_c = v,
                "q_z" => values.q_z = v,
                "q_tr" => values.q_tr = v,
                "q_idA" => values.q_id_a = v,
                "q_idB" => values.q_id_b = v,
                "q_cyc" => values.q_cyc = v,
                _ => values.q_trc = v,
            }
            let weighted = self.sess.graph.scale(term, weight)?;
            acc = Some(match acc {
                Some(a) => self.sess.graph.add(a, weighted)?,
                None => weighted,
            });
        }
        let total = match acc {
            Some(v) => v,
            None => self.sess.input(Tensor::scalar(T::zero())),
        };
        values.total = scalar(self.sess, total);
        Ok((total, values))
    }

    /// Critic-side objectives for every adversarial term that is switched on.
    pub fn critics(&mut self, cfg: &LambdaConfig, seed: u64) -> Result<CriticLosses> {
        let mut out = CriticLosses::default();
        if cfg.latent_adversarial > 0.0 {
            out.latent_disc = Some(self.latent_disc_loss(cfg.feature_gan)?);
        }
        if cfg.translation_adversarial > 0.0 {
            out.target_critic = Some(self.critic_loss(Direction::SourceToTarget, cfg, seed)?);
            out.source_critic = Some(self.critic_loss(
                Direction::TargetToSource,
                cfg,
                seed ^ 0x9e37_79b9_7f4a_7c15,
            )?);
        }
        Ok(out)
    }
}

impl CriticLosses {
    pub fn values<T: Float>(&self, sess: &Session<'_, T>) -> (f64, f64, f64) {
        let get = |v: Option<Var>| v.map_or(0.0, |v| scalar(sess, v));
        (
            get(self.source_critic),
            get(self.target_critic),
            get(self.latent_disc),
        )
    }

    pub fn sum<T: Float>(&self, sess: &mut Session<'_, T>) -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for v in [self.source_critic, self.target_critic, self.latent_disc]
            .into_iter()
            .flatten()
        {
            acc = Some(match acc {
                Some(a) => sess.graph.add(a, v)?,
                None => v,
            });
        }
        Ok(acc)
    }
}

/// Structural change applied before a stage starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageAction {
    UntieEncoders,
    Freeze(Vec<Role>),
    Unfreeze(Vec<Role>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub lambdas: LambdaConfig,
    /// Share of the total step budget.
    pub fraction: f64,
    pub actions: Vec<StageAction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
}

impl StagePlan {
    pub fn single(lambdas: LambdaConfig) -> Self {
        Self {
            stages: vec![Stage {
                name: "main".into(),
                lambdas,
                fraction: 1.0,
                actions: Vec::new(),
            }],
        }
    }

    /// Step count of each stage; sums to `total`.
    pub fn step_split(&self, total: usize) -> Vec<usize> {
        let sum: f64 = self.stages.iter().map(|s| s.fraction).sum();
        let mut cum = 0.0;
        let mut prev = 0usize;
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                cum += s.fraction;
                let end = if i + 1 == self.stages.len() {
                    total
                } else {
                    ((total as f64) * cum / sum).floor() as usize
                };
                let n = end - prev;
                prev = end;
                n
            })
            .collect()
    }

    /// Checks the plan against the initial encoder tying.
    pub fn validate(&self, encoders_tied: bool) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("loss.preset", "empty stage plan"));
        }
        let mut tied = encoders_tied;
        for (i, stage) in self.stages.iter().enumerate() {
            stage.lambdas.validate()?;
            if !(stage.fraction > 0.0 && stage.fraction.is_finite()) {
                return Err(Error::config(
                    format!("stages[{i}].fraction"),
                    "must be positive",
                ));
            }
            for action in &stage.actions {
                if *action == StageAction::UntieEncoders {
                    if !tied {
                        return Err(Error::config(
                            format!("stages[{i}].actions"),
                            "untie requested while the encoders are not tied",
                        ));
                    }
                    tied = false;
                }
            }
        }
        Ok(())
    }
}

pub const PRESET_NAMES: [&str; 5] = ["fcns_wild", "adda", "drcn", "cyclegan", "i2i_full"];

/// Coefficient settings reproducing prior methods as special cases.
pub fn preset(name: &str) -> Result<StagePlan> {
    let base = LambdaConfig::digits();
    let plan = match name {
        "fcns_wild" => StagePlan::single(LambdaConfig {
            translation_adversarial: 0.0,
            source_identity: 0.0,
            target_identity: 0.0,
            cycle: 0.0,
            ..base
        }),
        "adda" => StagePlan {
            stages: vec![
                Stage {
                    name: "source".into(),
                    lambdas: LambdaConfig::source_only(),
                    fraction: 0.5,
                    actions: Vec::new(),
                },
                Stage {
                    name: "adapt".into(),
                    lambdas: LambdaConfig {
                        latent_adversarial: base.latent_adversarial,
                        ..LambdaConfig::zero()
                    },
                    fraction: 0.5,
                    actions: vec![
                        StageAction::UntieEncoders,
                        StageAction::Freeze(vec![Role::SourceEncoder, Role::Classifier]),
                    ],
                },
            ],
        },
        "drcn" => StagePlan::single(LambdaConfig {
            latent_adversarial: 0.0,
            translation_adversarial: 0.0,
            source_identity: 0.0,
            cycle: 0.0,
            ..base
        }),
        "cyclegan" => StagePlan::single(LambdaConfig {
            classification: 0.0,
            latent_adversarial: 0.0,
            source_identity: 0.0,
            target_identity: 0.0,
            ..base
        }),
        "i2i_full" => StagePlan::single(LambdaConfig {
            translated_classification: 0.1,
            ..base
        }),
        "source_only" => StagePlan::single(LambdaConfig::source_only()),
        _ => {
            return Err(Error::config(
                "loss.preset",
                format!(
                    "unknown preset `{name}` (expected one of {})",
                    PRESET_NAMES.join(", ")
                ),
            ))
        }
    };
    Ok(plan)
}

/// Which coefficients each preset switches on (in any stage), in objective order.
pub fn preset_matrix() -> Result<Vec<(&'static str, [bool; 7])>> {
    PRESET_NAMES
        .iter()
        .map(|&name| {
            let mut on = [false; 7];
            for stage in preset(name)?.stages {
                for (slot, (_, v)) in on.iter_mut().zip(stage.lambdas.terms()) {
                    *slot |= v > 0.0;
                }
            }
            Ok((name, on))
        })
        .collect()
}

/// The preset matrix as an aligned text table; `x` marks an active coefficient.
pub fn preset_table() -> Result<String> {
    let cols = ["c", "z", "tr", "idA", "idB", "cyc", "trc"];
    let mut out = format!("{:<10}", "preset");
    for c in cols {
        out += &format!(" {c:>4}");
    }
    out.push('\n');
    for (name, on) in preset_matrix()? {
        out += &format!("{name:<10}");
        for active in on {
            out += &format!(" {:>4}", if active { "x" } else { "." });
        }
        out.push('\n');
    }
    Ok(out)
}
