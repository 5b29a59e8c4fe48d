//! The network bundle: two encoders into a shared latent space, two decoders
//! out of it, a classifier head, two image critics and a latent discriminator.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{
    Activation, LayerSpec, Network, NormKind, ParamKind, ParamStore, Session, TieGroupId,
};
use crate::tensor::{Float, ParamId, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    SourceEncoder,
    TargetEncoder,
    SourceDecoder,
    TargetDecoder,
    Classifier,
    SourceCritic,
    TargetCritic,
    LatentDiscriminator,
}

impl Role {
    pub const ALL: [Role; 8] = [
        Role::SourceEncoder,
        Role::TargetEncoder,
        Role::SourceDecoder,
        Role::TargetDecoder,
        Role::Classifier,
        Role::SourceCritic,
        Role::TargetCritic,
        Role::LatentDiscriminator,
    ];
    pub const GENERATORS: [Role; 5] = [
        Role::SourceEncoder,
        Role::TargetEncoder,
        Role::SourceDecoder,
        Role::TargetDecoder,
        Role::Classifier,
    ];
    pub const CRITICS: [Role; 3] = [
        Role::SourceCritic,
        Role::TargetCritic,
        Role::LatentDiscriminator,
    ];

    /// Slot prefix of the role's parameters.
    pub fn prefix(self) -> &'static str {
        match self {
            Role::SourceEncoder => "enc_src",
            Role::TargetEncoder => "enc_tgt",
            Role::SourceDecoder => "dec_src",
            Role::TargetDecoder => "dec_tgt",
            Role::Classifier => "classifier",
            Role::SourceCritic => "critic_src",
            Role::TargetCritic => "critic_tgt",
            Role::LatentDiscriminator => "latent_disc",
        }
    }

    pub fn is_critic(self) -> bool {
        Self::CRITICS.contains(&self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CriticNorm {
    #[default]
    None,
    Instance,
}

/// Layer listings for every role plus the shapes they connect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    /// Per-sample input shape, e.g. `[1, 32, 32]`.
    pub input_shape: Vec<usize>,
    pub latent_shape: Vec<usize>,
    pub num_classes: usize,
    pub encoder: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
    pub classifier: Vec<LayerSpec>,
    pub critic: Vec<LayerSpec>,
    pub latent_disc: Vec<LayerSpec>,
}

fn conv_stack(
    widths: &[usize],
    input: usize,
    norm: NormKind,
    act: Activation,
    last_act: Activation,
) -> Vec<LayerSpec> {
    let mut c = input;
    let n = widths.len();
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let last = i + 1 == n;
            let spec = LayerSpec::conv(c, w, 4, 2, 1)
                .with_norm(norm)
                .with_activation(if last { last_act } else { act });
            c = w;
            spec
        })
        .collect()
}

fn dense_stack(
    widths: &[usize],
    input: usize,
    act: Activation,
    last_act: Activation,
) -> Vec<LayerSpec> {
    let mut c = input;
    let n = widths.len();
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let spec =
                LayerSpec::linear(c, w).with_activation(if i + 1 == n { last_act } else { act });
            c = w;
            spec
        })
        .collect()
}

impl ArchSpec {
    /// Four 4×4 stride-2 layers each way on 32×32 single-channel images.
    pub fn conv(
        name: &str,
        num_classes: usize,
        encoder: [usize; 4],
        decoder: [usize; 3],
        critic: [usize; 3],
        latent_hidden: [usize; 2],
        critic_norm: CriticNorm,
    ) -> Self {
        let leaky = Activation::LeakyRelu { slope: LEAKY_SLOPE };
        let enc = conv_stack(
            &encoder,
            1,
            NormKind::Batch,
            Activation::Relu,
            Activation::Relu,
        );
        let latent = encoder[3];
        let mut dec = Vec::new();
        let mut c = latent;
        for w in decoder {
            dec.push(
                LayerSpec::conv_transpose(c, w, 4, 2, 1)
                    .with_norm(NormKind::Batch)
                    .with_activation(Activation::Relu),
            );
            c = w;
        }
        dec.push(LayerSpec::conv_transpose(c, 1, 4, 2, 1).with_activation(Activation::Tanh));
        let cnorm = match critic_norm {
            CriticNorm::None => NormKind::None,
            CriticNorm::Instance => NormKind::Instance,
        };
        let mut crit = conv_stack(
            &[critic[0], critic[1], critic[2], 1],
            1,
            cnorm,
            leaky,
            Activation::Identity,
        );
        crit.last_mut().expect("four layers").norm = NormKind::None;
        crit.push(LayerSpec::global_avg_pool());
        let flat = latent * 4;
        let mut disc = vec![LayerSpec::flatten()];
        disc.extend(dense_stack(
            &[latent_hidden[0], latent_hidden[1], 1],
            flat,
            leaky,
            Activation::Identity,
        ));
        Self {
            name: name.to_string(),
            input_shape: vec![1, 32, 32],
            latent_shape: vec![latent, 2, 2],
            num_classes,
            encoder: enc,
            decoder: dec,
            classifier: vec![LayerSpec::flatten(), LayerSpec::linear(flat, num_classes)],
            critic: crit,
            latent_disc: disc,
        }
    }

    /// Widths of the modified LeNet digit networks.
    pub fn digits(num_classes: usize, critic_norm: CriticNorm) -> Self {
        Self::conv(
            "digits",
            num_classes,
            [64, 64, 128, 128],
            [512, 256, 128],
            [64, 128, 256],
            [500, 500],
            critic_norm,
        )
    }

    /// Same topology at a fraction of the width, for single-machine experiments.
    pub fn compact(num_classes: usize, critic_norm: CriticNorm) -> Self {
        Self::conv(
            "compact",
            num_classes,
            [16, 16, 32, 32],
            [32, 16, 8],
            [16, 32, 32],
            [64, 64],
            critic_norm,
        )
    }

    /// Fully connected networks for vector data in `[-1, 1]^dim`.
    pub fn dense(dim: usize, num_classes: usize, hidden: usize, latent: usize) -> Self {
        let leaky = Activation::LeakyRelu { slope: LEAKY_SLOPE };
        Self {
            name: "dense".into(),
            input_shape: vec![dim],
            latent_shape: vec![latent],
            num_classes,
            encoder: dense_stack(&[hidden, latent], dim, Activation::Relu, Activation::Relu),
            decoder: dense_stack(
                &[hidden, hidden, dim],
                latent,
                Activation::Relu,
                Activation::Tanh,
            ),
            classifier: vec![LayerSpec::linear(latent, num_classes)],
            critic: dense_stack(&[hidden, hidden, 1], dim, leaky, Activation::Identity),
            latent_disc: dense_stack(&[hidden, hidden, 1], latent, leaky, Activation::Identity),
        }
    }

    pub fn by_name(name: &str, num_classes: usize, critic_norm: CriticNorm) -> Result<Self> {
        match name {
            "digits" => Ok(Self::digits(num_classes, critic_norm)),
            "compact" => Ok(Self::compact(num_classes, critic_norm)),
            "dense" => Ok(Self::dense(2, num_classes, 32, 16)),
            _ => Err(Error::config(
                "model.architecture",
                format!("unknown architecture `{name}`"),
            )),
        }
    }

    pub fn layers(&self, role: Role) -> &[LayerSpec] {
        match role {
            Role::SourceEncoder | Role::TargetEncoder => &self.encoder,
            Role::SourceDecoder | Role::TargetDecoder => &self.decoder,
            Role::Classifier => &self.classifier,
            Role::SourceCritic | Role::TargetCritic => &self.critic,
            Role::LatentDiscriminator => &self.latent_disc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SharingPlan {
    pub tie_encoders: bool,
    /// Leading decoder layers shared between the two decoders (weights, biases, norm terms).
    pub shared_decoder_layers: usize,
}

impl Default for SharingPlan {
    fn default() -> Self {
        Self {
            tie_encoders: true,
            shared_decoder_layers: 2,
        }
    }
}

/// Network topologies and where their parameters live in the store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Networks {
    pub arch: ArchSpec,
    pub sharing: SharingPlan,
    nets: Vec<Network>,
}

/// Topologies plus the parameters they read.
#[derive(Debug, Clone)]
pub struct ModelBundle<T: Float = f32> {
    pub nets: Networks,
    pub store: ParamStore<T>,
}

impl<T: Float> ModelBundle<T> {
    pub fn build(arch: ArchSpec, sharing: SharingPlan, seed: u64) -> Result<Self> {
        if sharing.shared_decoder_layers > arch.decoder.len() {
            return Err(Error::Param(format!(
                "{} shared decoder layers but the decoder has {}",
                sharing.shared_decoder_layers,
                arch.decoder.len()
            )));
        }
        let mut store = ParamStore::new();
        let mut nets = Vec::with_capacity(Role::ALL.len());
        for role in Role::ALL {
            nets.push(Network::build(
                role.prefix(),
                arch.layers(role),
                &mut store,
                seed,
            )?);
        }
        let nets = Networks {
            arch,
            sharing,
            nets,
        };
        if sharing.tie_encoders {
            for (a, b) in nets
                .net(Role::SourceEncoder)
                .slots()
                .iter()
                .zip(nets.net(Role::TargetEncoder).slots())
            {
                store.tie(a, &b)?;
            }
        }
        let src = nets.net(Role::SourceDecoder);
        let tgt = nets.net(Role::TargetDecoder);
        for (la, lb) in src
            .layers
            .iter()
            .zip(&tgt.layers)
            .take(sharing.shared_decoder_layers)
        {
            for (a, b) in la.slots().iter().zip(lb.slots()) {
                store.tie(a, &b)?;
            }
        }
        let bundle = Self { nets, store };
        bundle.check_shapes()?;
        Ok(bundle)
    }

    /// Splits into the read-only topology and the mutable parameters.
    pub fn parts(&mut self) -> (&Networks, &mut ParamStore<T>) {
        (&self.nets, &mut self.store)
    }

    /// Dry run on a two-sample batch to confirm every role's shapes connect.
    fn check_shapes(&self) -> Result<()> {
        let mut store = self.store.clone();
        let mut sess = Session::eval(&mut store);
        let x = sess.input(Tensor::zeros(self.nets.batch_shape(2)));
        let z = self.nets.encode(&mut sess, Role::SourceEncoder, x)?;
        let got = sess.graph.value(z).shape()[1..].to_vec();
        if got != self.nets.arch.latent_shape {
            return Err(Error::shape(
                "encoder",
                format!("latent {got:?}, declared {:?}", self.nets.arch.latent_shape),
            ));
        }
        let recon = self.nets.run(&mut sess, Role::SourceDecoder, z)?;
        if sess.graph.value(recon).shape() != self.nets.batch_shape(2).as_slice() {
            return Err(Error::shape(
                "decoder",
                format!("output {:?}", sess.graph.value(recon).shape()),
            ));
        }
        let logits = self.nets.run(&mut sess, Role::Classifier, z)?;
        let score = self.nets.run(&mut sess, Role::LatentDiscriminator, z)?;
        let critic = self.nets.run(&mut sess, Role::SourceCritic, recon)?;
        let expect = [
            (logits, vec![2, self.nets.arch.num_classes]),
            (score, vec![2, 1]),
            (critic, vec![2, 1]),
        ];
        for (v, shape) in expect {
            if sess.graph.value(v).shape() != shape.as_slice() {
                return Err(Error::shape(
                    "bundle",
                    format!("{:?} vs {shape:?}", sess.graph.value(v).shape()),
                ));
            }
        }
        Ok(())
    }

    /// Trainable parameter ids of the given roles (tied slots once).
    pub fn param_ids(&self, roles: &[Role]) -> Result<BTreeSet<ParamId>> {
        self.nets.param_ids(&self.store, roles)
    }

    /// Encoder tie group, if the encoders are currently tied.
    pub fn encoder_groups(&self) -> Vec<TieGroupId> {
        let mut groups: Vec<TieGroupId> = self
            .nets
            .net(Role::TargetEncoder)
            .slots()
            .iter()
            .filter_map(|s| self.store.group_of(s))
            .collect();
        groups.dedup();
        groups
    }

    /// Gives the target encoder its own copy of every shared tensor.
    pub fn untie_encoders(&mut self) -> Result<()> {
        let groups = self.encoder_groups();
        if groups.is_empty() {
            return Err(Error::Param("encoders are not tied".into()));
        }
        for g in groups {
            self.store.untie(g)?;
        }
        self.nets.sharing.tie_encoders = false;
        Ok(())
    }
}

impl Networks {
    pub fn net(&self, role: Role) -> &Network {
        &self.nets[Role::ALL
            .iter()
            .position(|&r| r == role)
            .expect("all roles built")]
    }

    pub fn batch_shape(&self, batch: usize) -> Vec<usize> {
        let mut s = vec![batch];
        s.extend(&self.arch.input_shape);
        s
    }

    pub fn run<T: Float>(&self, sess: &mut Session<'_, T>, role: Role, x: Var) -> Result<Var> {
        self.net(role).forward(sess, x)
    }

    /// Encoder forward with an input-shape check.
    pub fn encode<T: Float>(&self, sess: &mut Session<'_, T>, role: Role, x: Var) -> Result<Var> {
        let shape = sess.graph.value(x).shape();
        if shape.len() != self.arch.input_shape.len() + 1 || shape[1..] != self.arch.input_shape[..]
        {
            return Err(Error::shape(
                "encoder",
                format!("input {shape:?}, expected [B, {:?}]", self.arch.input_shape),
            ));
        }
        self.run(sess, role, x)
    }

    pub fn param_ids<T: Float>(
        &self,
        store: &ParamStore<T>,
        roles: &[Role],
    ) -> Result<BTreeSet<ParamId>> {
        self.ids_where(store, roles, |k| k == ParamKind::Trainable)
    }

    /// Batch-norm running statistics of the given roles.
    pub fn buffer_ids<T: Float>(
        &self,
        store: &ParamStore<T>,
        roles: &[Role],
    ) -> Result<BTreeSet<ParamId>> {
        self.ids_where(store, roles, |k| k == ParamKind::Buffer)
    }

    fn ids_where<T: Float>(
        &self,
        store: &ParamStore<T>,
        roles: &[Role],
        keep: impl Fn(ParamKind) -> bool,
    ) -> Result<BTreeSet<ParamId>> {
        let mut out = BTreeSet::new();
        for &role in roles {
            for slot in self.net(role).slots() {
                let id = store.resolve(&slot)?;
                if store.kind(id).is_some_and(&keep) {
                    out.insert(id);
                }
            }
        }
        Ok(out)
    }
}
