//! Broad Learning System: random feature nodes, nonlinear enhancement nodes
//! and ridge-regression output weights.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::client::{outsourced_pinv_session, ClientOps, OutsourceOptions, PhaseTimings};
use crate::data::Dataset;
use crate::error::{Error, FormatErrorKind, Result};
use crate::keygen::{generate_keys, ScaleMode};
use crate::matrix::{gram, mat_mul, DenseMatrix};
use crate::transport::Transport;

pub const MODEL_FILE_MAGIC: &[u8; 8] = b"PBLSMDL1";

/// Ridge coefficient for training. Design matrices of min-max scaled data
/// often have smallest singular values near `1e-2`, and verification
/// tolerates a bias of roughly `lambda / sigma_min^2`.
pub const DEFAULT_TRAIN_LAMBDA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureActivation {
    #[default]
    Linear,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnhancementActivation {
    #[default]
    Tanh,
    Sigmoid,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl FeatureActivation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            FeatureActivation::Linear => x,
            FeatureActivation::Sigmoid => sigmoid(x),
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        [Self::Linear, Self::Sigmoid]
            .into_iter()
            .find(|a| a.code() == c)
    }
}

impl EnhancementActivation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            EnhancementActivation::Tanh => x.tanh(),
            EnhancementActivation::Sigmoid => sigmoid(x),
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        [Self::Tanh, Self::Sigmoid]
            .into_iter()
            .find(|a| a.code() == c)
    }
}

impl fmt::Display for FeatureActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureActivation::Linear => "linear",
            FeatureActivation::Sigmoid => "sigmoid",
        })
    }
}

impl fmt::Display for EnhancementActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnhancementActivation::Tanh => "tanh",
            EnhancementActivation::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for FeatureActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "sigmoid" => Ok(Self::Sigmoid),
            _ => Err(Error::invalid(format!(
                "unknown feature activation {s:?} (linear|sigmoid)"
            ))),
        }
    }
}

impl FromStr for EnhancementActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Self::Tanh),
            "sigmoid" => Ok(Self::Sigmoid),
            _ => Err(Error::invalid(format!(
                "unknown enhancement activation {s:?} (tanh|sigmoid)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlsConfig {
    pub feature_groups: usize,
    pub nodes_per_feature_group: usize,
    pub enhancement_groups: usize,
    pub nodes_per_enhancement_group: usize,
    pub lambda: f64,
    /// Enhancement weights are drawn uniform on `[-1, 1]` and multiplied by
    /// `enhancement_scale / sqrt(total feature width)`.
    pub enhancement_scale: f64,
    pub seed: u64,
    pub feature_activation: FeatureActivation,
    pub enhancement_activation: EnhancementActivation,
}

impl Default for BlsConfig {
    fn default() -> Self {
        BlsConfig {
            feature_groups: 2,
            nodes_per_feature_group: 5,
            enhancement_groups: 2,
            nodes_per_enhancement_group: 10,
            lambda: DEFAULT_TRAIN_LAMBDA,
            enhancement_scale: 0.8,
            seed: 0,
            feature_activation: FeatureActivation::Linear,
            enhancement_activation: EnhancementActivation::Tanh,
        }
    }
}

impl BlsConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.feature_groups,
            self.nodes_per_feature_group,
            self.enhancement_groups,
            self.nodes_per_enhancement_group,
        ];
        if counts.contains(&0) {
            return Err(Error::invalid(
                "group counts and widths must all be at least 1",
            ));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::invalid(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.enhancement_scale.is_finite() && self.enhancement_scale > 0.0) {
            return Err(Error::invalid(format!(
                "enhancement scale must be positive, got {}",
                self.enhancement_scale
            )));
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        self.feature_groups * self.nodes_per_feature_group
    }

    pub fn enhancement_width(&self) -> usize {
        self.enhancement_groups * self.nodes_per_enhancement_group
    }

    pub fn total_nodes(&self) -> usize {
        self.feature_width() + self.enhancement_width()
    }
}

/// Weights and bias of one group of nodes: `act(X W + 1 b^T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeGroup {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl NodeGroup {
    pub fn new(weights: DenseMatrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(Error::dim(format!(
                "bias of length {} for a group of width {}",
                bias.len(),
                weights.cols()
            )));
        }
        Ok(NodeGroup { weights, bias })
    }

    pub fn width(&self) -> usize {
        self.weights.cols()
    }

    fn random<R: Rng>(inputs: usize, width: usize, scale: f64, rng: &mut R) -> Self {
        let weights =
            DenseMatrix::from_fn(inputs, width, |_, _| scale * rng.random_range(-1.0..=1.0));
        let bias = (0..width).map(|_| rng.random_range(-1.0..=1.0)).collect();
        NodeGroup { weights, bias }
    }

    fn apply(&self, x: &DenseMatrix, act: impl Fn(f64) -> f64) -> Result<DenseMatrix> {
        let xw = mat_mul(x, &self.weights)?;
        Ok(DenseMatrix::from_fn(xw.rows(), xw.cols(), |i, j| {
            act(xw[(i, j)] + self.bias[j])
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlsModel {
    config: BlsConfig,
    input_dim: usize,
    classes: usize,
    feature_groups: Vec<NodeGroup>,
    enhancement_groups: Vec<NodeGroup>,
    output: Option<DenseMatrix>,
    /// Whether the node weights are the ones derived from `config.seed`.
    derived: bool,
}

impl BlsModel {
    /// An untrained model whose random weights are derived from `config.seed`.
    pub fn new(config: BlsConfig, input_dim: usize, classes: usize) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || classes == 0 {
            return Err(Error::invalid(
                "input dimension and class count must be positive",
            ));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let feature_groups = (0..config.feature_groups)
            .map(|_| NodeGroup::random(input_dim, config.nodes_per_feature_group, 1.0, &mut rng))
            .collect();
        let fw = config.feature_width();
        let scale = config.enhancement_scale / (fw as f64).sqrt();
        let enhancement_groups = (0..config.enhancement_groups)
            .map(|_| NodeGroup::random(fw, config.nodes_per_enhancement_group, scale, &mut rng))
            .collect();
        Ok(BlsModel {
            config,
            input_dim,
            classes,
            feature_groups,
            enhancement_groups,
            output: None,
            derived: true,
        })
    }

    /// A model with explicit node weights. Such a model cannot be saved,
    /// since saved models store only the seed.
    pub fn from_groups(
        config: BlsConfig,
        classes: usize,
        feature_groups: Vec<NodeGroup>,
        enhancement_groups: Vec<NodeGroup>,
    ) -> Result<Self> {
        let input_dim = feature_groups
            .first()
            .map(|g| g.weights.rows())
            .ok_or_else(|| Error::invalid("at least one feature group is required"))?;
        if enhancement_groups.is_empty() || classes == 0 {
            return Err(Error::invalid(
                "at least one enhancement group and one class are required",
            ));
        }
        if feature_groups.iter().any(|g| g.weights.rows() != input_dim) {
            return Err(Error::dim("feature groups disagree on the input dimension"));
        }
        let fw: usize = feature_groups.iter().map(NodeGroup::width).sum();
        if enhancement_groups.iter().any(|g| g.weights.rows() != fw) {
            return Err(Error::dim(format!(
                "enhancement groups must take {fw} inputs"
            )));
        }
        Ok(BlsModel {
            config,
            input_dim,
            classes,
            feature_groups,
            enhancement_groups,
            output: None,
            derived: false,
        })
    }

    pub fn config(&self) -> &BlsConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_groups(&self) -> &[NodeGroup] {
        &self.feature_groups
    }

    pub fn enhancement_groups(&self) -> &[NodeGroup] {
        &self.enhancement_groups
    }

    pub fn feature_width(&self) -> usize {
        self.feature_groups.iter().map(NodeGroup::width).sum()
    }

    pub fn total_nodes(&self) -> usize {
        self.feature_width()
            + self
                .enhancement_groups
                .iter()
                .map(NodeGroup::width)
                .sum::<usize>()
    }

    pub fn output_weights(&self) -> Option<&DenseMatrix> {
        self.output.as_ref()
    }

    pub fn is_trained(&self) -> bool {
        self.output.is_some()
    }

    pub fn set_output_weights(&mut self, w: DenseMatrix) -> Result<()> {
        if w.shape() != (self.total_nodes(), self.classes) {
            return Err(Error::dim(format!(
                "output weights must be {}x{}, got {}x{}",
                self.total_nodes(),
                self.classes,
                w.rows(),
                w.cols()
            )));
        }
        self.output = Some(w);
        Ok(())
    }

    /// `Z = [Z_1 .. Z_n]`.
    pub fn build_feature_nodes(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.input_dim {
            return Err(Error::dim(format!(
                "model takes {} inputs, got {}",
                self.input_dim,
                x.cols()
            )));
        }
        let act = self.config.feature_activation;
        concat(
            self.feature_groups
                .iter()
                .map(|g| g.apply(x, |v| act.apply(v))),
        )
    }

    /// `H = [H_1 .. H_m]` from the feature nodes.
    pub fn build_enhancement_nodes(&self, z: &DenseMatrix) -> Result<DenseMatrix> {
        let fw = self.feature_width();
        if z.cols() != fw {
            return Err(Error::dim(format!(
                "enhancement nodes take {fw} features, got {}",
                z.cols()
            )));
        }
        let act = self.config.enhancement_activation;
        concat(
            self.enhancement_groups
                .iter()
                .map(|g| g.apply(z, |v| act.apply(v))),
        )
    }

    /// `A = [Z | H]`.
    pub fn design_matrix(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let z = self.build_feature_nodes(x)?;
        let h = self.build_enhancement_nodes(&z)?;
        assemble_design(&z, &h)
    }

    pub fn scores(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let w = self
            .output
            .as_ref()
            .ok_or_else(|| Error::State("model has not been trained".into()))?;
        mat_mul(&self.design_matrix(x)?, w)
    }

    pub fn predict(&self, x: &DenseMatrix) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.scores(x)?))
    }

    /// Fraction of samples whose predicted label is correct.
    pub fn evaluate(&self, ds: &Dataset) -> Result<f64> {
        let predicted = self.predict(&ds.x)?;
        let correct = predicted
            .iter()
            .zip(&ds.labels)
            .filter(|(p, l)| p == l)
            .count();
        Ok(correct as f64 / ds.len() as f64)
    }

    /// Writes the config, shape and output weights. Node weights are
    /// re-derived from the seed on load.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        if !self.derived {
            return Err(Error::State(
                "models with hand-set node weights cannot be saved".into(),
            ));
        }
        let c = &self.config;
        w.write_all(MODEL_FILE_MAGIC)?;
        for v in [
            c.feature_groups,
            c.nodes_per_feature_group,
            c.enhancement_groups,
            c.nodes_per_enhancement_group,
        ] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&c.lambda.to_le_bytes())?;
        w.write_all(&c.enhancement_scale.to_le_bytes())?;
        w.write_all(&c.seed.to_le_bytes())?;
        w.write_all(&[c.feature_activation.code(), c.enhancement_activation.code()])?;
        w.write_all(&(self.input_dim as u64).to_le_bytes())?;
        w.write_all(&(self.classes as u64).to_le_bytes())?;
        match &self.output {
            Some(out) => {
                w.write_all(&[1])?;
                out.write_to(&mut w)?;
            }
            None => w.write_all(&[0])?,
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MODEL_FILE_MAGIC {
            return Err(Error::format(FormatErrorKind::BadMagic, "not a model file"));
        }
        let mut u64s = [0u64; 4];
        for v in &mut u64s {
            *v = read_u64(&mut r)?;
        }
        let lambda = f64::from_bits(read_u64(&mut r)?);
        let enhancement_scale = f64::from_bits(read_u64(&mut r)?);
        let seed = read_u64(&mut r)?;
        let mut acts = [0u8; 2];
        read_exact(&mut r, &mut acts)?;
        let invalid = |what: &str| Error::format(FormatErrorKind::InvalidValue, what.to_string());
        let config = BlsConfig {
            feature_groups: to_usize(u64s[0])?,
            nodes_per_feature_group: to_usize(u64s[1])?,
            enhancement_groups: to_usize(u64s[2])?,
            nodes_per_enhancement_group: to_usize(u64s[3])?,
            lambda,
            enhancement_scale,
            seed,
            feature_activation: FeatureActivation::from_code(acts[0])
                .ok_or_else(|| invalid("feature activation"))?,
            enhancement_activation: EnhancementActivation::from_code(acts[1])
                .ok_or_else(|| invalid("enhancement activation"))?,
        };
        let input_dim = to_usize(read_u64(&mut r)?)?;
        let classes = to_usize(read_u64(&mut r)?)?;
        let mut model = BlsModel::new(config, input_dim, classes)
            .map_err(|e| invalid(&format!("stored config: {e}")))?;
        let mut flag = [0u8; 1];
        read_exact(&mut r, &mut flag)?;
        match flag[0] {
            0 => {}
            1 => {
                let out = DenseMatrix::read_from(&mut r)
                    .map_err(|e| invalid(&format!("output weights: {e}")))?;
                model.set_output_weights(out)?;
            }
            _ => return Err(invalid("trained flag")),
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::format(
                FormatErrorKind::TrailingBytes,
                "data after the model",
            ));
        }
        Ok(model)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            Error::format(FormatErrorKind::Truncated, "model file ends early")
        }
        _ => Error::Io(e),
    })
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn to_usize(v: u64) -> Result<usize> {
    usize::try_from(v)
        .ok()
        .filter(|&v| v <= 1 << 32)
        .ok_or_else(|| {
            Error::format(
                FormatErrorKind::InvalidValue,
                format!("count {v} out of range"),
            )
        })
}

fn concat(blocks: impl Iterator<Item = Result<DenseMatrix>>) -> Result<DenseMatrix> {
    let mut out: Option<DenseMatrix> = None;
    for b in blocks {
        let b = b?;
        out = Some(match out {
            None => b,
            Some(acc) => acc.hstack(&b)?,
        });
    }
    out.ok_or_else(|| Error::invalid("no node groups"))
}

/// `[Z | H]`.
pub fn assemble_design(z: &DenseMatrix, h: &DenseMatrix) -> Result<DenseMatrix> {
    z.hstack(h)
}

/// Index of the largest entry of each row; the lowest index wins ties.
pub fn argmax_rows(scores: &DenseMatrix) -> Vec<usize> {
    (0..scores.rows())
        .map(|i| {
            scores
                .row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// `|(lambda I + A^T A) W - A^T Y|_F / |A^T Y|_F`.
pub fn normal_equation_residual(
    a: &DenseMatrix,
    y: &DenseMatrix,
    w: &DenseMatrix,
    lambda: f64,
) -> Result<f64> {
    let aty = mat_mul(&a.transpose(), y)?;
    let lhs = mat_mul(&gram(a)?.add_diagonal(lambda)?, w)?;
    let num = lhs.sub(&aty)?.frobenius_norm();
    let den = aty.frobenius_norm();
    Ok(if den > 0.0 { num / den } else { num })
}

/// Computes the ridge pseudoinverse `(lambda I + A^T A)^-1 A^T`.
pub trait PinvBackend {
    fn pinv(&mut self, a: &DenseMatrix, lambda: f64) -> Result<DenseMatrix>;

    fn name(&self) -> &'static str;
}

/// Everything on the local machine.
#[derive(Debug, Clone, Copy, Default)]
pub struct LocalPinv;

impl PinvBackend for LocalPinv {
    fn pinv(&mut self, a: &DenseMatrix, lambda: f64) -> Result<DenseMatrix> {
        crate::client::local_pinv(a, lambda)
    }

    fn name(&self) -> &'static str {
        "local"
    }
}

/// Masks, outsources and verifies. Call `k` uses keys from `key_seed + k`.
#[derive(Debug)]
pub struct OutsourcedPinv<T> {
    transport: T,
    scale_mode: ScaleMode,
    key_seed: u64,
    options: OutsourceOptions,
    calls: u64,
    last_ops: ClientOps,
    last_timings: PhaseTimings,
}

impl<T: Transport> OutsourcedPinv<T> {
    pub fn new(
        transport: T,
        scale_mode: ScaleMode,
        key_seed: u64,
        options: OutsourceOptions,
    ) -> Self {
        OutsourcedPinv {
            transport,
            scale_mode,
            key_seed,
            options,
            calls: 0,
            last_ops: ClientOps::default(),
            last_timings: PhaseTimings::default(),
        }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn into_transport(self) -> T {
        self.transport
    }

    /// Client work in the most recent accepted call.
    pub fn last_ops(&self) -> ClientOps {
        self.last_ops
    }

    pub fn last_timings(&self) -> PhaseTimings {
        self.last_timings
    }
}

impl<T: Transport> PinvBackend for OutsourcedPinv<T> {
    fn pinv(&mut self, a: &DenseMatrix, lambda: f64) -> Result<DenseMatrix> {
        let keys = generate_keys(
            a.rows(),
            a.cols(),
            self.key_seed.wrapping_add(self.calls),
            self.scale_mode,
        )?;
        self.calls += 1;
        let session =
            outsourced_pinv_session(a, lambda, &keys, &mut self.transport, &self.options)?;
        self.last_ops = session.ops();
        self.last_timings = session.timings();
        Ok(session.r4().expect("accepted sessions carry R4").clone())
    }

    fn name(&self) -> &'static str {
        "outsourced"
    }
}

/// Builds the model for `ds`, then sets `W = pinv(A) Y`.
pub fn train(ds: &Dataset, config: &BlsConfig, backend: &mut dyn PinvBackend) -> Result<BlsModel> {
    let model = BlsModel::new(*config, ds.input_dim(), ds.classes)?;
    fit(model, ds, backend)
}

/// Fits the output weights of an existing model.
pub fn fit(mut model: BlsModel, ds: &Dataset, backend: &mut dyn PinvBackend) -> Result<BlsModel> {
    if ds.classes != model.classes {
        return Err(Error::dim(format!(
            "model has {} classes, data {}",
            model.classes, ds.classes
        )));
    }
    let a = model.design_matrix(&ds.x)?;
    if a.rows() < a.cols() {
        return Err(Error::invalid(format!(
            "{} samples for {} nodes; training needs at least as many samples as nodes",
            a.rows(),
            a.cols()
        )));
    }
    let pinv = backend.pinv(&a, model.config.lambda)?;
    let w = mat_mul(&pinv, &ds.y)?;
    model.set_output_weights(w)?;
    Ok(model)
}
