//! Two-passage network: a rule encoder and a data encoder whose latent codes
//! are weighted by the rule strength `alpha` and fed to a shared decision
//! block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mlp_forward, Mlp, MlpSpec, NodeId, ParamSet, Tape, Tensor2D};

/// How the two latent codes are merged before the decision block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// `concat(alpha * z_r, (1 - alpha) * z_d)`
    ScaledConcat,
    /// `concat(z_r, z_d)`, alpha ignored.
    Concat,
    /// `z_r + z_d`, alpha ignored.
    Add,
    /// One encoder fed `[h; alpha]`, sized to match two encoders' parameters.
    InputConcatAlpha,
    /// One encoder and no alpha path (baseline models).
    Single,
}

impl Coupling {
    pub fn uses_alpha(self) -> bool {
        matches!(self, Coupling::ScaledConcat | Coupling::InputConcatAlpha)
    }

    fn two_encoders(self) -> bool {
        matches!(self, Coupling::ScaledConcat | Coupling::Concat | Coupling::Add)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    BinaryClassification,
}

/// Layer widths and wiring of a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArch {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Optional input preconditioner shared by both encoders.
    pub shared: Option<Vec<usize>>,
    pub rule_encoder: Vec<usize>,
    pub data_encoder: Vec<usize>,
    pub decision: Vec<usize>,
    pub coupling: Coupling,
    pub task: TaskKind,
    /// Predict `x + network(x)`; needs `input_dim == output_dim`.
    pub residual: bool,
}

/// Largest allowed relative parameter mismatch for the alpha-as-input encoder.
pub const PARAM_PARITY_TOLERANCE: f64 = 0.05;

impl ModelArch {
    /// Double pendulum next-state model: shared `[FC64,ReLU,FC16]`, encoders
    /// `[FC64,ReLU,FC64,ReLU,FC64]`, decision `[FC64,ReLU,FC4]`.
    pub fn pendulum() -> Self {
        Self {
            input_dim: 4,
            output_dim: 4,
            shared: Some(vec![64, 16]),
            rule_encoder: vec![64, 64, 64],
            data_encoder: vec![64, 64, 64],
            decision: vec![64, 4],
            coupling: Coupling::ScaledConcat,
            task: TaskKind::Regression,
            residual: true,
        }
    }

    /// Tabular regression: encoders `[FC64,ReLU,FC64,ReLU,FC16]`, decision `[FC64,ReLU,FC1]`.
    pub fn tabular_regression(input_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim: 1,
            shared: None,
            rule_encoder: vec![64, 64, 16],
            data_encoder: vec![64, 64, 16],
            decision: vec![64, 1],
            coupling: Coupling::ScaledConcat,
            task: TaskKind::Regression,
            residual: false,
        }
    }

    /// Tabular classification: encoders `[FC100,ReLU,FC16]`, decision `[FC1,Sigmoid]`.
    pub fn tabular_classification(input_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim: 1,
            shared: None,
            rule_encoder: vec![100, 16],
            data_encoder: vec![100, 16],
            decision: vec![1],
            coupling: Coupling::ScaledConcat,
            task: TaskKind::BinaryClassification,
            residual: false,
        }
    }

    pub fn with_coupling(mut self, coupling: Coupling) -> Self {
        self.coupling = coupling;
        self
    }

    fn encoder_input_dim(&self) -> usize {
        self.shared
            .as_ref()
            .and_then(|s| s.last().copied())
            .unwrap_or(self.input_dim)
    }

    pub fn latent_dim(&self) -> usize {
        self.data_encoder.last().copied().unwrap_or(0)
    }

    pub fn decision_fan_in(&self) -> usize {
        match self.coupling {
            Coupling::ScaledConcat | Coupling::Concat => 2 * self.latent_dim(),
            Coupling::Add | Coupling::InputConcatAlpha | Coupling::Single => self.latent_dim(),
        }
    }

    /// Hidden widths of the single encoder used by `InputConcatAlpha`, scaled
    /// so its parameter count is as close as possible to that of the two
    /// separate encoders.
    pub fn alpha_input_encoder_widths(&self) -> Result<Vec<usize>> {
        let fan_in = self.encoder_input_dim();
        let target = MlpSpec::new(fan_in, self.rule_encoder.clone()).param_count()
            + MlpSpec::new(fan_in, self.data_encoder.clone()).param_count();
        let base = &self.data_encoder;
        let n = base.len();
        let mut best: Option<(usize, Vec<usize>)> = None;
        for step in 0..=4000 {
            let m = 1.0 + step as f64 * 1e-3;
            let widths: Vec<usize> = base
                .iter()
                .enumerate()
                .map(|(i, &w)| if i + 1 == n { w } else { ((w as f64) * m).round().max(1.0) as usize })
                .collect();
            let count = MlpSpec::new(fan_in + 1, widths.clone()).param_count();
            let diff = count.abs_diff(target);
            if best.as_ref().is_none_or(|(d, _)| diff < *d) {
                best = Some((diff, widths));
            }
        }
        let (diff, widths) = best.expect("search space is non-empty");
        if diff as f64 > PARAM_PARITY_TOLERANCE * target as f64 {
            return Err(Error::config(
                "model.data_encoder",
                format!(
                    "cannot size an alpha-input encoder within {}% of {target} parameters",
                    PARAM_PARITY_TOLERANCE * 100.0
                ),
            ));
        }
        Ok(widths)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::config("model.input_dim", "dimensions must be positive"));
        }
        for (field, widths) in [
            ("model.rule_encoder", &self.rule_encoder),
            ("model.data_encoder", &self.data_encoder),
            ("model.decision", &self.decision),
        ] {
            if widths.is_empty() || widths.contains(&0) {
                return Err(Error::config(field, "needs at least one layer of positive width"));
            }
        }
        if let Some(shared) = &self.shared {
            if shared.is_empty() || shared.contains(&0) {
                return Err(Error::config("model.shared", "needs at least one layer of positive width"));
            }
        }
        if self.coupling.two_encoders() && self.rule_encoder.last() != self.data_encoder.last() {
            return Err(Error::config(
                "model.rule_encoder",
                format!(
                    "encoder output widths differ ({:?} vs {:?})",
                    self.rule_encoder.last(),
                    self.data_encoder.last()
                ),
            ));
        }
        if self.decision.last() != Some(&self.output_dim) {
            return Err(Error::config(
                "model.decision",
                format!("last width must equal output dimension {}", self.output_dim),
            ));
        }
        if self.residual && (self.input_dim != self.output_dim || self.task != TaskKind::Regression) {
            return Err(Error::config(
                "model.residual",
                "needs a regression task with equal input and output dimension",
            ));
        }
        if self.coupling == Coupling::InputConcatAlpha {
            self.alpha_input_encoder_widths()?;
        }
        Ok(())
    }
}

/// Fixed per-feature affine preconditioning `(x - shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaler {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Per-column mean and standard deviation of `x` (scale 1 for constant columns).
    pub fn fit(x: &Tensor2D) -> Self {
        let n = x.rows().max(1) as f64;
        let mut shift = vec![0.0; x.cols()];
        let mut scale = vec![1.0; x.cols()];
        for c in 0..x.cols() {
            let col = x.col_values(c);
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            shift[c] = mean;
            if var > 0.0 {
                scale[c] = var.sqrt();
            }
        }
        Self { shift, scale }
    }

    pub fn apply(&self, x: &Tensor2D) -> Tensor2D {
        Tensor2D::from_fn(x.rows(), x.cols(), |r, c| (x.get(r, c) - self.shift[c]) / self.scale[c])
    }
}

/// Output nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub output: NodeId,
    pub z_r: Option<NodeId>,
    pub z_d: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepCtrlModel {
    arch: ModelArch,
    scaler: InputScaler,
    params: ParamSet,
    shared: Option<Mlp>,
    rule_encoder: Option<Mlp>,
    data_encoder: Mlp,
    decision: Mlp,
}

struct Layout {
    shared: Option<Mlp>,
    rule_encoder: Option<Mlp>,
    data_encoder: Mlp,
    decision: Mlp,
}

fn build_layout(arch: &ModelArch, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<Layout> {
    arch.validate()?;
    let shared = arch
        .shared
        .as_ref()
        .map(|w| Mlp::init("shared", MlpSpec::new(arch.input_dim, w.clone()), params, rng));
    let enc_in = arch.encoder_input_dim();
    let (rule_encoder, data_encoder) = match arch.coupling {
        Coupling::ScaledConcat | Coupling::Concat | Coupling::Add => {
            let r = Mlp::init("rule_encoder", MlpSpec::new(enc_in, arch.rule_encoder.clone()), params, rng);
            let d = Mlp::init("data_encoder", MlpSpec::new(enc_in, arch.data_encoder.clone()), params, rng);
            (Some(r), d)
        }
        Coupling::InputConcatAlpha => {
            let widths = arch.alpha_input_encoder_widths()?;
            let d = Mlp::init("encoder", MlpSpec::new(enc_in + 1, widths), params, rng);
            (None, d)
        }
        Coupling::Single => {
            let d = Mlp::init("data_encoder", MlpSpec::new(enc_in, arch.data_encoder.clone()), params, rng);
            (None, d)
        }
    };
    let decision = Mlp::init(
        "decision",
        MlpSpec::new(arch.decision_fan_in(), arch.decision.clone()),
        params,
        rng,
    );
    Ok(Layout {
        shared,
        rule_encoder,
        data_encoder,
        decision,
    })
}

impl DeepCtrlModel {
    /// Freshly initialized model; parameters are a pure function of `seed`.
    pub fn new(arch: ModelArch, scaler: InputScaler, seed: u64) -> Result<Self> {
        if scaler.shift.len() != arch.input_dim || scaler.scale.len() != arch.input_dim {
            return Err(Error::dim("input scaler", arch.input_dim, scaler.shift.len()));
        }
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = build_layout(&arch, &mut params, &mut rng)?;
        Ok(Self {
            arch,
            scaler,
            params,
            shared: layout.shared,
            rule_encoder: layout.rule_encoder,
            data_encoder: layout.data_encoder,
            decision: layout.decision,
        })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_parts(arch: ModelArch, scaler: InputScaler, params: ParamSet) -> Result<Self> {
        let mut model = Self::new(arch, scaler, 0)?;
        if model.params.names() != params.names() {
            return Err(Error::dim(
                "model parameters",
                format!("{:?}", model.params.names()),
                format!("{:?}", params.names()),
            ));
        }
        model.params.assign(params.tensors().to_vec())?;
        Ok(model)
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn scaler(&self) -> &InputScaler {
        &self.scaler
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn coupling(&self) -> Coupling {
        self.arch.coupling
    }

    pub fn task(&self) -> TaskKind {
        self.arch.task
    }

    /// Parameter indices of the rule encoder (empty without one).
    pub fn rule_encoder_params(&self) -> std::ops::Range<usize> {
        self.rule_encoder.as_ref().map_or(0..0, Mlp::param_indices)
    }

    /// Parameter indices of the data encoder (or the single encoder).
    pub fn data_encoder_params(&self) -> std::ops::Range<usize> {
        self.data_encoder.param_indices()
    }

    pub fn shared_params(&self) -> std::ops::Range<usize> {
        self.shared.as_ref().map_or(0..0, Mlp::param_indices)
    }

    pub fn decision_params(&self) -> std::ops::Range<usize> {
        self.decision.param_indices()
    }

    /// Records a full forward pass for raw inputs `x` at rule strength `alpha`.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor2D, alpha: f64) -> Result<ForwardNodes> {
        if x.cols() != self.arch.input_dim {
            return Err(Error::dim("model input", self.arch.input_dim, x.cols()));
        }
        if !alpha.is_finite() {
            return Err(Error::NonFinite("rule strength alpha".into()));
        }
        let xs = tape.constant(self.scaler.apply(x));
        let h = match &self.shared {
            Some(shared) => mlp_forward(shared, &self.params, xs, tape)?,
            None => xs,
        };
        let (z, z_r, z_d) = match (self.arch.coupling, &self.rule_encoder) {
            (Coupling::InputConcatAlpha, _) => {
                let a = tape.constant(Tensor2D::filled(x.rows(), 1, alpha));
                let ha = tape.concat(h, a)?;
                let z = mlp_forward(&self.data_encoder, &self.params, ha, tape)?;
                (z, None, z)
            }
            (Coupling::Single, _) | (_, None) => {
                let z = mlp_forward(&self.data_encoder, &self.params, h, tape)?;
                (z, None, z)
            }
            (mode, Some(rule_encoder)) => {
                let z_r = mlp_forward(rule_encoder, &self.params, h, tape)?;
                let z_d = mlp_forward(&self.data_encoder, &self.params, h, tape)?;
                (couple_nodes(tape, z_r, z_d, alpha, mode)?, Some(z_r), z_d)
            }
        };
        let mut out = mlp_forward(&self.decision, &self.params, z, tape)?;
        if self.arch.task == TaskKind::BinaryClassification {
            out = tape.sigmoid(out);
        }
        if self.arch.residual {
            let xr = tape.constant(x.clone());
            out = tape.add(out, xr)?;
        }
        Ok(ForwardNodes { output: out, z_r, z_d })
    }

    /// Predictions at rule strength `alpha`.
    pub fn predict(&self, x: &Tensor2D, alpha: f64) -> Result<Tensor2D> {
        let mut tape = Tape::new();
        let nodes = self.forward(&mut tape, x, alpha)?;
        Ok(tape.value(nodes.output).clone())
    }

    /// Latent codes `(z_r, z_d)` for export; `z_r` is absent for single-encoder models.
    pub fn embeddings(&self, x: &Tensor2D, alpha: f64) -> Result<(Option<Tensor2D>, Tensor2D)> {
        let mut tape = Tape::new();
        let nodes = self.forward(&mut tape, x, alpha)?;
        Ok((nodes.z_r.map(|z| tape.value(z).clone()), tape.value(nodes.z_d).clone()))
    }
}

/// Merges latent codes on a tape according to `mode`.
pub fn couple_nodes(tape: &mut Tape, z_r: NodeId, z_d: NodeId, alpha: f64, mode: Coupling) -> Result<NodeId> {
    if !tape.value(z_r).same_shape(tape.value(z_d)) {
        return Err(Error::dim(
            "couple",
            format!("{:?}", tape.value(z_r).shape()),
            format!("{:?}", tape.value(z_d).shape()),
        ));
    }
    match mode {
        Coupling::ScaledConcat => {
            let r = tape.scale(z_r, alpha);
            let d = tape.scale(z_d, 1.0 - alpha);
            tape.concat(r, d)
        }
        Coupling::Concat => tape.concat(z_r, z_d),
        Coupling::Add => tape.add(z_r, z_d),
        Coupling::InputConcatAlpha | Coupling::Single => Err(Error::Contract(format!(
            "{mode:?} has no two-code coupling"
        ))),
    }
}

/// Value-level coupling of two latent codes.
pub fn couple(z_r: &Tensor2D, z_d: &Tensor2D, alpha: f64, mode: Coupling) -> Result<Tensor2D> {
    let mut tape = Tape::new();
    let r = tape.constant(z_r.clone());
    let d = tape.constant(z_d.clone());
    let z = couple_nodes(&mut tape, r, d, alpha, mode)?;
    Ok(tape.value(z).clone())
}
