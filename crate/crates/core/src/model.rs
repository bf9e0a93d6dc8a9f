//! Encoder, feature normalization, classifier and projection head, plus the
//! EMA shadow used for evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const PROJ_BIAS: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub classes: usize,
    pub feature_norm: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: `input → [64, 64] → 32`, projection `32 → 32 → 8`.
    pub fn for_data(input_dim: usize, classes: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden_dims: vec![64, 64],
            feature_dim: 32,
            proj_hidden: 32,
            proj_dim: 8,
            classes,
            feature_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.input_dim, self.feature_dim, self.proj_hidden, self.proj_dim, self.classes];
        if dims.contains(&0) || self.hidden_dims.contains(&0) {
            return Err(Error::Parameter(format!("model dimensions must be positive: {self:?}")));
        }
        if self.proj_dim >= self.feature_dim {
            return Err(Error::Parameter(format!(
                "projection dim {} must be smaller than feature dim {}",
                self.proj_dim, self.feature_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Tensor,
    /// `1 × out`
    pub bias: Tensor,
}

impl Linear {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..limit));
        Linear {
            weight,
            bias: Tensor::zeros(1, fan_out),
        }
    }
}

/// Multilayer perceptron producing the feature `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Linear>,
}

impl EncoderParams {
    /// Zero-layer encoder: `h == x`.
    pub fn identity() -> Self {
        EncoderParams { layers: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    /// `feature_dim × C`
    pub classifier: Tensor,
    pub proj1: Linear,
    pub proj2: Linear,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

/// All learnable tensors of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub heads: Heads,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut fan_in = config.input_dim;
        for &width in config.hidden_dims.iter().chain(std::iter::once(&config.feature_dim)) {
            layers.push(Linear::glorot(fan_in, width, &mut rng));
            fan_in = width;
        }
        let limit = (6.0 / (config.feature_dim + config.classes) as f64).sqrt();
        let classifier = Tensor::from_fn(config.feature_dim, config.classes, |_, _| {
            rng.random_range(-limit..limit)
        });
        let mut proj1 = Linear::glorot(config.feature_dim, config.proj_hidden, &mut rng);
        // keeps embeddings away from the origin when the input or every
        // hidden unit is zero
        proj1.bias = Tensor::full(1, config.proj_hidden, PROJ_BIAS);
        let mut proj2 = Linear::glorot(config.proj_hidden, config.proj_dim, &mut rng);
        proj2.bias = Tensor::full(1, config.proj_dim, PROJ_BIAS);
        Ok(ModelParams {
            encoder: EncoderParams { layers },
            heads: Heads {
                classifier,
                proj1,
                proj2,
                ln_gain: Tensor::full(1, config.feature_dim, 1.0),
                ln_bias: Tensor::zeros(1, config.feature_dim),
            },
        })
    }

    /// Parameters in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.layers.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &l.weight));
            out.push((format!("encoder.{i}.bias"), &l.bias));
        }
        let h = &self.heads;
        out.push(("norm.gain".to_string(), &h.ln_gain));
        out.push(("norm.bias".to_string(), &h.ln_bias));
        out.push(("classifier.weight".to_string(), &h.classifier));
        out.push(("proj.0.weight".to_string(), &h.proj1.weight));
        out.push(("proj.0.bias".to_string(), &h.proj1.bias));
        out.push(("proj.1.weight".to_string(), &h.proj2.weight));
        out.push(("proj.1.bias".to_string(), &h.proj2.bias));
        out
    }

    /// Mutable view in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.encoder.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        let h = &mut self.heads;
        out.push(&mut h.ln_gain);
        out.push(&mut h.ln_bias);
        out.push(&mut h.classifier);
        out.push(&mut h.proj1.weight);
        out.push(&mut h.proj1.bias);
        out.push(&mut h.proj2.weight);
        out.push(&mut h.proj2.bias);
        out
    }

    /// Whether weight decay applies to each tensor, in [`ModelParams::named`] order.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.named().iter().map(|(n, _)| !n.starts_with("norm.")).collect()
    }

    /// Registers every tensor on `tape`, as gradient-receiving leaves when
    /// `trainable`.
    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let encoder = self
            .encoder
            .layers
            .iter()
            .map(|l| (leaf(&l.weight), leaf(&l.bias)))
            .collect();
        let h = &self.heads;
        ModelVars {
            encoder,
            ln_gain: leaf(&h.ln_gain),
            ln_bias: leaf(&h.ln_bias),
            classifier: leaf(&h.classifier),
            proj1: (leaf(&h.proj1.weight), leaf(&h.proj1.bias)),
            proj2: (leaf(&h.proj2.weight), leaf(&h.proj2.bias)),
        }
    }

    pub fn assert_same_layout(&self, other: &ModelParams) -> Result<()> {
        let (a, b) = (self.named(), other.named());
        if a.len() != b.len() {
            return Err(Error::Shape {
                op: "model layout",
                left: vec![a.len()],
                right: vec![b.len()],
            });
        }
        for ((_, ta), (_, tb)) in a.iter().zip(&b) {
            ta.same_shape(tb, "model layout")?;
        }
        Ok(())
    }
}

/// Tape handles mirroring [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: Vec<(Var, Var)>,
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub classifier: Var,
    pub proj1: (Var, Var),
    pub proj2: (Var, Var),
}

impl ModelVars {
    /// Inverse of [`ModelVars::ordered`] for a model with `encoder_layers` layers.
    pub fn from_ordered(vars: &[Var], encoder_layers: usize) -> Result<Self> {
        let expected = 2 * encoder_layers + 7;
        if vars.len() != expected {
            return Err(Error::Contract(format!(
                "expected {expected} parameter handles, got {}",
                vars.len()
            )));
        }
        let encoder = vars[..2 * encoder_layers].chunks(2).map(|c| (c[0], c[1])).collect();
        let h = &vars[2 * encoder_layers..];
        Ok(ModelVars {
            encoder,
            ln_gain: h[0],
            ln_bias: h[1],
            classifier: h[2],
            proj1: (h[3], h[4]),
            proj2: (h[5], h[6]),
        })
    }

    /// Handles in [`ModelParams::named`] order.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(w, b) in &self.encoder {
            out.push(w);
            out.push(b);
        }
        out.extend([
            self.ln_gain,
            self.ln_bias,
            self.classifier,
            self.proj1.0,
            self.proj1.1,
            self.proj2.0,
            self.proj2.1,
        ]);
        out
    }
}

/// Everything one forward pass produces for a batch of one view.
#[derive(Clone, Copy, Debug)]
pub struct ViewOutputs {
    pub features: Var,
    pub normalized: Var,
    pub probs: Var,
    pub embedding: Var,
}

/// `h = MLP(x)` with relu between layers and none after the last.
pub fn forward_features(tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<Var> {
    let mut h = x;
    let n = vars.encoder.len();
    for (i, &(w, b)) in vars.encoder.iter().enumerate() {
        let lin = tape.matmul(h, w)?;
        h = tape.add_row(lin, b)?;
        if i + 1 < n {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Layer normalization of `h`; the identity when `enabled` is false.
pub fn feature_normalize(tape: &mut Tape, vars: &ModelVars, h: Var, enabled: bool) -> Result<Var> {
    if enabled {
        tape.layer_norm(h, vars.ln_gain, vars.ln_bias, LAYER_NORM_EPS)
    } else {
        Ok(h)
    }
}

/// `softmax(ĥ · W)`.
pub fn classify(tape: &mut Tape, vars: &ModelVars, normalized: Var) -> Result<Var> {
    let logits = tape.matmul(normalized, vars.classifier)?;
    tape.softmax_rows(logits, 1.0)
}

/// Two-layer relu projection followed by row-wise L2 normalization.
pub fn project(tape: &mut Tape, vars: &ModelVars, normalized: Var) -> Result<Var> {
    let (w1, b1) = vars.proj1;
    let (w2, b2) = vars.proj2;
    let a = tape.matmul(normalized, w1)?;
    let a = tape.add_row(a, b1)?;
    let a = tape.relu(a);
    let a = tape.matmul(a, w2)?;
    let a = tape.add_row(a, b2)?;
    tape.l2_normalize_rows(a)
}

pub fn forward_view(tape: &mut Tape, vars: &ModelVars, x: Var, feature_norm: bool) -> Result<ViewOutputs> {
    let features = forward_features(tape, vars, x)?;
    let normalized = feature_normalize(tape, vars, features, feature_norm)?;
    let probs = classify(tape, vars, normalized)?;
    let embedding = project(tape, vars, normalized)?;
    Ok(ViewOutputs {
        features,
        normalized,
        probs,
        embedding,
    })
}

/// Class probabilities for `x` without recording gradients.
pub fn predict(params: &ModelParams, x: &Tensor, feature_norm: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.attach(&mut tape, false);
    let xv = tape.constant(x.clone());
    let h = forward_features(&mut tape, &vars, xv)?;
    let hn = feature_normalize(&mut tape, &vars, h, feature_norm)?;
    let p = classify(&mut tape, &vars, hn)?;
    Ok(tape.value(p).clone())
}

/// Exponential moving average of the live parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaShadow {
    pub params: ModelParams,
    pub decay: f64,
}

impl EmaShadow {
    pub fn new(live: &ModelParams, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Parameter(format!("EMA decay must be in (0, 1), got {decay}")));
        }
        Ok(EmaShadow {
            params: live.clone(),
            decay,
        })
    }

    /// `shadow ← decay · shadow + (1 − decay) · live`.
    pub fn update(&mut self, live: &ModelParams) -> Result<()> {
        self.params.assert_same_layout(live)?;
        let d = self.decay;
        let live_tensors: Vec<&Tensor> = live.named().into_iter().map(|(_, t)| t).collect();
        for (s, l) in self.params.tensors_mut().into_iter().zip(live_tensors) {
            for (sv, lv) in s.data_mut().iter_mut().zip(l.data()) {
                *sv = d * *sv + (1.0 - d) * lv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_many, DEFAULT_STEP};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            hidden_dims: vec![5],
            feature_dim: 4,
            proj_hidden: 4,
            proj_dim: 2,
            classes: 3,
            feature_norm: true,
        }
    }

    #[test]
    fn identity_encoder_passes_input_through() {
        let mut tape = Tape::new();
        let params = ModelParams {
            encoder: EncoderParams::identity(),
            heads: ModelParams::init(&tiny_config(), 0).unwrap().heads,
        };
        let vars = params.attach(&mut tape, true);
        let x = tape.constant(Tensor::from_rows(&[[1.0, -2.0, 3.0]]).unwrap());
        let h = forward_features(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(h), tape.value(x));
    }

    #[test]
    fn single_identity_layer_on_nonnegative_input() {
        let mut params = ModelParams::init(&tiny_config(), 0).unwrap();
        params.encoder.layers = vec![Linear {
            weight: Tensor::identity(3),
            bias: Tensor::zeros(1, 3),
        }];
        let mut tape = Tape::new();
        let vars = params.attach(&mut tape, true);
        let x = tape.constant(Tensor::from_rows(&[[0.0, 2.0, 3.5]]).unwrap());
        let h = forward_features(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(h), tape.value(x));
    }

    #[test]
    fn classify_examples() {
        let mut params = ModelParams::init(&tiny_config(), 1).unwrap();
        params.heads.classifier = Tensor::zeros(4, 3);
        let p = predict(&params, &Tensor::from_rows(&[[0.2, 0.1, -1.0]]).unwrap(), true).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let mut tape = Tape::new();
        let vars = ModelParams::init(&tiny_config(), 1).unwrap().attach(&mut tape, false);
        let mut vars = vars;
        vars.classifier = tape.constant(Tensor::identity(2));
        let hn = tape.constant(Tensor::row(&[3f64.ln(), 0.0]));
        let p = classify(&mut tape, &vars, hn).unwrap();
        assert!((tape.value(p).get(0, 0) - 0.75).abs() < 1e-15);
        assert!((tape.value(p).get(0, 1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn feature_normalize_off_is_identity() {
        let params = ModelParams::init(&tiny_config(), 2).unwrap();
        let mut tape = Tape::new();
        let vars = params.attach(&mut tape, true);
        let h = tape.constant(Tensor::from_rows(&[[1.0, 5.0, -2.0, 0.5]]).unwrap());
        let out = feature_normalize(&mut tape, &vars, h, false).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn projection_is_unit_and_deterministic() {
        let params = ModelParams::init(&tiny_config(), 3).unwrap();
        let mut tape = Tape::new();
        let vars = params.attach(&mut tape, true);
        let x = tape.constant(Tensor::from_rows(&[[0.3, -0.4, 1.0], [0.3, -0.4, 1.0]]).unwrap());
        let out = forward_view(&mut tape, &vars, x, true).unwrap();
        let z = tape.value(out.embedding);
        for r in z.row_iter() {
            assert!((crate::tensor::norm(r) - 1.0).abs() < 1e-12);
        }
        assert_eq!(z.row_slice(0), z.row_slice(1));
    }

    #[test]
    fn encoder_and_projection_gradients_match_finite_differences() {
        let config = tiny_config();
        let params = ModelParams::init(&config, 4).unwrap();
        let x = Tensor::from_rows(&[[0.3, -0.4, 1.0], [1.1, 0.2, -0.5]]).unwrap();
        let inputs: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
        let target = Tensor::from_rows(&[[0.2, 0.5, 0.3], [1.0, 0.0, 0.0]]).unwrap();
        let err = grad_check_many(
            |tape, vs| {
                let vars = vars_from_slice(vs, 2);
                let xv = tape.constant(x.clone());
                let out = forward_view(tape, &vars, xv, true)?;
                let t = tape.constant(target.clone());
                let ce = tape.cross_entropy_rows(t, out.probs)?;
                let zsum = tape.sum(out.embedding);
                let zs = tape.mul(zsum, zsum)?;
                let hs = tape.mean(out.features);
                let a = tape.add(ce, zs)?;
                tape.add(a, hs)
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    fn vars_from_slice(vs: &[Var], layers: usize) -> ModelVars {
        let encoder = (0..layers).map(|i| (vs[2 * i], vs[2 * i + 1])).collect();
        let o = 2 * layers;
        ModelVars {
            encoder,
            ln_gain: vs[o],
            ln_bias: vs[o + 1],
            classifier: vs[o + 2],
            proj1: (vs[o + 3], vs[o + 4]),
            proj2: (vs[o + 5], vs[o + 6]),
        }
    }

    #[test]
    fn ema_examples() {
        let live = ModelParams::init(&tiny_config(), 5).unwrap();
        let mut ema = EmaShadow::new(&live, 0.999).unwrap();
        ema.update(&live).unwrap();
        assert_eq!(ema.params, live);

        let mut zero = live.clone();
        zero.tensors_mut().into_iter().for_each(|t| t.data_mut().fill(0.0));
        let mut one = live.clone();
        one.tensors_mut().into_iter().for_each(|t| t.data_mut().fill(1.0));
        let mut ema = EmaShadow::new(&zero, 0.9).unwrap();
        ema.update(&one).unwrap();
        for (_, t) in ema.params.named() {
            assert!(t.data().iter().all(|v| (v - 0.1).abs() < 1e-15));
        }

        // Geometric contraction towards a constant target.
        let v = 2.5;
        let mut target = live.clone();
        target.tensors_mut().into_iter().for_each(|t| t.data_mut().fill(v));
        let mut ema = EmaShadow::new(&zero, 0.9).unwrap();
        for _ in 0..7 {
            ema.update(&target).unwrap();
        }
        let expected = 0.9f64.powi(7) * v;
        for (_, t) in ema.params.named() {
            assert!(t.data().iter().all(|x| ((v - x) - expected).abs() < 1e-12));
        }

        assert!(EmaShadow::new(&live, 1.0).is_err());
        let mut other = ModelConfig::for_data(2, 2);
        other.hidden_dims = vec![3];
        let mismatched = ModelParams::init(&other, 0).unwrap();
        assert!(ema.update(&mismatched).is_err());
    }

    #[test]
    fn invalid_projection_width_rejected() {
        let mut c = tiny_config();
        c.proj_dim = 4;
        assert!(ModelParams::init(&c, 0).is_err());
    }
}
