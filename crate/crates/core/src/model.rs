//! The operator encoder-decoder vector field `v_t(z, c)`.
//!
//! The context study is packed: only real observations become tokens, each
//! carrying its subject index. This is equivalent to zero padding with
//! observation masks but does no work on padding.

use serde::{Deserialize, Serialize};

use crate::attention::{
    block_diagonal_mask, cross_op_attn, register_attention, self_op_attn, AttentionMask, KeyGrid,
};
use crate::error::{Error, Result};
use crate::gp::RBFKernel;
use crate::nn::{
    fourier_time_embed, layer_norm, linear, mlp, register_layer_norm, register_mlp, ParamStore,
    Tape, Tensor, Var,
};
use crate::rng::{domain, stream, Rng};
use crate::study::{IndividualRecord, Route, Study};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub f_max: f64,
    pub sigma_min: f64,
    pub gp_variance: f64,
    pub gp_length_scale: f64,
    pub gp_jitter: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 256,
            encoder_layers: 4,
            decoder_layers: 4,
            heads: 4,
            ffn_mult: 4,
            dropout: 0.1,
            f_max: 256.0,
            sigma_min: 1e-4,
            gp_variance: 1e-4,
            gp_length_scale: 1.7e-3,
            gp_jitter: 1e-7,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by the toy pipeline.
    pub fn toy() -> Self {
        Self {
            d: 32,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            ..Self::default()
        }
    }

    /// Smallest configuration used for finite-difference gradient checks.
    pub fn miniature() -> Self {
        Self {
            d: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 4 || self.d % 2 != 0 {
            return Err(Error::validation(format!(
                "hidden size must be even and at least 4, got {}",
                self.d
            )));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::validation(format!(
                "hidden size {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 || self.ffn_mult == 0 {
            return Err(Error::validation(
                "depths and FFN expansion must be at least 1",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.f_max > 1.0) || !(self.sigma_min >= 0.0) || !(self.gp_jitter >= 0.0) {
            return Err(Error::validation(
                "f_max must exceed 1; sigma_min and jitter must be nonnegative",
            ));
        }
        self.kernel().map(|_| ())
    }

    pub fn kernel(&self) -> Result<RBFKernel> {
        RBFKernel::new(self.gp_variance, self.gp_length_scale)
    }
}

/// Per-study scales estimated from the context set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    pub concentration: f64,
    pub time: f64,
    pub dose: f64,
}

impl Scales {
    pub fn norm_time(&self, t: f64) -> f64 {
        t / self.time
    }
    pub fn norm_conc(&self, c: f64) -> f64 {
        c / self.concentration
    }
    pub fn norm_dose(&self, a: f64) -> f64 {
        a / self.dose
    }
    pub fn denorm_time(&self, t: f64) -> f64 {
        t * self.time
    }
    pub fn denorm_conc(&self, c: f64) -> f64 {
        c * self.concentration
    }
}

/// Normalized, packed context study.
#[derive(Debug, Clone)]
pub struct StudyBatch {
    /// `N×4` rows `(τ, y, a, r)`.
    pub tokens: Vec<f64>,
    pub times: Vec<f64>,
    pub subject: Vec<usize>,
    pub num_subjects: usize,
    pub doses: Vec<(f64, Route)>,
    pub scales: Scales,
    pub grid: KeyGrid,
    pub self_mask: AttentionMask,
}

impl StudyBatch {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

pub fn normalize_study(study: &Study) -> Result<StudyBatch> {
    if study.individuals.is_empty() {
        return Err(Error::validation(format!(
            "study `{}` has no context individuals",
            study.study_id
        )));
    }
    let scales = Scales {
        concentration: study.max_concentration(),
        time: study.max_time(),
        dose: study
            .individuals
            .iter()
            .map(|r| r.dose.amount)
            .fold(0.0, f64::max),
    };
    if !(scales.concentration > 0.0) {
        return Err(Error::validation(format!(
            "study `{}` has all-zero concentrations and cannot be normalized",
            study.study_id
        )));
    }
    if !(scales.time > 0.0) || !(scales.dose > 0.0) {
        return Err(Error::validation(format!(
            "study `{}` needs a positive time span and dose",
            study.study_id
        )));
    }
    let n = study.num_observations();
    let mut tokens = Vec::with_capacity(4 * n);
    let mut times = Vec::with_capacity(n);
    let mut subject = Vec::with_capacity(n);
    let mut doses = Vec::with_capacity(study.individuals.len());
    for (s, ind) in study.individuals.iter().enumerate() {
        let a = scales.norm_dose(ind.dose.amount);
        doses.push((a, ind.dose.route));
        for (&t, &c) in ind.times.iter().zip(&ind.concentrations) {
            let tn = scales.norm_time(t);
            tokens.extend_from_slice(&[tn, scales.norm_conc(c), a, ind.dose.route.code()]);
            times.push(tn);
            subject.push(s);
        }
    }
    let valid = vec![true; n];
    let grid = KeyGrid::from_segments(&times, &valid, &subject)?;
    let self_mask = block_diagonal_mask(&subject, &valid);
    Ok(StudyBatch {
        tokens,
        times,
        subject,
        num_subjects: study.individuals.len(),
        doses,
        scales,
        grid,
        self_mask,
    })
}

/// Normalized target grid: prefix slots first, then future slots, sorted.
#[derive(Debug, Clone)]
pub struct TargetState {
    pub times: Vec<f64>,
    pub prefix_len: usize,
    pub dose: f64,
    pub route: Route,
    pub grid: KeyGrid,
    pub self_mask: AttentionMask,
}

impl TargetState {
    pub fn new(times: Vec<f64>, prefix_len: usize, dose: f64, route: Route) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::validation("target grid is empty"));
        }
        if prefix_len > times.len() {
            return Err(Error::validation(format!(
                "prefix length {prefix_len} exceeds grid of {}",
                times.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::validation(
                "target times must be finite and strictly increasing",
            ));
        }
        let valid = vec![true; times.len()];
        let grid = KeyGrid::single(&times, &valid)?;
        let self_mask = AttentionMask::dense(&valid, &valid);
        Ok(Self {
            times,
            prefix_len,
            dose,
            route,
            grid,
            self_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `M_p[j] = 1[τ_j > τ_p]`; all ones without a prefix.
    pub fn prefix_mask(&self) -> Vec<f64> {
        match self.prefix_len {
            0 => vec![1.0; self.len()],
            p => {
                let tp = self.times[p - 1];
                self.times
                    .iter()
                    .map(|&t| if t > tp { 1.0 } else { 0.0 })
                    .collect()
            }
        }
    }
}

/// Target state for a record in the study's normalized units, first
/// `prefix_len` observations as the prefix.
pub fn target_from_record(
    record: &IndividualRecord,
    scales: &Scales,
    prefix_len: usize,
) -> Result<(TargetState, Vec<f64>)> {
    let times = record.times.iter().map(|&t| scales.norm_time(t)).collect();
    let y = record
        .concentrations
        .iter()
        .map(|&c| scales.norm_conc(c))
        .collect();
    let state = TargetState::new(
        times,
        prefix_len,
        scales.norm_dose(record.dose.amount),
        record.dose.route,
    )?;
    Ok((state, y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn register_ffn(
    store: &mut ParamStore,
    name: &str,
    d: usize,
    mult: usize,
    rng: &mut Rng,
) -> Result<()> {
    register_mlp(store, name, &[d, mult * d, d], rng)
}

impl FlowModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[domain::INIT]);
        let d = config.d;
        let mut p = ParamStore::new();
        register_mlp(&mut p, "enc.embed", &[4, d, d, d], &mut rng)?;
        register_layer_norm(&mut p, "enc.embed_ln", d)?;
        for l in 0..config.encoder_layers {
            let b = format!("enc.{l}");
            register_layer_norm(&mut p, &format!("{b}.ln1"), d)?;
            register_attention(&mut p, &format!("{b}.attn"), d, &mut rng)?;
            register_layer_norm(&mut p, &format!("{b}.ln2"), d)?;
            register_ffn(&mut p, &format!("{b}.ffn"), d, config.ffn_mult, &mut rng)?;
        }
        register_layer_norm(&mut p, "enc.ln_f", d)?;
        register_mlp(&mut p, "dec.embed", &[4, d, d, d], &mut rng)?;
        register_layer_norm(&mut p, "dec.embed_ln", d)?;
        for l in 0..config.decoder_layers {
            let b = format!("dec.{l}");
            register_layer_norm(&mut p, &format!("{b}.ln1"), d)?;
            register_attention(&mut p, &format!("{b}.self"), d, &mut rng)?;
            register_layer_norm(&mut p, &format!("{b}.ln2"), d)?;
            register_ffn(&mut p, &format!("{b}.ffn1"), d, config.ffn_mult, &mut rng)?;
            register_layer_norm(&mut p, &format!("{b}.ln3"), d)?;
            register_attention(&mut p, &format!("{b}.cross"), d, &mut rng)?;
            register_layer_norm(&mut p, &format!("{b}.ln4"), d)?;
            register_ffn(&mut p, &format!("{b}.ffn2"), d, config.ffn_mult, &mut rng)?;
        }
        register_layer_norm(&mut p, "dec.ln_f", d)?;
        register_mlp(&mut p, "head", &[d, d, d, 1], &mut rng)?;
        Ok(Self { config, params: p })
    }

    /// Zero the head's final affine map, which makes the field identically zero.
    pub fn zero_head(&mut self) {
        for name in ["head.2.w", "head.2.b"] {
            if let Some(t) = self.params.get_mut(name) {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        if !reference.params.same_layout(&params) {
            return Err(Error::validation(
                "parameters do not match the model configuration",
            ));
        }
        Ok(Self { config, params })
    }

    fn time_embedding(&self, tape: &mut Tape, t: f64) -> Result<Var> {
        let e = fourier_time_embed(t, self.config.d, self.config.f_max)?;
        tape.input(1, self.config.d, e)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: &mut Option<&mut Rng>) -> Result<Var> {
        match rng {
            Some(r) => tape.dropout(x, self.config.dropout, r),
            None => Ok(x),
        }
    }

    fn ffn(&self, tape: &mut Tape, x: Var, name: &str, rng: &mut Option<&mut Rng>) -> Result<Var> {
        let h = linear(tape, x, &format!("{name}.0"), true)?;
        let h = tape.gelu(h);
        let h = self.dropout(tape, h, rng)?;
        linear(tape, h, &format!("{name}.1"), true)
    }

    /// `LN[Φ(D) + t_emb]` for `n×4` observation rows.
    fn embed(&self, tape: &mut Tape, rows: Var, prefix: &str, t_emb: Var) -> Result<Var> {
        let h = mlp(tape, rows, &format!("{prefix}.embed"), 3)?;
        let h = tape.add_row(h, t_emb)?;
        layer_norm(tape, h, &format!("{prefix}.embed_ln"))
    }

    /// Study representation `h^S` (`N×d`).
    pub fn encode<'a>(
        &self,
        tape: &mut Tape<'a>,
        batch: &'a StudyBatch,
        t_emb: Var,
        rng: &mut Option<&mut Rng>,
    ) -> Result<Var> {
        let x = tape.input(batch.len(), 4, batch.tokens.clone())?;
        let mut h = self.embed(tape, x, "enc", t_emb)?;
        for l in 0..self.config.encoder_layers {
            let b = format!("enc.{l}");
            let a = layer_norm(tape, h, &format!("{b}.ln1"))?;
            let a = self_op_attn(
                tape,
                a,
                &format!("{b}.attn"),
                self.config.heads,
                &batch.self_mask,
                &batch.grid,
            )?;
            let a = self.dropout(tape, a, rng)?;
            h = tape.add(h, a)?;
            let f = layer_norm(tape, h, &format!("{b}.ln2"))?;
            let f = self.ffn(tape, f, &format!("{b}.ffn"), rng)?;
            h = tape.add(h, f)?;
            h = tape.add_row(h, t_emb)?;
        }
        layer_norm(tape, h, "enc.ln_f")
    }

    /// Unmasked per-slot velocity (`T×1`).
    #[allow(clippy::too_many_arguments)]
    pub fn decode<'a>(
        &self,
        tape: &mut Tape<'a>,
        target: &'a TargetState,
        z: &[f64],
        h_s: Var,
        batch: &'a StudyBatch,
        cross_mask: &'a AttentionMask,
        t_emb: Var,
        rng: &mut Option<&mut Rng>,
    ) -> Result<Var> {
        let n = target.len();
        if z.len() != n {
            return Err(Error::shape("flow state", &[n], &[z.len()]));
        }
        let rows: Vec<f64> = (0..n)
            .flat_map(|j| [target.times[j], z[j], target.dose, target.route.code()])
            .collect();
        let x = tape.input(n, 4, rows)?;
        let mut g = self.embed(tape, x, "dec", t_emb)?;
        let heads = self.config.heads;
        for l in 0..self.config.decoder_layers {
            let b = format!("dec.{l}");
            let a = layer_norm(tape, g, &format!("{b}.ln1"))?;
            let a = self_op_attn(
                tape,
                a,
                &format!("{b}.self"),
                heads,
                &target.self_mask,
                &target.grid,
            )?;
            let a = self.dropout(tape, a, rng)?;
            g = tape.add(g, a)?;
            let f = layer_norm(tape, g, &format!("{b}.ln2"))?;
            let f = self.ffn(tape, f, &format!("{b}.ffn1"), rng)?;
            g = tape.add(g, f)?;
            let c = layer_norm(tape, g, &format!("{b}.ln3"))?;
            let c = cross_op_attn(
                tape,
                c,
                h_s,
                &format!("{b}.cross"),
                heads,
                cross_mask,
                &batch.grid,
            )?;
            let c = self.dropout(tape, c, rng)?;
            g = tape.add(g, c)?;
            let f = layer_norm(tape, g, &format!("{b}.ln4"))?;
            let f = self.ffn(tape, f, &format!("{b}.ffn2"), rng)?;
            g = tape.add(g, f)?;
            g = tape.add_row(g, t_emb)?;
        }
        let g = layer_norm(tape, g, "dec.ln_f")?;
        mlp(tape, g, "head", 3)
    }

    /// Full masked field on a tape; dropout is active iff `rng` is given.
    pub fn field_on_tape<'a>(
        &self,
        tape: &mut Tape<'a>,
        batch: &'a StudyBatch,
        cross_mask: &'a AttentionMask,
        target: &'a TargetState,
        z: &[f64],
        t: f64,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let t_emb = self.time_embedding(tape, t)?;
        let h_s = self.encode(tape, batch, t_emb, &mut rng)?;
        let v = self.decode(tape, target, z, h_s, batch, cross_mask, t_emb, &mut rng)?;
        tape.mul_rows(v, &target.prefix_mask())
    }

    /// Study representation at flow time `t` in evaluation mode.
    pub fn encode_context(&self, batch: &StudyBatch, t: f64) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params);
        let t_emb = self.time_embedding(&mut tape, t)?;
        let h = self.encode(&mut tape, batch, t_emb, &mut None)?;
        tape.check_finite()?;
        Ok(Tensor::matrix(
            batch.len(),
            self.config.d,
            tape.value(h).to_vec(),
        ))
    }

    /// Masked field for one state given a precomputed `h^S`, evaluation mode.
    pub fn field_with_context(
        &self,
        batch: &StudyBatch,
        cross_mask: &AttentionMask,
        h_s: &Tensor,
        target: &TargetState,
        z: &[f64],
        t: f64,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let t_emb = self.time_embedding(&mut tape, t)?;
        let h = tape.input(h_s.rows(), h_s.cols(), h_s.data.clone())?;
        let v = self.decode(&mut tape, target, z, h, batch, cross_mask, t_emb, &mut None)?;
        tape.check_finite()?;
        let mask = target.prefix_mask();
        Ok(tape
            .value(v)
            .iter()
            .zip(&mask)
            .map(|(a, m)| a * m)
            .collect())
    }

    /// Masked field `v_t(z, c)` in evaluation mode.
    pub fn vector_field(
        &self,
        batch: &StudyBatch,
        target: &TargetState,
        z: &[f64],
        t: f64,
    ) -> Result<Vec<f64>> {
        let h_s = self.encode_context(batch, t)?;
        let cross = cross_mask_for(batch, target.len());
        self.field_with_context(batch, &cross, &h_s, target, z, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub loss: f64,
}

/// Relative error with an absolute floor so that coordinates whose gradient
/// is at rounding level do not dominate.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Central finite differences of the masked flow-matching loss against the
/// tape gradient for every parameter coordinate, dropout off.
pub fn gradient_check(config: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    use crate::pksim::{simulate_study, MetaStudyPrior};
    use rand::Rng as _;

    let model = FlowModel::new(config.clone(), seed)?;
    let study = simulate_study(&MetaStudyPrior::default(), "gradcheck", seed)?;
    // keep the check small: three context subjects
    let mut small = study.clone();
    small.individuals.truncate(4);
    let target_rec = small.individuals.pop().expect("four individuals");
    let batch = normalize_study(&small)?;
    let mut rng = stream(seed, &[domain::EVAL, 1]);
    let prefix = 2.min(target_rec.len() - 1);
    let (target, y) = target_from_record(&target_rec, &batch.scales, prefix)?;
    let cross = cross_mask_for(&batch, target.len());
    let z: Vec<f64> = y.iter().map(|v| v + 0.1 * rng.random::<f64>()).collect();
    let vel: Vec<f64> = y.iter().map(|v| v * 0.5 - 0.2).collect();
    let weight = target.prefix_mask();
    let t = 0.37;

    let loss_of = |params: &ParamStore| -> Result<f64> {
        let m = FlowModel {
            config: config.clone(),
            params: params.clone(),
        };
        let mut tape = Tape::new(&m.params);
        let v = m.field_on_tape(&mut tape, &batch, &cross, &target, &z, t, None)?;
        let l = tape.masked_mse(v, vel.clone(), weight.clone())?;
        Ok(tape.scalar(l))
    };
    let mut tape = Tape::new(&model.params);
    let v = model.field_on_tape(&mut tape, &batch, &cross, &target, &z, t, None)?;
    let l = tape.masked_mse(v, vel.clone(), weight.clone())?;
    tape.check_finite()?;
    let loss = tape.scalar(l);
    let grads = tape.backward(l)?;

    let h = 1e-5;
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
        loss,
    };
    let mut work = model.params.clone();
    for (pi, (name, tensor)) in model.params.iter().enumerate() {
        for j in 0..tensor.len() {
            let orig = tensor.data[j];
            work.by_index_mut(pi).data[j] = orig + h;
            let up = loss_of(&work)?;
            work.by_index_mut(pi).data[j] = orig - h;
            let dn = loss_of(&work)?;
            work.by_index_mut(pi).data[j] = orig;
            let fd = (up - dn) / (2.0 * h);
            let an = grads.params.by_index(pi).data[j];
            let err = relative_error(fd, an);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = format!("{name}[{j}]");
            }
        }
    }
    Ok(report)
}

/// Every one of `rows` target queries sees every context observation.
pub fn cross_mask_for(batch: &StudyBatch, rows: usize) -> AttentionMask {
    AttentionMask::dense(&vec![true; rows], &vec![true; batch.len()])
}
