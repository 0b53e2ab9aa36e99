//! Time-conditioned MLP score model with hand-written reverse mode.
//!
//! Input is `[y, s, sin(2^j pi s), cos(2^j pi s) for j < k]`, hidden layers
//! use a smooth activation and the output layer is linear. All parameters
//! live in one flat vector (per layer: weight `out x in` row-major, then
//! bias), which is also the layout of [`ParamGrad`] and of the optimizer
//! state.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_domain, Error, Result};
use crate::field::VectorField;
use crate::rng::{fill_normal, seeded};
use crate::vp_sde::VpSde;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `x * sigmoid(x)`.
    #[default]
    Silu,
    Tanh,
}

impl Activation {
    /// `(act(x), act'(x), act''(x))`.
    #[inline]
    fn eval3(self, x: f64) -> (f64, f64, f64) {
        match self {
            Activation::Silu => {
                let sg = 1.0 / (1.0 + (-x).exp());
                let d1 = sg * (1.0 + x * (1.0 - sg));
                let d2 = sg * (1.0 - sg) * (2.0 + x * (1.0 - 2.0 * sg));
                (x * sg, d1, d2)
            }
            Activation::Tanh => {
                let t = x.tanh();
                let d1 = 1.0 - t * t;
                (t, d1, -2.0 * t * d1)
            }
        }
    }

    #[inline]
    fn eval2(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Silu => {
                let sg = 1.0 / (1.0 + (-x).exp());
                (x * sg, sg * (1.0 + x * (1.0 - sg)))
            }
            Activation::Tanh => {
                let t = x.tanh();
                (t, 1.0 - t * t)
            }
        }
    }
}

/// What the last layer represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// The output is the score itself.
    #[default]
    Score,
    /// The output is the drift `a = g(s) * score`; the score is `output / g(s)`.
    Drift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_time_features")]
    pub time_features: usize,
    #[serde(default)]
    pub activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}

fn default_time_features() -> usize {
    6
}

impl NetConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            hidden: default_hidden(),
            time_features: default_time_features(),
            activation: Activation::Silu,
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.dim + 1 + 2 * self.time_features];
        w.extend_from_slice(&self.hidden);
        w.push(self.dim);
        w
    }
}

/// Gradient with respect to every parameter, in the network's flat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub values: Vec<f64>,
}

impl ParamGrad {
    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    pub fn add_assign(&mut self, other: &ParamGrad) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.values.iter_mut().for_each(|v| *v *= c);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSpec {
    fan_in: usize,
    fan_out: usize,
    w_off: usize,
    b_off: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    widths: Vec<usize>,
    activation: Activation,
    time_features: usize,
    output: OutputKind,
    sde: VpSde,
    params: Vec<f64>,
}

/// Activations kept from a forward pass: `pre[l]` are pre-activations of
/// layer `l`, `post[l]` its inputs (so `post[0]` is the feature vector).
struct Tape {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ScoreNet {
    /// Zero-initialized network of the given widths.
    pub fn zeros(
        widths: Vec<usize>,
        time_features: usize,
        activation: Activation,
        output: OutputKind,
        sde: VpSde,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "layer widths must be >= 2 positive entries, got {widths:?}"
            )));
        }
        let d = *widths.last().expect("non-empty");
        if widths[0] != d + 1 + 2 * time_features {
            return Err(Error::InvalidParameter(format!(
                "input width {} must equal dim {d} + 1 + 2 * {time_features}",
                widths[0]
            )));
        }
        sde.validate()?;
        let n: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            widths,
            activation,
            time_features,
            output,
            sde,
            params: vec![0.0; n],
        })
    }

    /// Weights drawn `N(0, 1/fan_in)`, biases zero.
    pub fn init(cfg: &NetConfig, output: OutputKind, sde: VpSde, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(cfg.widths(), cfg.time_features, cfg.activation, output, sde)?;
        let mut rng = seeded(seed);
        for spec in net.layers() {
            let w = &mut net.params[spec.w_off..spec.b_off];
            fill_normal(&mut rng, w);
            let scale = 1.0 / (spec.fan_in as f64).sqrt();
            w.iter_mut().for_each(|v| *v *= scale);
        }
        Ok(net)
    }

    fn layers(&self) -> Vec<LayerSpec> {
        let mut off = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let spec = LayerSpec {
                    fan_in: w[0],
                    fan_out: w[1],
                    w_off: off,
                    b_off: off + w[0] * w[1],
                };
                off = spec.b_off + w[1];
                spec
            })
            .collect()
    }

    pub fn dim(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn time_features(&self) -> usize {
        self.time_features
    }

    pub fn output_kind(&self) -> OutputKind {
        self.output
    }

    pub fn sde(&self) -> &VpSde {
        &self.sde
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// `(name, shape, offset)` for every parameter group.
    pub fn param_groups(&self) -> Vec<(String, Vec<usize>, usize)> {
        self.layers()
            .iter()
            .enumerate()
            .flat_map(|(l, s)| {
                [
                    (format!("layer{l}.weight"), vec![s.fan_out, s.fan_in], s.w_off),
                    (format!("layer{l}.bias"), vec![s.fan_out], s.b_off),
                ]
            })
            .collect()
    }

    fn features(&self, y: &[f64], s: f64) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.widths[0]);
        f.extend_from_slice(y);
        f.push(s);
        let mut freq = PI;
        for _ in 0..self.time_features {
            f.push((freq * s).sin());
            f.push((freq * s).cos());
            freq *= 2.0;
        }
        f
    }

    /// Multiplier from the raw output to the score.
    #[inline]
    fn output_scale(&self, s: f64) -> f64 {
        match self.output {
            OutputKind::Score => 1.0,
            OutputKind::Drift => 1.0 / self.sde.g_unchecked(s),
        }
    }

    fn forward_tape(&self, y: &[f64], s: f64) -> (Vec<f64>, Tape) {
        let layers = self.layers();
        let mut post = vec![self.features(y, s)];
        let mut pre = Vec::with_capacity(layers.len());
        for (l, spec) in layers.iter().enumerate() {
            let z = self.affine(spec, &post[l]);
            if l + 1 < layers.len() {
                let h = z.iter().map(|&v| self.activation.eval2(v).0).collect();
                post.push(h);
            }
            pre.push(z);
        }
        let out = pre.last().expect("at least one layer").clone();
        (out, Tape { pre, post })
    }

    fn affine(&self, spec: &LayerSpec, x: &[f64]) -> Vec<f64> {
        let w = &self.params[spec.w_off..spec.b_off];
        let b = &self.params[spec.b_off..spec.b_off + spec.fan_out];
        (0..spec.fan_out)
            .map(|o| {
                let row = &w[o * spec.fan_in..(o + 1) * spec.fan_in];
                b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect()
    }

    /// Raw network output (the drift in `Drift` mode).
    pub fn raw_forward(&self, y: &[f64], s: f64) -> Result<Vec<f64>> {
        check_dim(self.dim(), y.len())?;
        check_domain("s", s, 0.0, self.sde.horizon)?;
        Ok(self.forward_tape(y, s).0)
    }

    /// Score estimate `s_theta(y, s)`.
    pub fn forward(&self, y: &[f64], s: f64) -> Result<Vec<f64>> {
        let mut out = self.raw_forward(y, s)?;
        let c = self.output_scale(s);
        out.iter_mut().for_each(|v| *v *= c);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("score net output at s={s}"),
            });
        }
        Ok(out)
    }

    /// Backward pass from a cotangent on the raw output. Writes the input
    /// gradient (spatial part) into `ygrad` and, when given, accumulates
    /// parameter gradients into `pgrad`.
    fn backward(&self, tape: &Tape, cot: &[f64], mut pgrad: Option<&mut [f64]>, ygrad: &mut [f64]) {
        let layers = self.layers();
        let mut delta = cot.to_vec();
        for l in (0..layers.len()).rev() {
            let spec = &layers[l];
            if l + 1 < layers.len() {
                for (dz, &z) in delta.iter_mut().zip(&tape.pre[l]) {
                    *dz *= self.activation.eval2(z).1;
                }
            }
            let x = &tape.post[l];
            if let Some(g) = pgrad.as_deref_mut() {
                for o in 0..spec.fan_out {
                    let row = &mut g[spec.w_off + o * spec.fan_in..spec.w_off + (o + 1) * spec.fan_in];
                    for (r, xi) in row.iter_mut().zip(x) {
                        *r += delta[o] * xi;
                    }
                    g[spec.b_off + o] += delta[o];
                }
            }
            let w = &self.params[spec.w_off..spec.b_off];
            let mut prev = vec![0.0; spec.fan_in];
            for o in 0..spec.fan_out {
                let row = &w[o * spec.fan_in..(o + 1) * spec.fan_in];
                for (p, wi) in prev.iter_mut().zip(row) {
                    *p += delta[o] * wi;
                }
            }
            delta = prev;
        }
        ygrad.copy_from_slice(&delta[..self.dim()]);
    }

    /// Gradients of `cotangent . s_theta(y, s)` with respect to the
    /// parameters and to `y`.
    pub fn vjp(&self, y: &[f64], s: f64, cotangent: &[f64]) -> Result<(ParamGrad, Vec<f64>)> {
        check_dim(self.dim(), y.len())?;
        check_dim(self.dim(), cotangent.len())?;
        check_domain("s", s, 0.0, self.sde.horizon)?;
        let mut pgrad = ParamGrad::zeros(self.num_params());
        let mut ygrad = vec![0.0; self.dim()];
        self.accumulate_vjp(y, s, cotangent, &mut pgrad, &mut ygrad);
        if !pgrad.is_finite() || ygrad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("score net vjp at s={s}"),
            });
        }
        Ok((pgrad, ygrad))
    }

    /// Adds the parameter gradient of `cotangent . s_theta(y, s)` into
    /// `pgrad`; no checks, for training loops.
    pub fn accumulate_vjp(
        &self,
        y: &[f64],
        s: f64,
        cotangent: &[f64],
        pgrad: &mut ParamGrad,
        ygrad: &mut [f64],
    ) -> Vec<f64> {
        let (raw, tape) = self.forward_tape(y, s);
        let c = self.output_scale(s);
        let cot: Vec<f64> = cotangent.iter().map(|v| v * c).collect();
        self.backward(&tape, &cot, Some(&mut pgrad.values), ygrad);
        raw.into_iter().map(|v| v * c).collect()
    }

    /// Parameter gradient of `c . s_theta(y, s) + v . (J(y, s) v)`, the
    /// reverse-over-forward pass behind exact sliced score matching
    /// gradients. Returns `(s_theta(y, s), J v)`.
    pub fn tangent_vjp(
        &self,
        y: &[f64],
        s: f64,
        v: &[f64],
        c: &[f64],
        w_tangent: f64,
        pgrad: &mut ParamGrad,
    ) -> (Vec<f64>, Vec<f64>) {
        let layers = self.layers();
        let nl = layers.len();
        let scale = self.output_scale(s);
        // forward with tangents
        let mut xs = vec![self.features(y, s)];
        let mut dxs = {
            let mut t = vec![0.0; self.widths[0]];
            t[..self.dim()].copy_from_slice(v);
            vec![t]
        };
        let mut zs = Vec::with_capacity(nl);
        let mut dzs = Vec::with_capacity(nl);
        for (l, spec) in layers.iter().enumerate() {
            let z = self.affine(spec, &xs[l]);
            let w = &self.params[spec.w_off..spec.b_off];
            let dz: Vec<f64> = (0..spec.fan_out)
                .map(|o| {
                    let row = &w[o * spec.fan_in..(o + 1) * spec.fan_in];
                    row.iter().zip(&dxs[l]).map(|(a, b)| a * b).sum()
                })
                .collect();
            if l + 1 < nl {
                let mut h = Vec::with_capacity(z.len());
                let mut dh = Vec::with_capacity(z.len());
                for (zi, dzi) in z.iter().zip(&dz) {
                    let (a, a1) = self.activation.eval2(*zi);
                    h.push(a);
                    dh.push(a1 * dzi);
                }
                xs.push(h);
                dxs.push(dh);
            }
            zs.push(z);
            dzs.push(dz);
        }
        let out: Vec<f64> = zs[nl - 1].iter().map(|o| o * scale).collect();
        let jv: Vec<f64> = dzs[nl - 1].iter().map(|o| o * scale).collect();

        // reverse over both primal and tangent graphs
        let mut bar_z: Vec<f64> = c.iter().map(|ci| ci * scale).collect();
        let mut bar_dz: Vec<f64> = v.iter().map(|vi| w_tangent * vi * scale).collect();
        for l in (0..nl).rev() {
            let spec = &layers[l];
            if l + 1 < nl {
                for i in 0..spec.fan_out {
                    let (_, a1, a2) = self.activation.eval3(zs[l][i]);
                    let bh = bar_z[i];
                    let bdh = bar_dz[i];
                    bar_z[i] = bh * a1 + bdh * a2 * dzs[l][i];
                    bar_dz[i] = bdh * a1;
                }
            }
            let g = &mut pgrad.values;
            for o in 0..spec.fan_out {
                let base = spec.w_off + o * spec.fan_in;
                for i in 0..spec.fan_in {
                    g[base + i] += bar_z[o] * xs[l][i] + bar_dz[o] * dxs[l][i];
                }
                g[spec.b_off + o] += bar_z[o];
            }
            if l == 0 {
                break;
            }
            let w = &self.params[spec.w_off..spec.b_off];
            let mut pz = vec![0.0; spec.fan_in];
            let mut pdz = vec![0.0; spec.fan_in];
            for o in 0..spec.fan_out {
                let row = &w[o * spec.fan_in..(o + 1) * spec.fan_in];
                for i in 0..spec.fan_in {
                    pz[i] += bar_z[o] * row[i];
                    pdz[i] += bar_dz[o] * row[i];
                }
            }
            bar_z = pz;
            bar_dz = pdz;
        }
        (out, jv)
    }

    /// Exact divergence of the score from `d` backward passes.
    pub fn divergence_exact(&self, y: &[f64], s: f64) -> Result<f64> {
        check_dim(self.dim(), y.len())?;
        check_domain("s", s, 0.0, self.sde.horizon)?;
        Ok(VectorField::divergence(self, y, s))
    }

    /// Hutchinson divergence of the score with Rademacher probes.
    pub fn divergence_hutchinson(
        &self,
        y: &[f64],
        s: f64,
        probes: usize,
        rng: &mut crate::rng::Rng,
    ) -> Result<(f64, f64)> {
        check_dim(self.dim(), y.len())?;
        check_domain("s", s, 0.0, self.sde.horizon)?;
        if probes == 0 {
            return Err(Error::InvalidParameter("probes must be >= 1".into()));
        }
        Ok(crate::field::hutchinson(self, y, s, probes, rng))
    }

    pub fn to_checkpoint(&self, config_hash: Option<String>) -> Checkpoint {
        let params = self
            .param_groups()
            .into_iter()
            .map(|(name, shape, off)| {
                let n: usize = shape.iter().product();
                let data = self.params[off..off + n].to_vec();
                (name, ParamArray { shape, data })
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            widths: self.widths.clone(),
            activation: self.activation,
            time_features: self.time_features,
            output: self.output,
            sde: self.sde,
            config_hash,
            params,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!("unknown checkpoint format {:?}", ck.format)));
        }
        let mut net = Self::zeros(ck.widths.clone(), ck.time_features, ck.activation, ck.output, ck.sde)?;
        for (name, shape, off) in net.param_groups() {
            let arr = ck
                .params
                .get(&name)
                .ok_or_else(|| Error::Parse(format!("checkpoint missing {name}")))?;
            if arr.shape != shape {
                return Err(Error::Parse(format!(
                    "{name}: shape {:?} does not match {:?}",
                    arr.shape, shape
                )));
            }
            net.params[off..off + arr.data.len()].copy_from_slice(&arr.data);
        }
        if ck.params.len() != net.param_groups().len() {
            return Err(Error::Parse("checkpoint has unexpected parameter groups".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path, config_hash: Option<String>) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint(config_hash))
            .map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Ok((Self::from_checkpoint(&ck)?, ck))
    }
}

impl VectorField for ScoreNet {
    fn dim(&self) -> usize {
        ScoreNet::dim(self)
    }

    fn eval_into(&self, y: &[f64], s: f64, out: &mut [f64]) {
        let (raw, _) = self.forward_tape(y, s);
        let c = self.output_scale(s);
        for (o, r) in out.iter_mut().zip(raw) {
            *o = c * r;
        }
    }

    fn vjp_into(&self, y: &[f64], s: f64, v: &[f64], out: &mut [f64]) {
        let (_, tape) = self.forward_tape(y, s);
        let c = self.output_scale(s);
        let cot: Vec<f64> = v.iter().map(|x| x * c).collect();
        self.backward(&tape, &cot, None, out);
    }

    fn jacobian(&self, y: &[f64], s: f64) -> Vec<f64> {
        self.eval_and_jacobian(y, s).1
    }

    fn eval_and_jacobian(&self, y: &[f64], s: f64) -> (Vec<f64>, Vec<f64>) {
        let d = ScoreNet::dim(self);
        let (raw, tape) = self.forward_tape(y, s);
        let c = self.output_scale(s);
        let mut jac = vec![0.0; d * d];
        let mut e = vec![0.0; d];
        for i in 0..d {
            e[i] = c;
            self.backward(&tape, &e, None, &mut jac[i * d..(i + 1) * d]);
            e[i] = 0.0;
        }
        (raw.into_iter().map(|v| v * c).collect(), jac)
    }

    fn divergence(&self, y: &[f64], s: f64) -> f64 {
        let d = ScoreNet::dim(self);
        let jac = self.jacobian(y, s);
        (0..d).map(|i| jac[i * d + i]).sum()
    }
}

pub const CHECKPOINT_FORMAT: &str = "sde-elbo/score-net/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Self-describing JSON checkpoint. Floats are written with shortest
/// round-trip formatting, so `load(save(net)) == net` bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub time_features: usize,
    pub output: OutputKind,
    pub sde: VpSde,
    pub config_hash: Option<String>,
    pub params: BTreeMap<String, ParamArray>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded};

    fn small_net(seed: u64, output: OutputKind, act: Activation) -> ScoreNet {
        let cfg = NetConfig {
            dim: 2,
            hidden: vec![7, 5],
            time_features: 2,
            activation: act,
        };
        let mut net = ScoreNet::init(&cfg, output, VpSde::default(), seed).unwrap();
        // non-zero biases so their gradients are exercised
        let mut rng = seeded(seed + 100);
        for (name, shape, off) in net.param_groups() {
            if name.ends_with("bias") {
                let b = normal_vec(&mut rng, shape[0]);
                net.params[off..off + shape[0]].iter_mut().zip(b).for_each(|(p, v)| *p = 0.3 * v);
            }
        }
        net
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = ScoreNet::zeros(NetConfig::new(3).widths(), 6, Activation::Silu, OutputKind::Score, VpSde::default())
            .unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 0.5], 0.3).unwrap(), vec![0.0; 3]);
        assert_eq!(net.divergence_exact(&[1.0, -2.0, 0.5], 0.3).unwrap(), 0.0);
    }

    #[test]
    fn forward_is_deterministic() {
        let a = small_net(3, OutputKind::Score, Activation::Silu);
        let b = small_net(3, OutputKind::Score, Activation::Silu);
        let ya = a.forward(&[0.2, 0.4], 0.7).unwrap();
        let yb = b.forward(&[0.2, 0.4], 0.7).unwrap();
        assert_eq!(ya.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), yb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_ne!(a.params(), small_net(4, OutputKind::Score, Activation::Silu).params());
    }

    #[test]
    fn single_linear_layer_matches_hand_product() {
        let mut net = ScoreNet::zeros(vec![5, 2], 1, Activation::Silu, OutputKind::Score, VpSde::default()).unwrap();
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, -1.0, 0.5, 0.0, 2.0, -3.0];
        net.params[..10].copy_from_slice(&w);
        net.params[10] = 0.25;
        net.params[11] = -0.5;
        let (y, s) = ([0.3, -1.2], 0.125);
        let feat = [y[0], y[1], s, (PI * s).sin(), (PI * s).cos()];
        let out = net.forward(&y, s).unwrap();
        for o in 0..2 {
            let expect: f64 = 0.25 * (1 - o) as f64 - 0.5 * o as f64
                + (0..5).map(|i| w[o * 5 + i] * feat[i]).sum::<f64>();
            assert!((out[o] - expect).abs() < 1e-14);
        }
        // input gradient of a linear map is W_spatial^T c
        let c = [0.7, -0.2];
        let (_, yg) = net.vjp(&y, s, &c).unwrap();
        for j in 0..2 {
            let expect = w[j] * c[0] + w[5 + j] * c[1];
            assert!((yg[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let net = small_net(5, OutputKind::Score, Activation::Silu);
        let (pg, yg) = net.vjp(&[0.1, 0.2], 0.5, &[0.0, 0.0]).unwrap();
        assert!(pg.values.iter().all(|&v| v == 0.0));
        assert!(yg.iter().all(|&v| v == 0.0));
    }

    fn fd_param_check(net: &ScoreNet) {
        let y = [0.4, -0.9];
        let s = 0.37;
        let c = [1.3, -0.6];
        let (pg, _) = net.vjp(&y, s, &c).unwrap();
        let h = 1e-5;
        for (name, shape, off) in net.param_groups() {
            let n: usize = shape.iter().product();
            let mut worst: f64 = 0.0;
            for k in off..off + n {
                let f = |delta: f64| {
                    let mut p = net.clone();
                    p.params[k] += delta;
                    let out = p.forward(&y, s).unwrap();
                    c[0] * out[0] + c[1] * out[1]
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                let scale = fd.abs().max(pg.values[k].abs()).max(1e-3);
                worst = worst.max((fd - pg.values[k]).abs() / scale);
            }
            assert!(worst < 1e-6, "{name}: relative error {worst}");
        }
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        fd_param_check(&small_net(11, OutputKind::Score, Activation::Silu));
        fd_param_check(&small_net(12, OutputKind::Drift, Activation::Silu));
        fd_param_check(&small_net(13, OutputKind::Score, Activation::Tanh));
    }

    #[test]
    fn divergence_matches_finite_difference_diagonal() {
        let net = small_net(21, OutputKind::Drift, Activation::Silu);
        let y = [0.3, 0.8];
        let s = 0.6;
        let h = 1e-5;
        let mut fd = 0.0;
        for i in 0..2 {
            let mut yp = y;
            let mut ym = y;
            yp[i] += h;
            ym[i] -= h;
            fd += (net.forward(&yp, s).unwrap()[i] - net.forward(&ym, s).unwrap()[i]) / (2.0 * h);
        }
        let exact = net.divergence_exact(&y, s).unwrap();
        assert!((fd - exact).abs() <= 1e-6 * exact.abs().max(1e-3), "{fd} vs {exact}");
    }

    #[test]
    fn jacobian_rows_agree_with_vjp() {
        let net = small_net(22, OutputKind::Score, Activation::Silu);
        let y = [-0.5, 1.1];
        let (out, jac) = net.eval_and_jacobian(&y, 0.2);
        assert_eq!(out, net.forward(&y, 0.2).unwrap());
        let row1 = net.vjp(&y, 0.2, &[0.0, 1.0]).unwrap().1;
        assert!((jac[2] - row1[0]).abs() < 1e-15 && (jac[3] - row1[1]).abs() < 1e-15);
    }

    #[test]
    fn tangent_vjp_matches_finite_differences() {
        for (seed, act, kind) in [
            (31, Activation::Silu, OutputKind::Score),
            (32, Activation::Tanh, OutputKind::Drift),
        ] {
            let net = small_net(seed, kind, act);
            let y = [0.2, -0.7];
            let s = 0.45;
            let v = [1.0, -1.0];
            let c = [0.3, 0.9];
            let w = 1.7;
            let mut pg = ParamGrad::zeros(net.num_params());
            let (out, jv) = net.tangent_vjp(&y, s, &v, &c, w, &mut pg);
            assert_eq!(out, net.forward(&y, s).unwrap());
            let jv_ref = net.vjp(&y, s, &v).unwrap().1;
            // v^T J v is the same either way
            let a: f64 = v.iter().zip(&jv).map(|(p, q)| p * q).sum();
            let b: f64 = v.iter().zip(&jv_ref).map(|(p, q)| p * q).sum();
            assert!((a - b).abs() < 1e-12);
            let objective = |p: &ScoreNet| {
                let o = p.forward(&y, s).unwrap();
                let jtv = p.vjp(&y, s, &v).unwrap().1;
                c[0] * o[0] + c[1] * o[1] + w * (v[0] * jtv[0] + v[1] * jtv[1])
            };
            let h = 1e-5;
            for k in 0..net.num_params() {
                let mut p = net.clone();
                p.params[k] += h;
                let fp = objective(&p);
                p.params[k] -= 2.0 * h;
                let fm = objective(&p);
                let fd = (fp - fm) / (2.0 * h);
                let scale = fd.abs().max(pg.values[k].abs()).max(1e-3);
                assert!((fd - pg.values[k]).abs() / scale < 1e-6, "param {k}: {fd} vs {}", pg.values[k]);
            }
        }
    }

    #[test]
    fn init_output_scale_is_order_one() {
        let net = ScoreNet::init(&NetConfig::new(2), OutputKind::Score, VpSde::default(), 9).unwrap();
        let mut rng = seeded(10);
        let outs: Vec<f64> = (0..2000)
            .flat_map(|i| {
                let y = normal_vec(&mut rng, 2);
                net.forward(&y, (i as f64 + 0.5) / 2000.0).unwrap()
            })
            .collect();
        let m = crate::stats::MeanStderr::from_values(&outs);
        let sd = m.stderr * (outs.len() as f64).sqrt();
        assert!((0.1..=10.0).contains(&sd), "std {sd}");
    }

    #[test]
    fn init_rejects_zero_widths() {
        let cfg = NetConfig { dim: 2, hidden: vec![0], time_features: 0, activation: Activation::Silu };
        assert!(ScoreNet::init(&cfg, OutputKind::Score, VpSde::default(), 0).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let net = small_net(41, OutputKind::Drift, Activation::Silu);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        net.save(&path, Some("abc".into())).unwrap();
        let (back, ck) = ScoreNet::load(&path).unwrap();
        assert_eq!(ck.config_hash.as_deref(), Some("abc"));
        let bits = |n: &ScoreNet| n.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&net), bits(&back));
        assert_eq!(net, back);
    }

    #[test]
    fn dimension_and_domain_errors() {
        let net = small_net(1, OutputKind::Score, Activation::Silu);
        assert!(matches!(net.forward(&[1.0], 0.5), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(net.forward(&[1.0, 2.0], 1.5), Err(Error::Domain { .. })));
    }
}
