//! Time-domain mask-based separator, used pretrained in two roles: noise
//! extractor (degraded → additive noise) and denoiser (degraded → speech).

mod pretrain;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::nn::{glorot, layers, Graph, Mat, ParamStore, Var};
use crate::seed::seeded_rng;

pub use pretrain::{
    pretrain_separator, PretrainConfig, PretrainLogEntry, PretrainOutcome, Pretrainer, SeparationExample,
};

pub const SEPARATOR_KIND: &str = "separator";
pub const SEPARATOR_VERSION: u32 = 1;
/// Upper limit reported by [`si_snr`].
pub const SI_SNR_CAP_DB: f64 = 60.0;
const GLN_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum SeparatorMode {
    ExtractNoise,
    Denoise,
}

impl std::str::FromStr for SeparatorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "extract-noise" => Ok(SeparatorMode::ExtractNoise),
            "denoise" => Ok(SeparatorMode::Denoise),
            _ => Err(Error::invalid(format!("mode must be extract-noise or denoise, got '{s}'"))),
        }
    }
}

impl std::fmt::Display for SeparatorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SeparatorMode::ExtractNoise => "extract-noise",
            SeparatorMode::Denoise => "denoise",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SeparatorConfig {
    /// Size of the learned analysis/synthesis basis.
    pub n_filters: usize,
    /// Basis length in samples; frames advance by half of it.
    pub filter_len: usize,
    pub bottleneck: usize,
    /// Channels inside each temporal-convolution block.
    pub hidden: usize,
    pub kernel: usize,
    pub blocks: usize,
    pub repeats: usize,
    pub mode: SeparatorMode,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        SeparatorConfig {
            n_filters: 128,
            filter_len: 32,
            bottleneck: 64,
            hidden: 128,
            kernel: 3,
            blocks: 4,
            repeats: 2,
            mode: SeparatorMode::ExtractNoise,
        }
    }
}

impl SeparatorConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.n_filters,
            self.filter_len,
            self.bottleneck,
            self.hidden,
            self.kernel,
            self.blocks,
            self.repeats,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config(format!("separator sizes must be positive: {self:?}")));
        }
        if self.filter_len < 2 || self.filter_len % 2 != 0 {
            return Err(Error::Config("separator filter_len must be even and at least 2".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("separator kernel must be odd".into()));
        }
        Ok(())
    }

    pub fn hop(&self) -> usize {
        self.filter_len / 2
    }

    pub fn n_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop()) + 1
    }
}

/// Configuration plus learned arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Separator {
    pub config: SeparatorConfig,
    pub params: ParamStore,
}

fn init_gln(store: &mut ParamStore, prefix: &str, dim: usize) {
    layers::init_layer_norm(store, prefix, dim);
}

impl Separator {
    pub fn init<R: Rng>(config: SeparatorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut p = ParamStore::new();
        p.insert("enc.basis", glorot(rng, c.filter_len, c.n_filters));
        init_gln(&mut p, "enc.norm", c.n_filters);
        layers::init_linear(&mut p, rng, "bottleneck", c.n_filters, c.bottleneck);
        for r in 0..c.repeats {
            for b in 0..c.blocks {
                let pre = format!("tcn.{r}.{b}");
                layers::init_linear(&mut p, rng, &format!("{pre}.in"), c.bottleneck, c.hidden);
                init_gln(&mut p, &format!("{pre}.norm1"), c.hidden);
                let lim = (3.0 / c.kernel as f64).sqrt();
                p.insert(format!("{pre}.dw.w"), crate::nn::uniform(rng, c.kernel, c.hidden, lim));
                p.insert(format!("{pre}.dw.b"), Mat::zeros((1, c.hidden)));
                init_gln(&mut p, &format!("{pre}.norm2"), c.hidden);
                layers::init_linear(&mut p, rng, &format!("{pre}.res"), c.hidden, c.bottleneck);
                layers::init_linear(&mut p, rng, &format!("{pre}.skip"), c.hidden, c.bottleneck);
            }
        }
        layers::init_linear(&mut p, rng, "mask", c.bottleneck, c.n_filters);
        p.insert("dec.basis", glorot(rng, c.n_filters, c.filter_len));
        Ok(Separator { config, params: p })
    }

    pub fn init_seeded(config: SeparatorConfig, seed: u64) -> Result<Self> {
        Separator::init(config, &mut seeded_rng(seed))
    }

    /// Differentiable forward pass of an `n × 1` signal node.
    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let c = &self.config;
        let n = g.shape(x).0;
        let hop = c.hop();
        let frames = g.frames(x, c.filter_len, hop, c.n_frames(n));
        let basis = g.param("enc.basis")?;
        let enc = g.matmul(frames, basis);
        let enc = g.relu(enc);
        let y = gln(g, enc, "enc.norm")?;
        let mut y = layers::linear(g, y, "bottleneck")?;
        let mut skip_sum: Option<Var> = None;
        for r in 0..c.repeats {
            for b in 0..c.blocks {
                let pre = format!("tcn.{r}.{b}");
                let h = layers::linear(g, y, &format!("{pre}.in"))?;
                let h = g.relu(h);
                let h = gln(g, h, &format!("{pre}.norm1"))?;
                let w = g.param(&format!("{pre}.dw.w"))?;
                let bias = g.param(&format!("{pre}.dw.b"))?;
                let h = g.depthwise_conv(h, w, 1 << b);
                let h = g.add(h, bias);
                let h = g.relu(h);
                let h = gln(g, h, &format!("{pre}.norm2"))?;
                let res = layers::linear(g, h, &format!("{pre}.res"))?;
                let skip = layers::linear(g, h, &format!("{pre}.skip"))?;
                y = g.add(y, res);
                skip_sum = Some(match skip_sum {
                    Some(s) => g.add(s, skip),
                    None => skip,
                });
            }
        }
        let s = g.relu(skip_sum.expect("at least one block"));
        let m = layers::linear(g, s, "mask")?;
        let mask = g.sigmoid(m);
        let masked = g.mul(enc, mask);
        let dec = g.param("dec.basis")?;
        let out_frames = g.matmul(masked, dec);
        Ok(g.overlap_add(out_frames, hop, n))
    }

    /// Separates `w`; the output has exactly `w.len()` samples.
    pub fn forward(&self, w: &Waveform) -> Result<Waveform> {
        self.params.check_finite()?;
        if w.is_empty() {
            return Ok(w.clone());
        }
        let mut g = Graph::new(&self.params);
        let x = g.constant(Mat::from_shape_vec((w.len(), 1), w.samples().to_vec()).expect("column"));
        let y = self.forward_graph(&mut g, x)?;
        let out: Vec<f64> = g.value(y).iter().copied().collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("separator produced non-finite output".into()));
        }
        Waveform::new(out, w.sample_rate())
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(
            SEPARATOR_KIND,
            SEPARATOR_VERSION,
            serde_json::json!({ "config": self.config, "extra": extra }),
        );
        ck.put_group("params", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: SeparatorConfig = ck.meta_field("config")?;
        let params = ck.group("params");
        let reference = Separator::init_seeded(config.clone(), 0)?;
        reference.params.check_layout(&params)?;
        Ok(Separator { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Separator::from_checkpoint(&Checkpoint::load_expect(path, SEPARATOR_KIND, SEPARATOR_VERSION)?)
    }
}

/// Global layer normalization: statistics over the whole `frames × channels`
/// map, per-channel gain and bias.
fn gln(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}.gamma"))?;
    let beta = g.param(&format!("{prefix}.beta"))?;
    let n = g.norm_all(x, GLN_EPS);
    let y = g.mul(n, gamma);
    Ok(g.add(y, beta))
}

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|v| v - m).collect()
}

/// Scale-invariant SNR in dB, capped at [`SI_SNR_CAP_DB`].
pub fn si_snr(est: &Waveform, target: &Waveform) -> Result<f64> {
    si_snr_slices(est.samples(), target.samples())
}

pub fn si_snr_slices(est: &[f64], target: &[f64]) -> Result<f64> {
    if est.len() != target.len() {
        return Err(Error::invalid(format!(
            "SI-SNR needs equal lengths, got {} and {}",
            est.len(),
            target.len()
        )));
    }
    let e = zero_mean(est);
    let t = zero_mean(target);
    let tt: f64 = t.iter().map(|v| v * v).sum();
    if tt <= 0.0 {
        return Err(Error::InvalidTarget);
    }
    let alpha = e.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>() / tt;
    let ss: f64 = t.iter().map(|v| (alpha * v) * (alpha * v)).sum();
    let nn: f64 = e.iter().zip(&t).map(|(a, b)| (a - alpha * b) * (a - alpha * b)).sum();
    if nn <= 0.0 || nn <= ss * 10f64.powf(-SI_SNR_CAP_DB / 10.0) {
        return Ok(SI_SNR_CAP_DB);
    }
    if ss <= 0.0 {
        return Ok(-SI_SNR_CAP_DB.max(-10.0 * (nn.log10())));
    }
    Ok((10.0 * (ss / nn).log10()).min(SI_SNR_CAP_DB))
}

/// Differentiable SI-SNR (uncapped) of `est` against a constant `target`,
/// both `n × 1`.
pub fn si_snr_graph(g: &mut Graph, est: Var, target: &[f64]) -> Result<Var> {
    let t = zero_mean(target);
    let tt: f64 = t.iter().map(|v| v * v).sum();
    if tt <= 0.0 {
        return Err(Error::InvalidTarget);
    }
    let tv = g.constant(Mat::from_shape_vec((t.len(), 1), t).expect("column"));
    let mean = g.mean_all(est);
    let e = g.sub(est, mean);
    let et = g.mul(e, tv);
    let dot = g.sum_all(et);
    let alpha = g.scale(dot, 1.0 / tt);
    let s = g.mul(tv, alpha);
    let resid = g.sub(e, s);
    let s2 = g.square(s);
    let ss = g.sum_all(s2);
    let r2 = g.square(resid);
    let nn = g.sum_all(r2);
    let ss = g.add_scalar(ss, 1e-10);
    let nn = g.add_scalar(nn, 1e-10);
    let ratio = g.div(ss, nn);
    let l = g.ln(ratio);
    Ok(g.scale(l, 10.0 / std::f64::consts::LN_10))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_gradients;

    fn micro() -> SeparatorConfig {
        SeparatorConfig {
            n_filters: 8,
            filter_len: 8,
            bottleneck: 4,
            hidden: 6,
            kernel: 3,
            blocks: 2,
            repeats: 1,
            mode: SeparatorMode::ExtractNoise,
        }
    }

    fn signal(n: usize, seed: u64) -> Vec<f64> {
        let mut r = seeded_rng(seed);
        (0..n).map(|_| r.random_range(-0.5..0.5)).collect()
    }

    #[test]
    fn output_length_matches_input() {
        let sep = Separator::init_seeded(SeparatorConfig::default(), 1).unwrap();
        for n in [1000, 4096, 22050] {
            let w = Waveform::new(signal(n, n as u64), 22050).unwrap();
            let y = sep.forward(&w).unwrap();
            assert_eq!(y.len(), n);
            assert!(y.samples().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let sep = Separator::init_seeded(micro(), 2).unwrap();
        let w = Waveform::new(signal(700, 3), 22050).unwrap();
        assert_eq!(sep.forward(&w).unwrap(), sep.forward(&w).unwrap());
    }

    #[test]
    fn non_finite_params_are_rejected() {
        let mut sep = Separator::init_seeded(micro(), 2).unwrap();
        sep.params.get_mut("mask.b").unwrap()[[0, 0]] = f64::NAN;
        let w = Waveform::new(signal(100, 3), 22050).unwrap();
        assert!(matches!(sep.forward(&w), Err(Error::Numerical(_))));
    }

    #[test]
    fn si_snr_reference_cases() {
        let t = signal(1000, 4);
        let tw = Waveform::new(t.clone(), 22050).unwrap();
        assert_eq!(si_snr(&tw, &tw).unwrap(), SI_SNR_CAP_DB);
        assert_eq!(si_snr(&tw.scaled(2.0), &tw).unwrap(), SI_SNR_CAP_DB);
        assert!(matches!(
            si_snr(&tw, &Waveform::zeros(1000, 22050)),
            Err(Error::InvalidTarget)
        ));
    }

    #[test]
    fn graph_si_snr_matches_plain() {
        let t = signal(300, 5);
        let e = signal(300, 6);
        let mut p = ParamStore::new();
        p.insert("e", Mat::from_shape_vec((300, 1), e.clone()).unwrap());
        let mut g = Graph::new(&p);
        let ev = g.param("e").unwrap();
        let s = si_snr_graph(&mut g, ev, &t).unwrap();
        assert!((g.scalar(s) - si_snr_slices(&e, &t).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn separator_loss_gradient_matches_finite_differences() {
        let sep = Separator::init_seeded(micro(), 7).unwrap();
        let x = signal(512, 8);
        let target = signal(512, 9);
        let eval = |p: &ParamStore| {
            let s = Separator {
                config: sep.config.clone(),
                params: p.clone(),
            };
            let mut g = Graph::new(p);
            let xv = g.constant(Mat::from_shape_vec((512, 1), x.clone()).unwrap());
            let y = s.forward_graph(&mut g, xv).unwrap();
            let snr = si_snr_graph(&mut g, y, &target).unwrap();
            let loss = g.scale(snr, -1.0);
            (g.scalar(loss), g.backward(loss).into_params(p))
        };
        let (_, grads) = eval(&sep.params);
        let names: Vec<String> = sep.params.names().cloned().collect();
        let report =
            check_gradients(&sep.params, &grads, &names, 3, 1e-6, 1e-6, &mut seeded_rng(1), |p| Ok(eval(p).0)).unwrap();
        assert!(report.max_rel_error() <= 1e-3, "{:?}", report.worst());
    }

    #[test]
    fn checkpoint_round_trip() {
        let sep = Separator::init_seeded(micro(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.ckpt");
        sep.save(&p, serde_json::json!({"step": 5})).unwrap();
        assert_eq!(Separator::load(&p).unwrap(), sep);
    }
}
