//! Graph builders shared by training and inference.

use super::{duration_from_log, regulate_index, AcousticModel, ForwardMode, BN_EPS, MEL_CENTRE, MEL_SCALE};
use crate::dsp::LOG_FLOOR;
use crate::error::{Error, Result};
use crate::nn::{layers, Graph, Mat, Var};

/// Column statistics of one batch-norm layer in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub enum NoiseSource<'a> {
    /// Extracted-noise mel, encoded in evaluation mode.
    Mel(&'a Mat),
    /// Precomputed noise embedding node.
    Embedded(Var),
    /// Silence mel of the regulated length, evaluation mode.
    Silence,
}

#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub mel: Var,
    pub log_durations: Var,
    pub durations: Vec<usize>,
    pub pitch: Var,
    pub energy: Var,
}

impl AcousticModel {
    pub fn encode_phonemes_graph(&self, g: &mut Graph, tokens: &[usize], speaker: usize, env: Var) -> Result<Var> {
        self.check_tokens(tokens, speaker)?;
        let c = &self.config;
        let table = g.param("phoneme.emb")?;
        let x = g.gather_rows(table, tokens.to_vec());
        let pos = g.constant(layers::sinusoid_table(tokens.len(), c.hidden));
        let mut x = g.add(x, pos);
        for i in 0..c.enc_blocks {
            x = layers::transformer_block(g, x, &format!("enc.{i}"), c.heads, c.ffn_kernel)?;
        }
        let spk_table = g.param("speaker.emb")?;
        let spk = g.gather_rows(spk_table, vec![speaker]);
        let x = g.add(x, spk);
        Ok(g.add(x, env))
    }

    /// Two conv/ReLU/LN stages and a scalar head; output `T × 1`.
    pub fn variance_predictor_graph(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let t = g.shape(x).0;
        let k = self.config.variance_kernel;
        let h = layers::conv1d(g, x, &[t], &format!("{prefix}.c1"), k)?;
        let h = g.relu(h);
        let h = layers::layer_norm(g, h, &format!("{prefix}.ln1"))?;
        let h = layers::conv1d(g, h, &[t], &format!("{prefix}.c2"), k)?;
        let h = g.relu(h);
        let h = layers::layer_norm(g, h, &format!("{prefix}.ln2"))?;
        layers::linear(g, h, &format!("{prefix}.out"))
    }

    pub fn length_regulate_graph(&self, g: &mut Graph, x: Var, durations: &[usize]) -> Result<Var> {
        let idx = regulate_index(g.shape(x).0, durations)?;
        Ok(g.gather_rows(x, idx))
    }

    /// Returns (enriched frames, pitch prediction, energy prediction).
    pub fn variance_adaptor_graph(
        &self,
        g: &mut Graph,
        frames: Var,
        pitch_target: Option<&[f64]>,
        energy_target: Option<&[f64]>,
    ) -> Result<(Var, Var, Var)> {
        let t = g.shape(frames).0;
        let pitch = self.variance_predictor_graph(g, frames, "pitch")?;
        let energy = self.variance_predictor_graph(g, frames, "energy")?;
        let pick = |g: &Graph, given: Option<&[f64]>, predicted: Var| -> Result<Vec<f64>> {
            match given {
                Some(v) if v.len() != t => Err(Error::FrameMismatch {
                    expected: t,
                    actual: v.len(),
                }),
                Some(v) => Ok(v.to_vec()),
                None => Ok(g.value(predicted).iter().copied().collect()),
            }
        };
        let pv = pick(g, pitch_target, pitch)?;
        let ev = pick(g, energy_target, energy)?;
        let pb: Vec<usize> = pv.iter().map(|&v| self.stats.pitch_bins.bin(v)).collect();
        let eb: Vec<usize> = ev.iter().map(|&v| self.stats.energy_bins.bin(v)).collect();
        let pt = g.param("pitch_emb")?;
        let pe = g.gather_rows(pt, pb);
        let et = g.param("energy_emb")?;
        let ee = g.gather_rows(et, eb);
        let x = g.add(frames, pe);
        let x = g.add(x, ee);
        Ok((x, pitch, energy))
    }

    fn batch_norm(
        &self,
        g: &mut Graph,
        x: Var,
        prefix: &str,
        training: bool,
        stats: &mut Vec<BnBatchStats>,
    ) -> Result<Var> {
        let n = if training {
            let (n, mean, var) = g.norm_cols(x, BN_EPS);
            stats.push(BnBatchStats {
                prefix: prefix.to_string(),
                mean,
                var,
            });
            n
        } else {
            let mean = self.buffers.require(&format!("{prefix}.mean"))?;
            let var = self.buffers.require(&format!("{prefix}.var"))?;
            let inv = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            let m = g.constant(mean.clone());
            let s = g.constant(inv);
            let centred = g.sub(x, m);
            g.mul(centred, s)
        };
        let gamma = g.param(&format!("{prefix}.gamma"))?;
        let beta = g.param(&format!("{prefix}.beta"))?;
        let y = g.mul(n, gamma);
        Ok(g.add(y, beta))
    }

    /// Encodes several mels at once; convolutions never cross utterance
    /// boundaries. In training mode batch norm uses the statistics of all
    /// frames in the call and those statistics are returned.
    pub fn noise_encode_graph(
        &self,
        g: &mut Graph,
        mels: &[&Mat],
        training: bool,
    ) -> Result<(Vec<Var>, Vec<BnBatchStats>)> {
        let c = &self.config;
        let segments: Vec<usize> = mels.iter().map(|m| m.nrows()).collect();
        for m in mels {
            self.check_mel(m)?;
        }
        let views: Vec<_> = mels.iter().map(|m| m.view()).collect();
        let stacked = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))?;
        let x = g.constant(stacked);
        let mut h = layers::linear(g, x, "noise.in")?;
        let mut stats = Vec::new();
        for i in 0..c.noise_blocks {
            let y = layers::conv1d(g, h, &segments, &format!("noise.{i}.c1"), c.noise_kernel)?;
            let y = self.batch_norm(g, y, &format!("noise.{i}.bn1"), training, &mut stats)?;
            let y = g.relu(y);
            let y = layers::conv1d(g, y, &segments, &format!("noise.{i}.c2"), c.noise_kernel)?;
            let y = self.batch_norm(g, y, &format!("noise.{i}.bn2"), training, &mut stats)?;
            h = g.add(h, y);
        }
        let mut outs = Vec::with_capacity(mels.len());
        let mut start = 0;
        for len in segments {
            outs.push(if mels.len() == 1 { h } else { g.slice_rows(h, start, start + len) });
            start += len;
        }
        Ok((outs, stats))
    }

    pub fn silence_graph(&self, g: &mut Graph, frames: usize) -> Result<Var> {
        if frames == 0 {
            return Err(Error::EmptyExpansion);
        }
        let silence = Mat::from_elem((frames, self.config.n_mels), LOG_FLOOR.ln());
        let (v, _) = self.noise_encode_graph(g, &[&silence], false)?;
        Ok(v[0])
    }

    /// Reference encoder and style-token attention. Returns the `1 × hidden`
    /// embedding and the per-head attention weights.
    pub fn env_encode_graph(&self, g: &mut Graph, mel: &Mat) -> Result<(Var, Mat)> {
        self.check_mel(mel)?;
        let c = &self.config;
        let (mut h, mut w) = mel.dim();
        // Fixed affine rescaling brings log-mels to roughly unit range.
        let flat = mel.iter().map(|v| (v - MEL_CENTRE) / MEL_SCALE).collect::<Vec<_>>();
        let mut x = g.constant(Mat::from_shape_vec((h * w, 1), flat).expect("flat"));
        for i in 0..c.ref_channels.len() {
            let (cols, ho, wo) = g.im2col2d_s2(x, h, w);
            let y = layers::linear(g, cols, &format!("style.ref.{i}"))?;
            x = g.relu(y);
            h = ho;
            w = wo;
        }
        let ch = g.shape(x).1;
        let grid = g.reshape(x, h, w * ch);
        let pooled = g.mean_rows(grid);
        let r = layers::linear(g, pooled, "style.ref.proj")?;
        let r = g.tanh(r);
        let q = layers::linear(g, r, "style.q")?;
        let tokens = g.param("style.tokens")?;
        let tokens = g.tanh(tokens);
        let k = layers::linear(g, tokens, "style.k")?;
        let v = layers::linear(g, tokens, "style.v")?;
        let heads = c.style_heads;
        let dh = c.hidden / heads;
        let mut outs = Vec::with_capacity(heads);
        let mut attention = Mat::zeros((heads, c.style_tokens));
        for hd in 0..heads {
            let (lo, hi) = (hd * dh, (hd + 1) * dh);
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(k, lo, hi);
            let vh = g.slice_cols(v, lo, hi);
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt);
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let a = g.softmax_rows(s);
            attention.row_mut(hd).assign(&g.value(a).row(0));
            outs.push(g.matmul(a, vh));
        }
        let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
        Ok((out, attention))
    }

    /// `frames (+ h_noise)` through the decoder stack and mel projection.
    pub fn decode_graph(&self, g: &mut Graph, frames: Var, h_noise: Option<Var>) -> Result<Var> {
        let c = &self.config;
        let t = g.shape(frames).0;
        let mut x = match h_noise {
            Some(n) => {
                let nt = g.shape(n).0;
                if nt != t {
                    return Err(Error::FrameMismatch { expected: t, actual: nt });
                }
                g.add(frames, n)
            }
            None => frames,
        };
        let pos = g.constant(layers::sinusoid_table(t, c.hidden));
        x = g.add(x, pos);
        for i in 0..c.dec_blocks {
            x = layers::transformer_block(g, x, &format!("dec.{i}"), c.heads, c.ffn_kernel)?;
        }
        layers::linear(g, x, "mel.out")
    }

    /// Complete forward pass for one utterance.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        speaker: usize,
        env: Var,
        noise: NoiseSource<'_>,
        mode: &ForwardMode<'_>,
    ) -> Result<ForwardVars> {
        let enc = self.encode_phonemes_graph(g, tokens, speaker, env)?;
        let log_durations = self.variance_predictor_graph(g, enc, "duration")?;
        let durations: Vec<usize> = match mode {
            ForwardMode::TeacherForced(t) => t.durations.clone(),
            ForwardMode::Inference { durations: Some(d), .. } => d.to_vec(),
            ForwardMode::Inference { durations: None, .. } => {
                g.value(log_durations).iter().map(|&p| duration_from_log(p)).collect()
            }
        };
        let frames = self.length_regulate_graph(g, enc, &durations)?;
        let (pitch_target, energy_target) = match mode {
            ForwardMode::TeacherForced(t) => (Some(t.pitch.as_slice()), Some(t.energy.as_slice())),
            ForwardMode::Inference { pitch, .. } => (*pitch, None),
        };
        let (frames, pitch, energy) = self.variance_adaptor_graph(g, frames, pitch_target, energy_target)?;
        let t = g.shape(frames).0;
        let h_noise = match noise {
            NoiseSource::Embedded(v) => v,
            NoiseSource::Mel(m) => {
                if m.nrows() != t {
                    return Err(Error::FrameMismatch {
                        expected: t,
                        actual: m.nrows(),
                    });
                }
                self.noise_encode_graph(g, &[m], false)?.0[0]
            }
            NoiseSource::Silence => self.silence_graph(g, t)?,
        };
        let mel = self.decode_graph(g, frames, Some(h_noise))?;
        Ok(ForwardVars {
            mel,
            log_durations,
            durations,
            pitch,
            energy,
        })
    }
}
