//! Minimal 3x3 convolutional segmenter with hand-written reverse mode.
//!
//! Layers are same-size 3x3 convolutions with edge-replicate padding,
//! rectifiers between them and a sigmoid on the single-channel output.
//! Parameters live in one flat vector: for each layer, the weights laid out
//! `[out][in][ky][kx]`, then the biases.

use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::field::{BinaryMask2D, ScalarField2D};
use crate::rng::SplitMix64;
use crate::smooth_loss::{logit_loss_and_gradient, LossBreakdown, LossConfig};

use super::Segmenter;

const TAG_INIT: u64 = 11;
const TAPS: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvArch {
    /// Channel counts from input to output, e.g. `[1, 8, 8, 1]`.
    pub channels: Vec<usize>,
}

impl Default for ConvArch {
    fn default() -> Self {
        Self {
            channels: vec![1, 8, 8, 1],
        }
    }
}

impl ConvArch {
    pub fn validate(&self) -> Result<()> {
        let c = &self.channels;
        if c.len() < 2 || c[0] != 1 || *c.last().unwrap() != 1 || c.contains(&0) {
            return Err(Error::Config(format!(
                "channels {c:?} must start and end with 1 and have no zero entries"
            )));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.channels
            .windows(2)
            .map(|w| w[0] * w[1] * TAPS + w[1])
            .sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    n_in: usize,
    n_out: usize,
    weights: usize,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvModel {
    arch: ConvArch,
    params: Vec<f64>,
}

impl ConvModel {
    /// He-style fan-in scaled normal weights, zero biases.
    pub fn new(arch: ConvArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = vec![0.0; arch.n_params()];
        let mut rng = SplitMix64::keyed(seed, &[TAG_INIT]);
        let model_layout = layouts(&arch);
        for l in &model_layout {
            let std = (2.0 / (l.n_in * TAPS) as f64).sqrt();
            for w in &mut params[l.weights..l.bias] {
                *w = std * rng.normal();
            }
        }
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: ConvArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        check_shape(&[arch.n_params()], &[params.len()])?;
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: ConvArch) -> Result<Self> {
        let n = arch.n_params();
        Self::from_params(arch, vec![0.0; n])
    }

    pub fn arch(&self) -> &ConvArch {
        &self.arch
    }

    fn run(&self, image: &ScalarField2D) -> Tape {
        let (nx, nz) = (image.width(), image.depth());
        let mut tape = Tape {
            nx,
            nz,
            padded: Vec::new(),
            pre: Vec::new(),
            logits: Vec::new(),
        };
        let mut act = image.values().to_vec();
        let model_layout = layouts(&self.arch);
        let last = model_layout.len() - 1;
        for (li, l) in model_layout.iter().enumerate() {
            let padded = pad_channels(&act, l.n_in, nx, nz);
            let mut out = vec![0.0; l.n_out * nx * nz];
            conv_forward(
                &padded,
                &self.params[l.weights..l.bias],
                &self.params[l.bias..l.bias + l.n_out],
                *l,
                nx,
                nz,
                &mut out,
            );
            tape.padded.push(padded);
            if li == last {
                tape.logits = out;
            } else {
                act = out.iter().map(|&v| v.max(0.0)).collect();
                tape.pre.push(out);
            }
        }
        tape
    }
}

fn layouts(arch: &ConvArch) -> Vec<LayerLayout> {
    let mut off = 0;
    arch.channels
        .windows(2)
        .map(|w| {
            let weights = off;
            let bias = weights + w[0] * w[1] * TAPS;
            off = bias + w[1];
            LayerLayout {
                n_in: w[0],
                n_out: w[1],
                weights,
                bias,
            }
        })
        .collect()
}

struct Tape {
    nx: usize,
    nz: usize,
    /// Replicate-padded input of every layer.
    padded: Vec<Vec<f64>>,
    /// Pre-activation output of every hidden layer.
    pre: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn pad_channels(src: &[f64], channels: usize, nx: usize, nz: usize) -> Vec<f64> {
    let (px, pz) = (nx + 2, nz + 2);
    let mut dst = vec![0.0; channels * px * pz];
    for c in 0..channels {
        let s = &src[c * nx * nz..(c + 1) * nx * nz];
        let d = &mut dst[c * px * pz..(c + 1) * px * pz];
        for r in 0..pz {
            let sz = r.saturating_sub(1).min(nz - 1);
            let srow = &s[sz * nx..(sz + 1) * nx];
            let drow = &mut d[r * px..(r + 1) * px];
            drow[1..=nx].copy_from_slice(srow);
            drow[0] = srow[0];
            drow[nx + 1] = srow[nx - 1];
        }
    }
    dst
}

/// Adjoint of [`pad_channels`]: folds padded gradients back onto the clamped source pixels.
fn unpad_accumulate(gpad: &[f64], channels: usize, nx: usize, nz: usize) -> Vec<f64> {
    let (px, pz) = (nx + 2, nz + 2);
    let mut out = vec![0.0; channels * nx * nz];
    for c in 0..channels {
        let g = &gpad[c * px * pz..(c + 1) * px * pz];
        let o = &mut out[c * nx * nz..(c + 1) * nx * nz];
        for r in 0..pz {
            let sz = r.saturating_sub(1).min(nz - 1);
            let grow = &g[r * px..(r + 1) * px];
            let orow = &mut o[sz * nx..(sz + 1) * nx];
            for (a, b) in orow.iter_mut().zip(&grow[1..=nx]) {
                *a += b;
            }
            orow[0] += grow[0];
            orow[nx - 1] += grow[nx + 1];
        }
    }
    out
}

fn conv_forward(
    padded: &[f64],
    weights: &[f64],
    bias: &[f64],
    l: LayerLayout,
    nx: usize,
    nz: usize,
    out: &mut [f64],
) {
    let (px, pz) = (nx + 2, nz + 2);
    let n = nx * nz;
    for o in 0..l.n_out {
        let dst = &mut out[o * n..(o + 1) * n];
        dst.fill(bias[o]);
        for i in 0..l.n_in {
            let src = &padded[i * px * pz..(i + 1) * px * pz];
            let w = &weights[(o * l.n_in + i) * TAPS..(o * l.n_in + i + 1) * TAPS];
            for z in 0..nz {
                let drow = &mut dst[z * nx..(z + 1) * nx];
                for ky in 0..3 {
                    let srow = &src[(z + ky) * px..(z + ky + 1) * px];
                    let (w0, w1, w2) = (w[ky * 3], w[ky * 3 + 1], w[ky * 3 + 2]);
                    for (x, d) in drow.iter_mut().enumerate() {
                        *d += w0 * srow[x] + w1 * srow[x + 1] + w2 * srow[x + 2];
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients; returns the padded-input gradient if requested.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    padded: &[f64],
    weights: &[f64],
    gout: &[f64],
    l: LayerLayout,
    nx: usize,
    nz: usize,
    gw: &mut [f64],
    gb: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let (px, pz) = (nx + 2, nz + 2);
    let n = nx * nz;
    let mut gpad = want_input.then(|| vec![0.0; l.n_in * px * pz]);
    for o in 0..l.n_out {
        let g = &gout[o * n..(o + 1) * n];
        gb[o] += g.iter().sum::<f64>();
        for i in 0..l.n_in {
            let src = &padded[i * px * pz..(i + 1) * px * pz];
            let widx = (o * l.n_in + i) * TAPS;
            let w = &weights[widx..widx + TAPS];
            let gwk = &mut gw[widx..widx + TAPS];
            for z in 0..nz {
                let grow = &g[z * nx..(z + 1) * nx];
                for ky in 0..3 {
                    let srow = &src[(z + ky) * px..(z + ky + 1) * px];
                    let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
                    for (x, &gv) in grow.iter().enumerate() {
                        a0 += gv * srow[x];
                        a1 += gv * srow[x + 1];
                        a2 += gv * srow[x + 2];
                    }
                    gwk[ky * 3] += a0;
                    gwk[ky * 3 + 1] += a1;
                    gwk[ky * 3 + 2] += a2;
                }
            }
            if let Some(gp) = gpad.as_mut() {
                let dst = &mut gp[i * px * pz..(i + 1) * px * pz];
                for z in 0..nz {
                    let grow = &g[z * nx..(z + 1) * nx];
                    for ky in 0..3 {
                        let drow = &mut dst[(z + ky) * px..(z + ky + 1) * px];
                        let (w0, w1, w2) = (w[ky * 3], w[ky * 3 + 1], w[ky * 3 + 2]);
                        for (x, &gv) in grow.iter().enumerate() {
                            drow[x] += w0 * gv;
                            drow[x + 1] += w1 * gv;
                            drow[x + 2] += w2 * gv;
                        }
                    }
                }
            }
        }
    }
    gpad
}

impl Segmenter for ConvModel {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn logits(&self, image: &ScalarField2D) -> Result<ScalarField2D> {
        let tape = self.run(image);
        ScalarField2D::new(tape.nx, tape.nz, tape.logits)
    }

    fn loss_and_gradient(
        &self,
        image: &ScalarField2D,
        target: &BinaryMask2D,
        cfg: &LossConfig,
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        check_shape(&image.shape(), &target.shape())?;
        let tape = self.run(image);
        let (nx, nz) = (tape.nx, tape.nz);
        let logits = ScalarField2D::new(nx, nz, tape.logits.clone())?;
        let (loss, glogit) = logit_loss_and_gradient(&logits, target, cfg)?;

        let mut grad = vec![0.0; self.params.len()];
        let model_layout = layouts(&self.arch);
        let mut gout = glogit.into_values();
        for li in (0..model_layout.len()).rev() {
            let l = model_layout[li];
            let (gw_all, gb_all) = grad.split_at_mut(l.bias);
            let gpad = conv_backward(
                &tape.padded[li],
                &self.params[l.weights..l.bias],
                &gout,
                l,
                nx,
                nz,
                &mut gw_all[l.weights..],
                &mut gb_all[..l.n_out],
                li > 0,
            );
            if let Some(gpad) = gpad {
                let mut gin = unpad_accumulate(&gpad, l.n_in, nx, nz);
                for (g, &a) in gin.iter_mut().zip(&tape.pre[li - 1]) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
                gout = gin;
            }
        }
        Ok((loss, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smooth_loss::total_loss;

    fn image(nx: usize, nz: usize, seed: u64) -> ScalarField2D {
        let mut r = SplitMix64::new(seed);
        ScalarField2D::new(nx, nz, (0..nx * nz).map(|_| r.next_f64()).collect()).unwrap()
    }

    #[test]
    fn param_count() {
        assert_eq!(ConvArch::default().n_params(), 80 + 584 + 73);
    }

    #[test]
    fn zero_model_outputs_half() {
        let m = ConvModel::zeros(ConvArch::default()).unwrap();
        let p = m.forward(&image(5, 4, 1)).unwrap();
        assert!(p.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn output_shape_matches_input() {
        let m = ConvModel::new(ConvArch::default(), 3).unwrap();
        for (nx, nz) in [(3, 3), (7, 4), (4, 11)] {
            let p = m.forward(&image(nx, nz, 2)).unwrap();
            assert_eq!(p.shape(), [nx, nz]);
            assert!(p.values().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn padding_adjoint() {
        // <pad(a), b> == <a, unpad(b)>
        let (nx, nz, c) = (4, 3, 2);
        let mut r = SplitMix64::new(5);
        let a: Vec<f64> = (0..c * nx * nz).map(|_| r.normal()).collect();
        let b: Vec<f64> = (0..c * (nx + 2) * (nz + 2)).map(|_| r.normal()).collect();
        let lhs: f64 = pad_channels(&a, c, nx, nz).iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(unpad_accumulate(&b, c, nx, nz)).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn s_zero_gradient_equals_bce_only() {
        let m = ConvModel::new(ConvArch::default(), 8).unwrap();
        let img = image(9, 7, 4);
        let t = BinaryMask2D::from_fn(9, 7, |_, z| (2..5).contains(&z)).unwrap();
        let (l, g) = m
            .loss_and_gradient(&img, &t, &LossConfig::with_weight(0.0))
            .unwrap();
        assert_eq!(l.total, l.bce_mean);
        let pred = m.forward(&img).unwrap();
        let direct = total_loss(&pred, &t, &LossConfig::with_weight(0.0)).unwrap();
        assert_eq!(l, direct);
        assert!(g.iter().all(|v| v.is_finite()));
    }
}
