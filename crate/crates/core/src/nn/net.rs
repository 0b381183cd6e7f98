//! Batched forward evaluation and reverse-mode gradients for [`DenseNetSpec`] networks.

use serde::{Deserialize, Serialize};

use super::gemm::{gemm_ab, gemm_abt, gemm_atb};
use super::{DenseNetSpec, NnError, ParamKind, ParamSet};

const NORM_EPS: f64 = 1e-5;

/// Per-hidden-layer FiLM scale `γ` and shift `δ`, flattened as
/// `[γ₁, δ₁, γ₂, δ₂, …]` over the slotted layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilmVector {
    pub data: Vec<f64>,
    pub widths: Vec<usize>,
}

impl FilmVector {
    /// `γ = 1`, `δ = 0`.
    pub fn identity(widths: &[usize]) -> Self {
        let mut data = Vec::with_capacity(widths.iter().map(|w| 2 * w).sum());
        for &w in widths {
            data.extend(std::iter::repeat_n(1.0, w));
            data.extend(std::iter::repeat_n(0.0, w));
        }
        FilmVector {
            data,
            widths: widths.to_vec(),
        }
    }

    pub fn gamma(&self, slot: usize) -> &[f64] {
        let off = self.offset(slot);
        &self.data[off..off + self.widths[slot]]
    }

    pub fn shift(&self, slot: usize) -> &[f64] {
        let off = self.offset(slot) + self.widths[slot];
        &self.data[off..off + self.widths[slot]]
    }

    fn offset(&self, slot: usize) -> usize {
        self.widths[..slot].iter().map(|w| 2 * w).sum()
    }
}

/// FiLM input for a batch.
#[derive(Debug, Clone, Copy)]
pub enum Film<'a> {
    None,
    /// One vector shared by every row.
    Shared(&'a FilmVector),
    /// `batch × film_len` row-major, same per-row layout as [`FilmVector::data`].
    PerSample(&'a [f64]),
}

impl Film<'_> {
    fn is_none(&self) -> bool {
        matches!(self, Film::None)
    }

    #[inline]
    fn row<'b>(&'b self, r: usize, film_len: usize) -> &'b [f64] {
        match self {
            Film::None => &[],
            Film::Shared(f) => &f.data,
            Film::PerSample(d) => &d[r * film_len..(r + 1) * film_len],
        }
    }
}

#[derive(Debug, Default, Clone)]
struct LayerTape {
    input: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    normed: Vec<f64>,
    pre_act: Vec<f64>,
}

/// Activations recorded during a batched forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    pub batch: usize,
    pub output: Vec<f64>,
    layers: Vec<LayerTape>,
    last_input: Vec<f64>,
}

/// Gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    /// `batch × input_width`
    pub input: Vec<f64>,
    /// `batch × film_len`, empty without FiLM.
    pub film: Vec<f64>,
}

fn check_inputs(
    spec: &DenseNetSpec,
    params: &ParamSet,
    inputs: &[f64],
    batch: usize,
    film: &Film<'_>,
) -> Result<(), NnError> {
    if params.layout != ParamSet::layout_for(spec) {
        return Err(NnError::Dimension("parameter layout does not match spec".into()));
    }
    if inputs.len() != batch * spec.input_width() {
        return Err(NnError::Dimension(format!(
            "input has {} values, expected {}×{}",
            inputs.len(),
            batch,
            spec.input_width()
        )));
    }
    if spec.has_film() == film.is_none() {
        return Err(NnError::Dimension(
            "FiLM input must be present exactly when the spec has FiLM slots".into(),
        ));
    }
    let film_len = spec.film_len();
    match film {
        Film::Shared(f) if f.data.len() != film_len => Err(NnError::Dimension(format!(
            "FiLM vector has {} values, expected {film_len}",
            f.data.len()
        ))),
        Film::PerSample(d) if d.len() != batch * film_len => Err(NnError::Dimension(format!(
            "per-sample FiLM has {} values, expected {}×{film_len}",
            d.len(),
            batch
        ))),
        _ => Ok(()),
    }
}

fn film_offsets(spec: &DenseNetSpec) -> Vec<Option<usize>> {
    let mut off = 0;
    (0..spec.hidden_layers())
        .map(|l| {
            if spec.film_slot(l) {
                let o = off;
                off += 2 * spec.layer_widths[l + 1];
                Some(o)
            } else {
                None
            }
        })
        .collect()
}

fn run(
    spec: &DenseNetSpec,
    params: &ParamSet,
    inputs: &[f64],
    batch: usize,
    film: Film<'_>,
    record: bool,
) -> Result<Tape, NnError> {
    check_inputs(spec, params, inputs, batch, &film)?;
    let film_len = spec.film_len();
    let offsets = film_offsets(spec);
    let mut layers = Vec::with_capacity(spec.hidden_layers());
    let mut h = inputs.to_vec();

    for l in 0..spec.hidden_layers() {
        let (n_in, n_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
        let w = params.block(l, ParamKind::Weight).unwrap();
        let b = params.block(l, ParamKind::Bias).unwrap();
        let mut z = vec![0.0; batch * n_out];
        for row in z.chunks_exact_mut(n_out) {
            row.copy_from_slice(b);
        }
        gemm_abt(batch, n_in, n_out, &h, w, 1.0, &mut z);

        let mut tape = LayerTape::default();
        let mut normed = z;
        if spec.use_layer_norm {
            let gain = params.block(l, ParamKind::NormGain).unwrap();
            let shift = params.block(l, ParamKind::NormBias).unwrap();
            let mut xhat = vec![0.0; batch * n_out];
            let mut inv_std = vec![0.0; batch];
            for r in 0..batch {
                let row = &mut normed[r * n_out..(r + 1) * n_out];
                let mean = row.iter().sum::<f64>() / n_out as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n_out as f64;
                let is = 1.0 / (var + NORM_EPS).sqrt();
                inv_std[r] = is;
                let xr = &mut xhat[r * n_out..(r + 1) * n_out];
                for j in 0..n_out {
                    xr[j] = (row[j] - mean) * is;
                    row[j] = xr[j] * gain[j] + shift[j];
                }
            }
            if record {
                tape.xhat = xhat;
                tape.inv_std = inv_std;
            }
        }

        let mut pre = normed.clone();
        if let Some(off) = offsets[l] {
            for r in 0..batch {
                let f = film.row(r, film_len);
                let (gamma, delta) = (&f[off..off + n_out], &f[off + n_out..off + 2 * n_out]);
                let row = &mut pre[r * n_out..(r + 1) * n_out];
                for j in 0..n_out {
                    row[j] = gamma[j] * row[j] + delta[j];
                }
            }
        }

        let mut out: Vec<f64> = pre.iter().map(|&m| spec.activation.apply(m)).collect();
        if spec.skip_at(l) {
            for (o, i) in out.iter_mut().zip(&h) {
                *o += i;
            }
        }
        if let Some(bad) = out.iter().position(|v| !v.is_finite()) {
            return Err(NnError::NonFinite {
                layer: l,
                index: bad,
            });
        }
        if record {
            tape.input = std::mem::take(&mut h);
            tape.normed = normed;
            tape.pre_act = pre;
            layers.push(tape);
        }
        h = out;
    }

    let l = spec.linear_layers() - 1;
    let (n_in, n_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
    let w = params.block(l, ParamKind::Weight).unwrap();
    let b = params.block(l, ParamKind::Bias).unwrap();
    let mut output = vec![0.0; batch * n_out];
    for row in output.chunks_exact_mut(n_out) {
        row.copy_from_slice(b);
    }
    gemm_abt(batch, n_in, n_out, &h, w, 1.0, &mut output);
    if let Some(bad) = output.iter().position(|v| !v.is_finite()) {
        return Err(NnError::NonFinite {
            layer: l,
            index: bad,
        });
    }
    Ok(Tape {
        batch,
        output,
        layers,
        last_input: if record { h } else { Vec::new() },
    })
}

/// Evaluates the network on one input vector.
pub fn forward(
    spec: &DenseNetSpec,
    params: &ParamSet,
    input: &[f64],
    film: Option<&FilmVector>,
) -> Result<Vec<f64>, NnError> {
    let film = film.map_or(Film::None, Film::Shared);
    Ok(run(spec, params, input, 1, film, false)?.output)
}

/// Evaluates `batch` row-major inputs without recording a tape.
pub fn forward_batch(
    spec: &DenseNetSpec,
    params: &ParamSet,
    inputs: &[f64],
    batch: usize,
    film: Film<'_>,
) -> Result<Vec<f64>, NnError> {
    Ok(run(spec, params, inputs, batch, film, false)?.output)
}

/// Forward pass that records the activations needed by [`backward`].
pub fn forward_tape(
    spec: &DenseNetSpec,
    params: &ParamSet,
    inputs: &[f64],
    batch: usize,
    film: Film<'_>,
) -> Result<Tape, NnError> {
    run(spec, params, inputs, batch, film, true)
}

/// Reverse pass: propagates `d_output` (`batch × output_width`) back to the
/// parameters, inputs and FiLM vectors.
pub fn backward(
    spec: &DenseNetSpec,
    params: &ParamSet,
    tape: &Tape,
    film: Film<'_>,
    d_output: &[f64],
) -> Result<Gradients, NnError> {
    let batch = tape.batch;
    if d_output.len() != batch * spec.output_width() {
        return Err(NnError::Dimension("output gradient has wrong length".into()));
    }
    if let Some(bad) = d_output.iter().position(|v| !v.is_finite()) {
        return Err(NnError::NonFinite {
            layer: spec.linear_layers() - 1,
            index: bad,
        });
    }
    let film_len = spec.film_len();
    let offsets = film_offsets(spec);
    let mut gp = vec![0.0; params.len()];
    let mut gfilm = if film.is_none() {
        Vec::new()
    } else {
        vec![0.0; batch * film_len]
    };

    // output layer
    let l = spec.linear_layers() - 1;
    let (n_in, n_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
    let wr = params.block_range(l, ParamKind::Weight).unwrap();
    let br = params.block_range(l, ParamKind::Bias).unwrap();
    gemm_atb(n_out, batch, n_in, d_output, &tape.last_input, 0.0, &mut gp[wr.clone()]);
    for row in d_output.chunks_exact(n_out) {
        for (g, d) in gp[br.clone()].iter_mut().zip(row) {
            *g += d;
        }
    }
    let mut dh = vec![0.0; batch * n_in];
    gemm_ab(batch, n_out, n_in, d_output, &params.values[wr], 0.0, &mut dh);

    for l in (0..spec.hidden_layers()).rev() {
        let t = &tape.layers[l];
        let (n_in, n_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
        let mut d_in = vec![0.0; batch * n_in];
        if spec.skip_at(l) {
            d_in.copy_from_slice(&dh);
        }
        let mut dm: Vec<f64> = dh
            .iter()
            .zip(&t.pre_act)
            .map(|(d, &m)| d * spec.activation.derivative(m))
            .collect();
        if let Some(off) = offsets[l] {
            for r in 0..batch {
                let f = film.row(r, film_len);
                let gamma = &f[off..off + n_out];
                let gf = &mut gfilm[r * film_len + off..r * film_len + off + 2 * n_out];
                let row = &mut dm[r * n_out..(r + 1) * n_out];
                let normed = &t.normed[r * n_out..(r + 1) * n_out];
                for j in 0..n_out {
                    gf[j] = row[j] * normed[j];
                    gf[n_out + j] = row[j];
                    row[j] *= gamma[j];
                }
            }
        }
        // dm now holds d(normed)
        let mut dz = dm;
        if spec.use_layer_norm {
            let gain = params.block(l, ParamKind::NormGain).unwrap();
            let gr = params.block_range(l, ParamKind::NormGain).unwrap();
            let sr = params.block_range(l, ParamKind::NormBias).unwrap();
            for r in 0..batch {
                let dn = &mut dz[r * n_out..(r + 1) * n_out];
                let xh = &t.xhat[r * n_out..(r + 1) * n_out];
                let mut mean_dx = 0.0;
                let mut mean_dx_x = 0.0;
                for j in 0..n_out {
                    gp[gr.start + j] += dn[j] * xh[j];
                    gp[sr.start + j] += dn[j];
                    let dx = dn[j] * gain[j];
                    dn[j] = dx;
                    mean_dx += dx;
                    mean_dx_x += dx * xh[j];
                }
                mean_dx /= n_out as f64;
                mean_dx_x /= n_out as f64;
                let is = t.inv_std[r];
                for j in 0..n_out {
                    dn[j] = is * (dn[j] - mean_dx - xh[j] * mean_dx_x);
                }
            }
        }
        let wr = params.block_range(l, ParamKind::Weight).unwrap();
        let br = params.block_range(l, ParamKind::Bias).unwrap();
        gemm_atb(n_out, batch, n_in, &dz, &t.input, 0.0, &mut gp[wr.clone()]);
        for row in dz.chunks_exact(n_out) {
            for (g, d) in gp[br.clone()].iter_mut().zip(row) {
                *g += d;
            }
        }
        gemm_ab(batch, n_out, n_in, &dz, &params.values[wr], 1.0, &mut d_in);
        if let Some(bad) = d_in.iter().position(|v| !v.is_finite()) {
            return Err(NnError::NonFinite { layer: l, index: bad });
        }
        dh = d_in;
    }

    Ok(Gradients {
        params: gp,
        input: dh,
        film: gfilm,
    })
}

/// Loss value and parameter gradient for a loss defined on the network output.
///
/// `loss` maps the `batch × output_width` outputs to a scalar and its gradient
/// with respect to those outputs.
pub fn value_and_grad<L>(
    spec: &DenseNetSpec,
    params: &ParamSet,
    inputs: &[f64],
    batch: usize,
    film: Film<'_>,
    loss: L,
) -> Result<(f64, Vec<f64>), NnError>
where
    L: FnOnce(&[f64]) -> (f64, Vec<f64>),
{
    let tape = forward_tape(spec, params, inputs, batch, film)?;
    let (value, d_out) = loss(&tape.output);
    if !value.is_finite() {
        return Err(NnError::NonFinite {
            layer: spec.linear_layers() - 1,
            index: 0,
        });
    }
    let g = backward(spec, params, &tape, film, &d_out)?;
    Ok((value, g.params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight-line single-sample evaluation, independent of the batched path.
    fn reference_forward(spec: &DenseNetSpec, p: &ParamSet, x: &[f64], film: Option<&FilmVector>) -> Vec<f64> {
        let mut h = x.to_vec();
        let mut slot = 0;
        for l in 0..spec.linear_layers() {
            let (n_in, n_out) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
            let w = p.block(l, ParamKind::Weight).unwrap();
            let b = p.block(l, ParamKind::Bias).unwrap();
            let mut z: Vec<f64> = (0..n_out)
                .map(|i| b[i] + (0..n_in).map(|j| w[i * n_in + j] * h[j]).sum::<f64>())
                .collect();
            if l == spec.linear_layers() - 1 {
                return z;
            }
            if spec.use_layer_norm {
                let mean = z.iter().sum::<f64>() / n_out as f64;
                let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_out as f64;
                let g = p.block(l, ParamKind::NormGain).unwrap();
                let s = p.block(l, ParamKind::NormBias).unwrap();
                for i in 0..n_out {
                    z[i] = (z[i] - mean) / (var + 1e-5).sqrt() * g[i] + s[i];
                }
            }
            if spec.film_slot(l) {
                let f = film.unwrap();
                for i in 0..n_out {
                    z[i] = f.gamma(slot)[i] * z[i] + f.shift(slot)[i];
                }
                slot += 1;
            }
            let mut a: Vec<f64> = z.iter().map(|&v| v / (1.0 + (-v).exp())).collect();
            if spec.use_skip && n_in == n_out {
                for i in 0..n_out {
                    a[i] += h[i];
                }
            }
            h = a;
        }
        unreachable!()
    }

    #[test]
    fn zero_weights_give_output_bias() {
        let spec = DenseNetSpec::new(vec![3, 4, 2]);
        let mut p = ParamSet::zeros(&spec);
        let r = p.block_range(1, ParamKind::Bias).unwrap();
        p.values[r].copy_from_slice(&[0.25, -1.5]);
        let out = forward(&spec, &p, &[9.0, -3.0, 1.0], None).unwrap();
        assert_eq!(out, vec![0.25, -1.5]);
    }

    #[test]
    fn identity_linear_net() {
        let spec = DenseNetSpec {
            layer_widths: vec![2, 2, 2],
            activation: Activation::Rectified,
            use_layer_norm: false,
            use_skip: false,
            film_slots: vec![],
        };
        let mut p = ParamSet::zeros(&spec);
        for l in 0..2 {
            let r = p.block_range(l, ParamKind::Weight).unwrap();
            p.values[r].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        }
        assert_eq!(forward(&spec, &p, &[0.5, 2.0], None).unwrap(), vec![0.5, 2.0]);
    }

    #[test]
    fn matches_reference_evaluation() {
        let spec = DenseNetSpec::new(vec![3, 6, 6, 2]).with_film_on_all_hidden();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::init(&spec, &mut rng, false);
        for v in p.values.iter_mut() {
            *v += 0.01;
        }
        let film = FilmVector {
            data: (0..spec.film_len()).map(|i| 1.0 + 0.1 * (i as f64).sin()).collect(),
            widths: spec.film_widths(),
        };
        let x = [0.3, -0.7, 1.1];
        let a = forward(&spec, &p, &x, Some(&film)).unwrap();
        let b = reference_forward(&spec, &p, &x, Some(&film));
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12, "{u} vs {v}");
        }
    }

    #[test]
    fn identity_film_equals_unconditioned_path() {
        let with = DenseNetSpec::new(vec![2, 5, 5, 1]).with_film_on_all_hidden();
        let without = DenseNetSpec {
            film_slots: vec![],
            ..with.clone()
        };
        let p = ParamSet::init(&with, &mut ChaCha8Rng::seed_from_u64(9), false);
        let film = FilmVector::identity(&with.film_widths());
        let x = [0.4, -0.2];
        assert_eq!(
            forward(&with, &p, &x, Some(&film)).unwrap(),
            forward(&without, &p, &x, None).unwrap()
        );
    }

    #[test]
    fn film_presence_is_enforced() {
        let spec = DenseNetSpec::new(vec![2, 3, 1]).with_film_on_all_hidden();
        let p = ParamSet::zeros(&spec);
        assert!(matches!(forward(&spec, &p, &[0.0, 0.0], None), Err(NnError::Dimension(_))));
        assert!(matches!(forward(&spec, &p, &[0.0], Some(&FilmVector::identity(&[3]))), Err(NnError::Dimension(_))));
    }

    #[test]
    fn non_finite_input_reports_layer() {
        let spec = DenseNetSpec::new(vec![1, 3, 1]);
        let p = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(1), false);
        let err = forward(&spec, &p, &[f64::NAN], None).unwrap_err();
        assert!(matches!(err, NnError::NonFinite { layer: 0, .. }));
    }

    #[test]
    fn quadratic_loss_on_output_bias() {
        // loss = ½‖out‖² with zero weights: gradient w.r.t. output bias equals the bias
        let spec = DenseNetSpec::new(vec![1, 2, 2]);
        let mut p = ParamSet::zeros(&spec);
        let r = p.block_range(1, ParamKind::Bias).unwrap();
        p.values[r.clone()].copy_from_slice(&[0.3, -0.4]);
        let (v, g) = value_and_grad(&spec, &p, &[1.0], 1, Film::None, |o| {
            (0.5 * o.iter().map(|x| x * x).sum::<f64>(), o.to_vec())
        })
        .unwrap();
        assert!((v - 0.125).abs() < 1e-15);
        assert_eq!(&g[r], &[0.3, -0.4]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let spec = DenseNetSpec::new(vec![2, 4, 4, 1]);
        let p = ParamSet::init(&spec, &mut ChaCha8Rng::seed_from_u64(2), false);
        let (_, g) = value_and_grad(&spec, &p, &[0.1, 0.2], 1, Film::None, |o| (1.0, vec![0.0; o.len()])).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }
}
